//! Two-column CoNLL: `token<TAB>tag` per line, blank line between utterances.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{labels_from_spans, spans_from_labels, BioLabel, Utterance};
use crate::error::{Error, Result};

pub fn parse_conll(source: &str, content: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<BioLabel> = Vec::new();
    let mut block = 0;
    let mut first_line = 1;

    let mut flush =
        |words: &mut Vec<String>, labels: &mut Vec<BioLabel>, block: usize| -> Result<()> {
            if words.is_empty() {
                return Ok(());
            }
            let spans = spans_from_labels(labels);
            let utt = Utterance::from_tokens(words, spans, None)
                .map_err(|m| Error::data(format!("{source}: block {block}"), m))?;
            out.push(utt);
            words.clear();
            labels.clear();
            Ok(())
        };

    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !words.is_empty() {
                flush(&mut words, &mut labels, block)?;
                block += 1;
            }
            first_line = i + 2;
            continue;
        }
        let (token, tag) = match line.split_once('\t') {
            Some((tok, tag)) => (tok.trim(), tag.trim()),
            None => line
                .trim()
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| {
                    Error::data(
                        format!("{source}: block {block} (line {})", i + 1),
                        format!("expected `token<TAB>tag`, got `{line}`"),
                    )
                })?,
        };
        let label = BioLabel::parse(tag).ok_or_else(|| {
            Error::data(
                format!("{source}: block {block} (starting line {first_line})"),
                format!("unknown tag `{tag}` on line {}", i + 1),
            )
        })?;
        words.push(token.to_string());
        labels.push(label);
    }
    flush(&mut words, &mut labels, block)?;
    Ok(out)
}

pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let content = super::read_text(path)?;
    parse_conll(&path.display().to_string(), &content)
}

pub fn to_conll_block(utt: &Utterance) -> Result<String> {
    let labels = labels_from_spans(&utt.spans, utt.len())?;
    let mut s = String::new();
    for (tok, label) in utt.tokens.iter().zip(labels) {
        s.push_str(&tok.surface);
        s.push('\t');
        s.push_str(&label.to_string());
        s.push('\n');
    }
    Ok(s)
}

pub fn save_conll(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        write!(w, "{}", to_conll_block(u)?)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlotSpan;

    const TWO_BLOCKS: &str = "from\tO\ndenver\tB-fromloc\nto\tO\nboston\tB-toloc\n\nhi\tO\n";

    #[test]
    fn two_blocks_two_utterances() {
        let utts = parse_conll("mem", TWO_BLOCKS).unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(
            utts[0].spans,
            vec![SlotSpan::new(1, 1, "fromloc"), SlotSpan::new(3, 3, "toloc")]
        );
        assert_eq!(utts[0].text, "from denver to boston");
    }

    #[test]
    fn unknown_prefix_names_block() {
        let err = parse_conll("f.conll", "a\tO\n\nb\tX-foo\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("block 1"), "{err}");
    }

    #[test]
    fn stray_inside_is_repaired() {
        let utts = parse_conll("mem", "a\tI-time\nb\tI-time\nc\tO\n").unwrap();
        assert_eq!(utts[0].spans, vec![SlotSpan::new(0, 1, "time")]);
    }

    #[test]
    fn round_trip_is_identical() {
        let utts = parse_conll("mem", TWO_BLOCKS).unwrap();
        let text: Vec<String> = utts.iter().map(|u| to_conll_block(u).unwrap()).collect();
        let again = parse_conll("mem", &text.join("\n")).unwrap();
        assert_eq!(utts, again);
    }
}
