//! Canonical line-delimited JSON: one utterance per line,
//! `{"text": .., "spans": [{"start_char", "end_char", "slot"}], "lang"?}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    #[serde(default)]
    spans: Vec<CharSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CharSpan {
    start_char: usize,
    end_char: usize,
    slot: String,
}

pub fn parse_jsonl(source: &str, content: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}: line {}", i + 1);
        let record: Record =
            serde_json::from_str(line).map_err(|e| Error::data(&location, e.to_string()))?;
        let spans: Vec<_> = record
            .spans
            .into_iter()
            .map(|s| (s.start_char, s.end_char, s.slot))
            .collect();
        let utt = Utterance::from_char_spans(&record.text, &spans, record.lang)
            .map_err(|m| Error::data(&location, m))?;
        out.push(utt);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let content = super::read_text(path)?;
    parse_jsonl(&path.display().to_string(), &content)
}

pub fn to_jsonl_line(utt: &Utterance) -> Result<String> {
    let record = Record {
        text: utt.text.clone(),
        spans: utt
            .char_spans()
            .into_iter()
            .map(|(start_char, end_char, slot)| CharSpan {
                start_char,
                end_char,
                slot,
            })
            .collect(),
        lang: utt.lang.clone(),
    };
    Ok(serde_json::to_string(&record)?)
}

pub fn save_jsonl(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for u in utterances {
        writeln!(w, "{}", to_jsonl_line(u)?)?;
    }
    w.flush()?;
    Ok(())
}
