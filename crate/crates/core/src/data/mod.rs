//! Utterances, slot spans, tokenisation and the on-disk dataset formats.
//!
//! Offsets are counted in Unicode scalar values (`char`s), not bytes, and
//! character ranges are half-open. Token spans are inclusive on both ends.

pub mod conll;
pub mod convert;
pub mod jsonl;
pub mod protocol;
pub mod synthetic;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use protocol::{ensure_unseen, fraction_split, substitute_entities, DatasetManifest};

/// A typed entity: tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub slot: String,
}

impl SlotSpan {
    pub fn new(start: usize, end: usize, slot: impl Into<String>) -> Self {
        Self {
            start,
            end,
            slot: slot.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// First char of the token in the utterance text.
    pub start: usize,
    /// One past the last char.
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<Token>,
    pub spans: Vec<SlotSpan>,
    pub lang: Option<String>,
}

impl Utterance {
    /// Tokenises `text` and converts character spans `(start, end, slot)` to
    /// token spans. A span must start and end on token boundaries.
    pub fn from_char_spans(
        text: &str,
        char_spans: &[(usize, usize, String)],
        lang: Option<String>,
    ) -> Result<Self, String> {
        let tokens = tokenize(text);
        let mut spans = Vec::with_capacity(char_spans.len());
        for (s, e, slot) in char_spans {
            if s >= e {
                return Err(format!("empty span [{s}, {e}) for slot `{slot}`"));
            }
            let start = tokens.iter().position(|t| t.start == *s);
            let end = tokens.iter().position(|t| t.end == *e);
            match (start, end) {
                (Some(a), Some(b)) if a <= b => spans.push(SlotSpan::new(a, b, slot.clone())),
                _ => {
                    let piece: String = text.chars().skip(*s).take(e.saturating_sub(*s)).collect();
                    return Err(format!(
                        "span [{s}, {e}) `{piece}` for slot `{slot}` does not align with token boundaries"
                    ));
                }
            }
        }
        let utt = Self {
            text: text.to_string(),
            tokens,
            spans,
            lang,
        };
        utt.validate()?;
        Ok(utt)
    }

    /// Builds an utterance from pre-split tokens joined by single spaces.
    pub fn from_tokens<S: AsRef<str>>(
        words: &[S],
        spans: Vec<SlotSpan>,
        lang: Option<String>,
    ) -> Result<Self, String> {
        let mut text = String::new();
        let mut tokens = Vec::with_capacity(words.len());
        let mut pos = 0;
        for (i, w) in words.iter().enumerate() {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(format!("token {i} `{w}` is empty or contains whitespace"));
            }
            if i > 0 {
                text.push(' ');
                pos += 1;
            }
            let len = w.chars().count();
            text.push_str(w);
            tokens.push(Token {
                surface: w.to_string(),
                start: pos,
                end: pos + len,
            });
            pos += len;
        }
        let utt = Self {
            text,
            tokens,
            spans,
            lang,
        };
        utt.validate()?;
        Ok(utt)
    }

    /// Checks span bounds and that spans do not overlap; sorts spans.
    pub fn validate(&self) -> Result<(), String> {
        let t = self.tokens.len();
        let mut sorted = self.spans.clone();
        sorted.sort();
        for s in &sorted {
            if s.start > s.end || s.end >= t {
                return Err(format!(
                    "span ({}, {}, {}) outside {} tokens",
                    s.start, s.end, s.slot, t
                ));
            }
        }
        for pair in sorted.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(format!(
                    "overlapping spans ({}, {}, {}) and ({}, {}, {})",
                    pair[0].start,
                    pair[0].end,
                    pair[0].slot,
                    pair[1].start,
                    pair[1].end,
                    pair[1].slot
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Character range `[start, end)` covered by a token span.
    pub fn char_range(&self, span: &SlotSpan) -> (usize, usize) {
        (self.tokens[span.start].start, self.tokens[span.end].end)
    }

    /// Surface text of a span.
    pub fn span_text(&self, span: &SlotSpan) -> String {
        let (s, e) = self.char_range(span);
        self.text.chars().skip(s).take(e - s).collect()
    }

    pub fn char_spans(&self) -> Vec<(usize, usize, String)> {
        let mut spans = self.spans.clone();
        spans.sort();
        spans
            .iter()
            .map(|s| {
                let (a, b) = self.char_range(s);
                (a, b, s.slot.clone())
            })
            .collect()
    }

    /// Spans sorted by position.
    pub fn sorted_spans(&self) -> Vec<SlotSpan> {
        let mut spans = self.spans.clone();
        spans.sort();
        spans
    }
}

/// Distinct slot types across a dataset, sorted.
pub fn slot_inventory(utterances: &[Utterance]) -> Vec<String> {
    utterances
        .iter()
        .flat_map(|u| u.spans.iter().map(|s| s.slot.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿'
                | '«'
                | '»'
                | '…'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '。'
                | '、'
                | '，'
                | '！'
                | '？'
                | '।'
        )
}

/// Whitespace split, then leading and trailing punctuation characters each
/// become their own token. Inner punctuation (`o'clock`, `7:30`) stays put.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let end = i;
        let mut lo = start;
        while lo < end && is_punct(chars[lo]) {
            lo += 1;
        }
        let mut hi = end;
        while hi > lo && is_punct(chars[hi - 1]) {
            hi -= 1;
        }
        let mut push = |a: usize, b: usize| {
            tokens.push(Token {
                surface: chars[a..b].iter().collect(),
                start: a,
                end: b,
            })
        };
        for p in start..lo {
            push(p, p + 1);
        }
        if lo < hi {
            push(lo, hi);
        }
        for p in hi..end {
            push(p, p + 1);
        }
    }
    tokens
}

/// One position of a BIO sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BioLabel {
    Outside,
    Begin(String),
    Inside(String),
}

impl BioLabel {
    pub fn parse(tag: &str) -> Option<Self> {
        if tag == "O" {
            return Some(BioLabel::Outside);
        }
        let (prefix, slot) = tag.split_once('-')?;
        if slot.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(BioLabel::Begin(slot.to_string())),
            "I" => Some(BioLabel::Inside(slot.to_string())),
            _ => None,
        }
    }

    pub fn slot(&self) -> Option<&str> {
        match self {
            BioLabel::Outside => None,
            BioLabel::Begin(s) | BioLabel::Inside(s) => Some(s),
        }
    }
}

impl std::fmt::Display for BioLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BioLabel::Outside => f.write_str("O"),
            BioLabel::Begin(s) => write!(f, "B-{s}"),
            BioLabel::Inside(s) => write!(f, "I-{s}"),
        }
    }
}

/// Maximal `B-X (I-X)*` runs become spans. An `I-X` that does not continue a
/// run of the same type opens a new span, as if it were `B-X`.
pub fn spans_from_labels(labels: &[BioLabel]) -> Vec<SlotSpan> {
    let mut spans = Vec::new();
    let mut open: Option<SlotSpan> = None;
    for (t, label) in labels.iter().enumerate() {
        match label {
            BioLabel::Outside => {
                spans.extend(open.take());
            }
            BioLabel::Begin(slot) => {
                spans.extend(open.take());
                open = Some(SlotSpan::new(t, t, slot.clone()));
            }
            BioLabel::Inside(slot) => match open.as_mut() {
                Some(span) if span.slot == *slot => span.end = t,
                _ => {
                    spans.extend(open.take());
                    open = Some(SlotSpan::new(t, t, slot.clone()));
                }
            },
        }
    }
    spans.extend(open);
    spans
}

/// Exact BIO encoding of non-overlapping spans over `len` tokens.
pub fn labels_from_spans(spans: &[SlotSpan], len: usize) -> Result<Vec<BioLabel>> {
    let mut labels = vec![BioLabel::Outside; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Contract(format!(
                "span ({}, {}, {}) outside {len} tokens",
                s.start, s.end, s.slot
            )));
        }
        for (t, label) in labels.iter_mut().enumerate().take(s.end + 1).skip(s.start) {
            if *label != BioLabel::Outside {
                return Err(Error::Contract(format!("overlapping spans at token {t}")));
            }
            *label = if t == s.start {
                BioLabel::Begin(s.slot.clone())
            } else {
                BioLabel::Inside(s.slot.clone())
            };
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Conll,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("conll") | Some("bio") | Some("tsv") | Some("txt") => Ok(Format::Conll),
            _ => Err(Error::data(
                path.display().to_string(),
                "cannot infer dataset format from extension (use .jsonl or .conll)",
            )),
        }
    }
}

/// Reads a UTF-8 file, naming the path in any error.
pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Loads JSONL or CoNLL depending on the file extension.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Jsonl => jsonl::load_jsonl(path),
        Format::Conll => conll::load_conll(path),
    }
}

pub fn save_dataset(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Jsonl => jsonl::save_jsonl(path, utterances),
        Format::Conll => conll::save_conll(path, utterances),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(|t| t.surface).collect()
    }

    #[test]
    fn tokenizer_splits_edge_punctuation() {
        assert_eq!(surfaces("book at noon"), ["book", "at", "noon"]);
        assert_eq!(surfaces("  hi,  there!? "), ["hi", ",", "there", "!", "?"]);
        assert_eq!(surfaces("(7:30) o'clock"), ["(", "7:30", ")", "o'clock"]);
        assert_eq!(surfaces("..."), [".", ".", "."]);
        assert!(surfaces("   ").is_empty());
    }

    #[test]
    fn token_offsets_are_char_based() {
        let toks = tokenize("café à deux");
        assert_eq!(toks[1].start, 5);
        assert_eq!(toks[2].end, 11);
    }

    #[test]
    fn char_spans_map_to_tokens() {
        let u =
            Utterance::from_char_spans("book at noon", &[(8, 12, "time".into())], None).unwrap();
        assert_eq!(u.words(), ["book", "at", "noon"]);
        assert_eq!(u.spans, vec![SlotSpan::new(2, 2, "time")]);
    }

    #[test]
    fn misaligned_span_rejected() {
        let err = Utterance::from_char_spans("book at noon", &[(8, 10, "time".into())], None)
            .unwrap_err();
        assert!(err.contains("token boundaries"), "{err}");
    }

    #[test]
    fn overlapping_spans_rejected() {
        let spans = vec![SlotSpan::new(0, 1, "a"), SlotSpan::new(1, 2, "b")];
        assert!(Utterance::from_tokens(&["x", "y", "z"], spans, None).is_err());
    }

    #[test]
    fn bio_decoding_cases() {
        let p = |tags: &[&str]| -> Vec<BioLabel> {
            tags.iter().map(|t| BioLabel::parse(t).unwrap()).collect()
        };
        assert!(spans_from_labels(&p(&["O", "O", "O"])).is_empty());
        assert_eq!(
            spans_from_labels(&p(&["B-time", "I-time", "O", "B-people"])),
            vec![SlotSpan::new(0, 1, "time"), SlotSpan::new(3, 3, "people")]
        );
        assert_eq!(
            spans_from_labels(&p(&["I-time", "I-time"])),
            vec![SlotSpan::new(0, 1, "time")]
        );
        assert_eq!(
            spans_from_labels(&p(&["B-a", "I-b", "I-b"])),
            vec![SlotSpan::new(0, 0, "a"), SlotSpan::new(1, 2, "b")]
        );
    }

    #[test]
    fn bio_parse_rejects_unknown_prefixes() {
        assert!(BioLabel::parse("X-time").is_none());
        assert!(BioLabel::parse("B-").is_none());
        assert!(BioLabel::parse("time").is_none());
        assert_eq!(
            BioLabel::parse("B-from-loc").unwrap(),
            BioLabel::Begin("from-loc".into())
        );
    }

    #[test]
    fn labels_from_spans_rejects_overlap() {
        let spans = [SlotSpan::new(0, 1, "a"), SlotSpan::new(1, 1, "b")];
        assert!(labels_from_spans(&spans, 3).is_err());
    }
}
