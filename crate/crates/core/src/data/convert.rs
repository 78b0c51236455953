//! Converters from the corpora's native layouts to [`Utterance`]s.
//!
//! * RESTAURANTS-8K: a JSON array of `{"userInput": {"text"}, "labels":
//!   [{"slot", "valueSpan": {"startIndex"?, "endIndex"}}]}`; a missing
//!   `startIndex` means 0.
//! * MTOP: tab-separated `id, intent, slots, utterance, domain, locale, ...`
//!   where `slots` is a comma list of `start:end:SL:NAME` character spans.
//! * ATIS: `BOS w1 .. wn EOS<TAB>O t1 .. tn INTENT`, one utterance per line.
//!
//! Examples whose spans cut through a token are skipped and reported rather
//! than failing the whole file, since the native tokenisations differ from
//! ours in rare cases.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use super::{spans_from_labels, BioLabel, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NativeFormat {
    Restaurants8k,
    Mtop,
    Atis,
}

impl NativeFormat {
    pub const ALL: [NativeFormat; 3] = [
        NativeFormat::Restaurants8k,
        NativeFormat::Mtop,
        NativeFormat::Atis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NativeFormat::Restaurants8k => "restaurants8k",
            NativeFormat::Mtop => "mtop",
            NativeFormat::Atis => "atis",
        }
    }
}

impl fmt::Display for NativeFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NativeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown native format `{s}` (restaurants8k, mtop, atis)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conversion {
    pub utterances: Vec<Utterance>,
    /// `"<location>: <reason>"` for every example left out.
    pub skipped: Vec<String>,
}

#[derive(Deserialize)]
struct R8kExample {
    #[serde(rename = "userInput")]
    user_input: R8kInput,
    #[serde(default)]
    labels: Vec<R8kLabel>,
}

#[derive(Deserialize)]
struct R8kInput {
    text: String,
}

#[derive(Deserialize)]
struct R8kLabel {
    slot: String,
    #[serde(rename = "valueSpan")]
    value_span: R8kSpan,
}

#[derive(Deserialize)]
struct R8kSpan {
    #[serde(rename = "startIndex", default)]
    start: usize,
    #[serde(rename = "endIndex")]
    end: usize,
}

pub fn parse_restaurants8k(source: &str, content: &str) -> Result<Conversion> {
    let examples: Vec<R8kExample> =
        serde_json::from_str(content).map_err(|e| Error::data(source, e.to_string()))?;
    let mut out = Conversion::default();
    for (i, ex) in examples.into_iter().enumerate() {
        let spans: Vec<_> = ex
            .labels
            .into_iter()
            .map(|l| (l.value_span.start, l.value_span.end, l.slot))
            .collect();
        match Utterance::from_char_spans(&ex.user_input.text, &spans, Some("en".into())) {
            Ok(u) => out.utterances.push(u),
            Err(e) => out.skipped.push(format!("{source}: example {i}: {e}")),
        }
    }
    Ok(out)
}

fn parse_mtop_slots(field: &str) -> std::result::Result<Vec<(usize, usize, String)>, String> {
    field
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let mut parts = item.splitn(3, ':');
            let (Some(s), Some(e), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("malformed slot `{item}`"));
            };
            let s = s.parse().map_err(|_| format!("bad start in `{item}`"))?;
            let e = e.parse().map_err(|_| format!("bad end in `{item}`"))?;
            Ok((s, e, label.strip_prefix("SL:").unwrap_or(label).to_string()))
        })
        .collect()
}

pub fn parse_mtop(source: &str, content: &str) -> Result<Conversion> {
    let mut out = Conversion::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}: line {}", i + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::data(
                location,
                format!(
                    "expected at least 4 tab-separated columns, got {}",
                    cols.len()
                ),
            ));
        }
        let spans = parse_mtop_slots(cols[2]).map_err(|e| Error::data(&location, e))?;
        let lang = cols
            .get(5)
            .map(|l| l.split('_').next().unwrap_or(l).to_string());
        match Utterance::from_char_spans(cols[3], &spans, lang) {
            Ok(u) => out.utterances.push(u),
            Err(e) => out.skipped.push(format!("{location}: {e}")),
        }
    }
    Ok(out)
}

pub fn parse_atis(source: &str, content: &str) -> Result<Conversion> {
    let mut out = Conversion::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}: line {}", i + 1);
        let (words, tags) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(&location, "expected `BOS ... EOS<TAB>tags`"))?;
        let mut words: Vec<&str> = words.split_whitespace().collect();
        let mut tags: Vec<&str> = tags.split_whitespace().collect();
        if words.first() == Some(&"BOS") {
            words.remove(0);
            tags.remove(0);
        }
        if words.last() == Some(&"EOS") {
            words.pop();
        }
        // The final tag is the intent label.
        if tags.len() == words.len() + 1 {
            tags.pop();
        }
        if tags.len() != words.len() {
            return Err(Error::data(
                location,
                format!("{} words but {} tags", words.len(), tags.len()),
            ));
        }
        let labels = tags
            .iter()
            .map(|t| {
                BioLabel::parse(t)
                    .ok_or_else(|| Error::data(&location, format!("unknown tag `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        match Utterance::from_tokens(&words, spans_from_labels(&labels), Some("en".into())) {
            Ok(u) => out.utterances.push(u),
            Err(e) => out.skipped.push(format!("{location}: {e}")),
        }
    }
    Ok(out)
}

pub fn convert_str(format: NativeFormat, source: &str, content: &str) -> Result<Conversion> {
    match format {
        NativeFormat::Restaurants8k => parse_restaurants8k(source, content),
        NativeFormat::Mtop => parse_mtop(source, content),
        NativeFormat::Atis => parse_atis(source, content),
    }
}

pub fn convert_file(format: NativeFormat, path: impl AsRef<Path>) -> Result<Conversion> {
    let path = path.as_ref();
    let content = super::read_text(path)?;
    convert_str(format, &path.display().to_string(), &content)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlotSpan;

    #[test]
    fn restaurants8k_missing_start_means_zero() {
        let json = r#"[
            {"userInput": {"text": "4 people at 7pm"}, "labels": [
                {"slot": "people", "valueSpan": {"endIndex": 8}},
                {"slot": "time", "valueSpan": {"startIndex": 12, "endIndex": 15}}]},
            {"userInput": {"text": "hi"}}
        ]"#;
        let c = parse_restaurants8k("r8k", json).unwrap();
        assert_eq!(c.utterances.len(), 2);
        assert_eq!(
            c.utterances[0].spans,
            vec![SlotSpan::new(0, 1, "people"), SlotSpan::new(3, 3, "time")]
        );
        assert!(c.utterances[1].spans.is_empty());
    }

    #[test]
    fn misaligned_example_is_skipped_with_location() {
        let json = r#"[{"userInput": {"text": "at 7pm"}, "labels": [{"slot": "time", "valueSpan": {"startIndex": 3, "endIndex": 4}}]}]"#;
        let c = parse_restaurants8k("r8k", json).unwrap();
        assert!(c.utterances.is_empty());
        assert!(c.skipped[0].starts_with("r8k: example 0"));
    }

    #[test]
    fn mtop_slots_strip_prefix_and_take_language() {
        let tsv =
            "1\tIN:GET_WEATHER\t18:26:SL:LOCATION\twhat's it like in new york\tweather\ten_XX\t[]";
        let c = parse_mtop("m", tsv).unwrap();
        let u = &c.utterances[0];
        assert_eq!(u.lang.as_deref(), Some("en"));
        assert_eq!(u.spans, vec![SlotSpan::new(4, 5, "LOCATION")]);
        assert!(matches!(parse_mtop("m", "a\tb"), Err(Error::Data { .. })));
    }

    #[test]
    fn atis_drops_markers_and_intent() {
        let line = "BOS from denver to new york EOS\tO O B-fromloc.city_name O B-toloc.city_name I-toloc.city_name atis_flight";
        let c = parse_atis("a", line).unwrap();
        let u = &c.utterances[0];
        assert_eq!(u.text, "from denver to new york");
        assert_eq!(
            u.spans,
            vec![
                SlotSpan::new(1, 1, "fromloc.city_name"),
                SlotSpan::new(3, 4, "toloc.city_name")
            ]
        );
        assert!(matches!(
            parse_atis("a", "BOS a b EOS\tO O"),
            Err(Error::Data { .. })
        ));
    }

    #[test]
    fn format_names_round_trip() {
        for f in NativeFormat::ALL {
            assert_eq!(f.name().parse::<NativeFormat>().unwrap(), f);
        }
        assert!("xml".parse::<NativeFormat>().is_err());
    }
}
