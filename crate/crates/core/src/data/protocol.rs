//! Few-shot subsets and held-out entity substitution.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::params::rng_for;

/// Describes the data behind a run; embedded in every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Split name and number of utterances, e.g. `("train", 128)`.
    pub split_sizes: Vec<(String, usize)>,
    pub slots: Vec<String>,
    /// Training fraction as `1/denominator`.
    pub denominator: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        splits: &[(&str, &[Utterance])],
        denominator: usize,
        seed: u64,
    ) -> Self {
        let all: Vec<Utterance> = splits.iter().flat_map(|(_, u)| u.iter().cloned()).collect();
        Self {
            name: name.into(),
            split_sizes: splits
                .iter()
                .map(|(n, u)| (n.to_string(), u.len()))
                .collect(),
            slots: super::slot_inventory(&all),
            denominator,
            seed,
        }
    }
}

/// Seeded shuffle of `items`, then the first `floor(len / denominator)`.
///
/// `denominator` must be a power of two in `1..=256`. For one seed the
/// permutation is shared, so smaller subsets are prefixes of larger ones.
pub fn fraction_split<T: Clone>(items: &[T], denominator: usize, seed: u64) -> Result<Vec<T>> {
    if denominator == 0 || denominator > 256 || !denominator.is_power_of_two() {
        return Err(Error::Config(format!(
            "fraction denominator must be a power of two between 1 and 256, got {denominator}"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_for(seed, "fraction_split"));
    let keep = items.len() / denominator;
    if keep == 0 {
        return Err(Error::Config(format!(
            "1/{denominator} of {} items leaves an empty subset",
            items.len()
        )));
    }
    Ok(order[..keep].iter().map(|&i| items[i].clone()).collect())
}

fn surface_forms(utterances: &[Utterance], slot: &str) -> BTreeSet<String> {
    utterances
        .iter()
        .flat_map(|u| {
            u.spans
                .iter()
                .filter(|s| s.slot == slot)
                .map(|s| u.span_text(s).to_lowercase())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Fails if any replacement already appears as a `slot` value in `train`.
pub fn ensure_unseen(train: &[Utterance], slot: &str, replacements: &[String]) -> Result<()> {
    let seen = surface_forms(train, slot);
    let collisions: Vec<&str> = replacements
        .iter()
        .filter(|r| seen.contains(&r.to_lowercase()))
        .map(String::as_str)
        .collect();
    if collisions.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "replacement values already seen as `{slot}` in training data: {}",
            collisions.join(", ")
        )))
    }
}

/// Replaces every `slot` span with a value drawn uniformly from
/// `replacements`, retokenising and shifting the other spans.
pub fn substitute_entities(
    dataset: &[Utterance],
    slot: &str,
    replacements: &[String],
    seed: u64,
) -> Result<Vec<Utterance>> {
    if replacements.is_empty() {
        return Err(Error::Config("replacement list is empty".into()));
    }
    if let Some(bad) = replacements
        .iter()
        .find(|r| r.trim().is_empty() || r.trim() != r.as_str())
    {
        return Err(Error::Config(format!(
            "replacement `{bad}` is empty or has surrounding whitespace"
        )));
    }
    let mut rng = rng_for(seed, "substitute");
    let mut out = Vec::with_capacity(dataset.len());
    for (i, utt) in dataset.iter().enumerate() {
        let chars: Vec<char> = utt.text.chars().collect();
        let mut text = String::with_capacity(utt.text.len());
        let mut spans = Vec::with_capacity(utt.spans.len());
        let mut cursor = 0;
        let mut written = 0;
        for (start, end, name) in utt.char_spans() {
            let gap: String = chars[cursor..start].iter().collect();
            written += gap.chars().count();
            text.push_str(&gap);
            let value: String = if name == slot {
                replacements[rng.random_range(0..replacements.len())].clone()
            } else {
                chars[start..end].iter().collect()
            };
            let len = value.chars().count();
            text.push_str(&value);
            spans.push((written, written + len, name));
            written += len;
            cursor = end;
        }
        text.extend(&chars[cursor..]);
        let new = Utterance::from_char_spans(&text, &spans, utt.lang.clone())
            .map_err(|m| Error::data(format!("utterance {i}"), m))?;
        out.push(new);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlotSpan;

    #[test]
    fn fraction_sizes() {
        let items: Vec<usize> = (0..8198).collect();
        let sizes: Vec<usize> = [2, 4, 8, 16, 32, 64, 128, 256]
            .iter()
            .map(|&d| fraction_split(&items, d, 7).unwrap().len())
            .collect();
        assert_eq!(sizes, [4099, 2049, 1024, 512, 256, 128, 64, 32]);
    }

    #[test]
    fn fraction_subsets_nest_and_repeat() {
        let items: Vec<usize> = (0..1000).collect();
        let half = fraction_split(&items, 2, 3).unwrap();
        let eighth = fraction_split(&items, 8, 3).unwrap();
        assert_eq!(&half[..eighth.len()], &eighth[..]);
        assert_eq!(half, fraction_split(&items, 2, 3).unwrap());
        assert_ne!(half, fraction_split(&items, 2, 4).unwrap());
    }

    #[test]
    fn fraction_rejects_bad_denominators() {
        for d in [0, 3, 512] {
            assert!(fraction_split(&[1, 2, 3], d, 0).is_err());
        }
        assert!(fraction_split(&[1, 2, 3], 4, 0).is_err());
        let mut all = fraction_split(&[5, 1, 3], 1, 9).unwrap();
        all.sort();
        assert_eq!(all, [1, 3, 5]);
    }

    #[test]
    fn substitution_shifts_spans() {
        let utt = Utterance::from_tokens(
            &["fly", "from", "boston", "to", "denver", "tomorrow"],
            vec![
                SlotSpan::new(2, 2, "from_city"),
                SlotSpan::new(4, 4, "to_city"),
                SlotSpan::new(5, 5, "date"),
            ],
            None,
        )
        .unwrap();
        let out = substitute_entities(&[utt], "from_city", &["new york city".into()], 1).unwrap();
        let u = &out[0];
        assert_eq!(u.text, "fly from new york city to denver tomorrow");
        assert_eq!(
            u.spans,
            vec![
                SlotSpan::new(2, 4, "from_city"),
                SlotSpan::new(6, 6, "to_city"),
                SlotSpan::new(7, 7, "date")
            ]
        );
    }

    #[test]
    fn no_target_spans_is_unchanged() {
        let utt = Utterance::from_tokens(&["at", "noon"], vec![SlotSpan::new(1, 1, "time")], None)
            .unwrap();
        let out = substitute_entities(std::slice::from_ref(&utt), "to_city", &["oslo".into()], 0)
            .unwrap();
        assert_eq!(out, vec![utt]);
    }

    #[test]
    fn single_word_replacement() {
        let utt = Utterance::from_tokens(
            &["to", "boston", "."],
            vec![SlotSpan::new(1, 1, "to_city")],
            None,
        )
        .unwrap();
        let out = substitute_entities(&[utt], "to_city", &["zagreb".into()], 0).unwrap();
        assert_eq!(out[0].text, "to zagreb .");
        assert_eq!(out[0].spans, vec![SlotSpan::new(1, 1, "to_city")]);
    }

    #[test]
    fn collision_detected() {
        let utt = Utterance::from_tokens(
            &["to", "Dallas"],
            vec![SlotSpan::new(1, 1, "to_city")],
            None,
        )
        .unwrap();
        assert!(ensure_unseen(std::slice::from_ref(&utt), "to_city", &["dallas".into()]).is_err());
        assert!(ensure_unseen(&[utt], "to_city", &["oslo".into()]).is_ok());
    }
}
