//! Loading and converting the checked-in fixture files.

use std::path::{Path, PathBuf};

use slotter::data::convert::{convert_file, NativeFormat};
use slotter::data::{load_dataset, save_dataset, slot_inventory, SlotSpan};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/fixtures")
        .join(name)
}

#[test]
fn native_samples_convert_without_skips() {
    for (format, file) in [
        (NativeFormat::Restaurants8k, "restaurants8k_sample.json"),
        (NativeFormat::Mtop, "mtop_sample.tsv"),
        (NativeFormat::Atis, "atis_sample.iob"),
    ] {
        let c = convert_file(format, fixture(file)).unwrap();
        assert_eq!(c.utterances.len(), 5, "{format}");
        assert!(c.skipped.is_empty(), "{format}: {:?}", c.skipped);
        assert!(c.utterances.iter().any(|u| !u.spans.is_empty()), "{format}");
    }
}

#[test]
fn conll_fixture_round_trips_through_jsonl() {
    let utts = load_dataset(fixture("sample.conll")).unwrap();
    assert_eq!(utts.len(), 3);
    assert_eq!(
        utts[0].spans,
        vec![SlotSpan::new(4, 4, "people"), SlotSpan::new(6, 7, "time")]
    );
    assert!(utts[2].spans.is_empty());
    let dir = tempfile::tempdir().unwrap();
    for name in ["out.jsonl", "out.conll"] {
        let path = dir.path().join(name);
        save_dataset(&path, &utts).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), utts, "{name}");
    }
}

#[test]
fn restaurant_fixtures_share_a_slot_inventory() {
    let train = load_dataset(fixture("restaurants_train.jsonl")).unwrap();
    let test = load_dataset(fixture("restaurants_test.jsonl")).unwrap();
    assert_eq!((train.len(), test.len()), (200, 100));
    assert_eq!(slot_inventory(&train), slot_inventory(&test));
}

#[test]
fn missing_file_names_the_path() {
    let err = load_dataset(fixture("absent.jsonl"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("absent.jsonl"), "{err}");
}
