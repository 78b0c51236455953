//! The attention-variant lattice: each variant, optionally crossed with
//! full and block-diagonal dense layers, trained and scored on one split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::data::{DatasetManifest, Utterance};
use crate::error::Result;
use crate::eval::{RunManifest, SpanScores};
use crate::model::ModelConfig;
use crate::train::{train_any, EpochRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub use_block_dense: bool,
    pub config_hash: String,
    pub params: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub dev_f1: Option<f64>,
    pub test: SpanScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// The base configuration; each row overrides only the variant and
    /// the block-dense flag.
    pub manifest: RunManifest,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant, use_block_dense: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.use_block_dense == use_block_dense)
    }
}

/// Configurations of the lattice in report order.
pub fn lattice(base: &ModelConfig, both_densities: bool) -> Vec<ModelConfig> {
    let densities: &[bool] = if both_densities {
        &[false, true]
    } else {
        &[base.use_block_dense]
    };
    densities
        .iter()
        .flat_map(|&use_block_dense| {
            Variant::ALL.into_iter().map(move |variant| ModelConfig {
                variant,
                use_block_dense,
                ..base.clone()
            })
        })
        .collect()
}

/// Trains every lattice point on `train`, selects on `dev` and scores on
/// `test`. `on_epoch` sees each record tagged with its configuration.
pub fn run_ablation(
    base: &ModelConfig,
    both_densities: bool,
    train: &[Utterance],
    dev: &[Utterance],
    test: &[Utterance],
    dataset: Option<DatasetManifest>,
    on_epoch: &mut dyn FnMut(&ModelConfig, &EpochRecord),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for config in lattice(base, both_densities) {
        let trained = train_any(train, dev, &config, &mut |r| on_epoch(&config, r))?;
        rows.push(AblationRow {
            variant: config.variant,
            use_block_dense: config.use_block_dense,
            config_hash: config.hash(),
            params: trained.model.param_count(),
            epochs: trained.log.len(),
            best_epoch: trained.best_epoch,
            dev_f1: trained.best_dev_f1,
            test: trained.model.evaluate(test, config.parallel)?,
        });
    }
    Ok(AblationReport {
        manifest: RunManifest::new(base, dataset, None),
        rows,
    })
}

/// One line per dense setting with micro F1 per variant, in lattice order.
pub fn format_report(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "dense");
    for v in Variant::ALL {
        let _ = write!(out, "  {:>12}", v.name());
    }
    let _ = writeln!(out, "  {:>9}", "params");
    for dense in [false, true] {
        let cells: Vec<_> = Variant::ALL.iter().map(|&v| report.row(v, dense)).collect();
        if cells.iter().all(Option::is_none) {
            continue;
        }
        let _ = write!(out, "{:<8}", if dense { "block" } else { "full" });
        for c in &cells {
            match c {
                Some(r) => {
                    let _ = write!(out, "  {:>12.3}", r.test.micro.f1);
                }
                None => {
                    let _ = write!(out, "  {:>12}", "-");
                }
            }
        }
        let params = report
            .row(Variant::AbstractRel, dense)
            .map_or(0, |r| r.params);
        let _ = writeln!(out, "  {params:>9}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlotSpan;
    use crate::tensor::DType;

    #[test]
    fn lattice_covers_every_variant() {
        let base = ModelConfig::default();
        let one = lattice(&base, false);
        assert_eq!(one.len(), 4);
        assert!(one.iter().all(|c| c.use_block_dense));
        let both = lattice(&base, true);
        assert_eq!(both.len(), 8);
        assert_eq!(both.iter().filter(|c| !c.use_block_dense).count(), 4);
        for v in Variant::ALL {
            assert!(both.iter().any(|c| c.variant == v));
        }
    }

    #[test]
    fn tiny_run_produces_a_row_per_point() {
        let base = ModelConfig {
            char_embed_dim: 4,
            lstm_units: 8,
            d_model: 8,
            num_heads: 2,
            head_size: 4,
            num_blocks: 2,
            block_min_dim: 8,
            max_relative_distance: 2,
            max_epochs: 1,
            dtype: DType::F64,
            ..ModelConfig::default()
        };
        let data = vec![
            Utterance::from_tokens(&["at", "noon"], vec![SlotSpan::new(1, 1, "time")], None)
                .unwrap(),
            Utterance::from_tokens(
                &["at", "six", "pm"],
                vec![SlotSpan::new(1, 2, "time")],
                None,
            )
            .unwrap(),
        ];
        let report = run_ablation(&base, true, &data, &data, &data, None, &mut |_, _| {}).unwrap();
        assert_eq!(report.rows.len(), 8);
        let none = report.row(Variant::None, false).unwrap();
        let full = report.row(Variant::AbstractRel, false).unwrap();
        assert!(none.params < full.params);
        let table = format_report(&report);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("abstract_rel"));
    }
}
