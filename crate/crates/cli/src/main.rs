//! `slotter` command line: training, evaluation, prediction, parameter
//! accounting, data protocol tools and the ablation lattice.
//!
//! Exit codes: 0 on success, 1 for data or configuration errors, 2 for
//! usage errors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use slotter::ablation::{format_report, run_ablation};
use slotter::checkpoint::AnyModel;
use slotter::data::convert::{convert_file, NativeFormat};
use slotter::data::synthetic::{flight_corpus, FlightCorpusSpec};
use slotter::data::{
    ensure_unseen, fraction_split, load_dataset, save_dataset, substitute_entities,
    DatasetManifest, Utterance,
};
use slotter::eval::{format_table, EvalReport, RunManifest};
use slotter::model::{block_reduction, count_parameters, ModelConfig};
use slotter::train::train_any;
use slotter::{Error, Result};

#[derive(Parser)]
#[command(
    name = "slotter",
    version,
    about = "Compact slot labelling with a char encoder, attention and a CRF"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a labelled file.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print predicted spans as JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// Dataset file; one JSON line of spans per utterance.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Parameter breakdown, full vs block-dense totals and their ratio.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Distinct characters, excluding padding and unknown.
        #[arg(long, default_value_t = 45)]
        chars: usize,
        /// Slot types; the tag set has 2 * entities + 1 tags.
        #[arg(long, default_value_t = 79)]
        entities: usize,
    },
    /// Deterministic 1/denominator training fraction.
    Subset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        denominator: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace every value of one slot with values from a list.
    Substitute {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        slot: String,
        /// One replacement per line.
        #[arg(long)]
        values: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training file the replacements must not occur in; defaults to --in.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train and score every attention variant.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also run every variant with full dense layers.
        #[arg(long)]
        both_densities: bool,
    },
    /// Convert a native corpus file to JSONL or CoNLL.
    Convert {
        #[arg(long, value_parser = parse_format)]
        format: NativeFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic flight corpus (train, dev, held-out-city test).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 600)]
        train_size: usize,
        #[arg(long, default_value_t = 60)]
        dev_size: usize,
        #[arg(long, default_value_t = 200)]
        test_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_format(s: &str) -> std::result::Result<NativeFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            ModelConfig::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(ModelConfig::default()),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn spans_json(utt: &Utterance, spans: &[slotter::data::SlotSpan]) -> serde_json::Value {
    json!({
        "text": utt.text,
        "spans": spans.iter().map(|s| json!({
            "start": s.start,
            "end": s.end,
            "slot": s.slot,
            "value": utt.span_text(s),
        })).collect::<Vec<_>>(),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            train,
            dev,
            out,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let train_set = load_dataset(&train)?;
            let dev_set = dev
                .as_deref()
                .map(load_dataset)
                .transpose()?
                .unwrap_or_default();
            fs::create_dir_all(&out)?;
            let mut log = fs::File::create(out.join("train_log.jsonl"))?;
            let mut io_err = None;
            let trained = train_any(&train_set, &dev_set, &cfg, &mut |r| {
                let line = serde_json::to_string(r).expect("record serialises");
                eprintln!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            trained.model.save(&out)?;
            let splits: Vec<(&str, &[Utterance])> = vec![("train", &train_set), ("dev", &dev_set)];
            let manifest = RunManifest::new(
                &cfg,
                Some(DatasetManifest::new(
                    file_stem(&train),
                    &splits,
                    1,
                    cfg.seed,
                )),
                Some(out.display().to_string()),
            );
            write_json(&out.join("run.json"), &manifest)?;
            println!(
                "trained {} epochs, best epoch {}, dev F1 {}, {} parameters -> {}",
                trained.log.len(),
                trained.best_epoch,
                trained
                    .best_dev_f1
                    .map_or("n/a".into(), |f| format!("{f:.4}")),
                trained.model.param_count(),
                out.display()
            );
        }
        Command::Evaluate { ckpt, test, report } => {
            let model = AnyModel::load(&ckpt)?;
            let test_set = load_dataset(&test)?;
            let scores = model.evaluate(&test_set, model.config().parallel)?;
            print!("{}", format_table(&scores));
            if let Some(path) = report {
                let cfg = model.config().clone();
                let dataset =
                    DatasetManifest::new(file_stem(&test), &[("test", &test_set)], 1, cfg.seed);
                let report = EvalReport {
                    manifest: RunManifest::new(
                        &cfg,
                        Some(dataset),
                        Some(ckpt.display().to_string()),
                    ),
                    scores,
                };
                write_json(&path, &report)?;
            }
        }
        Command::Predict { ckpt, text, input } => {
            let model = AnyModel::load(&ckpt)?;
            let utts = match (text, input) {
                (Some(t), _) => {
                    vec![
                        Utterance::from_char_spans(&t, &[], None).map_err(|e| Error::Data {
                            location: "--text".into(),
                            message: e,
                        })?,
                    ]
                }
                (None, Some(p)) => load_dataset(p)?,
                (None, None) => unreachable!("clap requires --text or --input"),
            };
            let preds = model.predict_all(&utts, model.config().parallel)?;
            for (u, p) in utts.iter().zip(&preds) {
                println!("{}", spans_json(u, p));
            }
        }
        Command::Params {
            config,
            chars,
            entities,
        } => {
            let cfg = load_config(config.as_deref())?;
            let vocab = chars + 2;
            let tags = 2 * entities + 1;
            let counts = count_parameters(&cfg, vocab, tags)?;
            let width = counts
                .entries
                .iter()
                .map(|(n, _)| n.len())
                .max()
                .unwrap_or(0);
            let blocking = if cfg.use_block_dense {
                "block-dense"
            } else {
                "full-dense"
            };
            println!("{blocking} breakdown ({vocab} char ids, {tags} tags):");
            for (name, n) in &counts.entries {
                println!("  {name:<width$}  {n:>9}");
            }
            println!("  {:<width$}  {:>9}", "total", counts.total);
            let (full, blocked, factor) = block_reduction(&cfg, vocab, tags)?;
            println!("full dense:  {full}");
            println!("block dense: {blocked}");
            println!("reduction:   {factor:.2}x");
        }
        Command::Subset {
            input,
            denominator,
            seed,
            out,
        } => {
            let data = load_dataset(&input)?;
            let subset = fraction_split(&data, denominator, seed)?;
            save_dataset(&out, &subset)?;
            println!(
                "wrote {} of {} utterances to {}",
                subset.len(),
                data.len(),
                out.display()
            );
        }
        Command::Substitute {
            input,
            slot,
            values,
            seed,
            out,
            train,
        } => {
            let data = load_dataset(&input)?;
            let replacements: Vec<String> = fs::read_to_string(&values)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let reference = match &train {
                Some(p) => load_dataset(p)?,
                None => data.clone(),
            };
            ensure_unseen(&reference, &slot, &replacements)?;
            let replaced = substitute_entities(&data, &slot, &replacements, seed)?;
            save_dataset(&out, &replaced)?;
            println!("wrote {} utterances to {}", replaced.len(), out.display());
        }
        Command::Ablate {
            config,
            train,
            dev,
            test,
            report,
            both_densities,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (tr, dv, te) = (
                load_dataset(&train)?,
                load_dataset(&dev)?,
                load_dataset(&test)?,
            );
            let splits: Vec<(&str, &[Utterance])> =
                vec![("train", &tr), ("dev", &dv), ("test", &te)];
            let dataset = DatasetManifest::new(file_stem(&train), &splits, 1, cfg.seed);
            let result = run_ablation(
                &cfg,
                both_densities,
                &tr,
                &dv,
                &te,
                Some(dataset),
                &mut |c, r| {
                    eprintln!(
                        "{} {} epoch {} loss {:.4} dev {}",
                        c.variant,
                        if c.use_block_dense { "block" } else { "full" },
                        r.epoch,
                        r.train_loss,
                        r.dev_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
                    );
                },
            )?;
            print!("{}", format_report(&result));
            write_json(&report, &result)?;
        }
        Command::Convert { format, input, out } => {
            let conv = convert_file(format, &input)?;
            for s in &conv.skipped {
                eprintln!("skipped {s}");
            }
            save_dataset(&out, &conv.utterances)?;
            println!(
                "converted {} utterances ({} skipped) to {}",
                conv.utterances.len(),
                conv.skipped.len(),
                out.display()
            );
        }
        Command::Synth {
            out_dir,
            train_size,
            dev_size,
            test_size,
            seed,
        } => {
            let corpus = flight_corpus(FlightCorpusSpec {
                train_size,
                dev_size,
                test_size,
                seed,
            });
            fs::create_dir_all(&out_dir)?;
            for (name, split) in [
                ("train", &corpus.train),
                ("dev", &corpus.dev),
                ("test", &corpus.test),
            ] {
                save_dataset(out_dir.join(format!("flights_{name}.jsonl")), split)?;
            }
            println!(
                "wrote flights_{{train,dev,test}}.jsonl to {}",
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
