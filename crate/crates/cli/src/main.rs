use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cetal::config::RunConfig;
use cetal::data::augment::{augment_dataset, AugmentSpec, Transform};
use cetal::data::io::{load_dataset, save_dataset};
use cetal::data::synth::{synth_dataset, SynthSpec};
use cetal::experiment::{ablate, eval_run, load_splits, train_run, ablation_markdown, write_ablation};
use cetal::{Error, Variant};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cetal", version, about = "Temporal action localization on multichannel sensor features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel-signature dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 12)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        sequences: usize,
        /// Samples per sequence.
        #[arg(long, default_value_t = 96)]
        length: usize,
        #[arg(long, default_value_t = 25.0)]
        rate: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Expand a dataset with axis permutations and signal transforms.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_permutations: bool,
        #[arg(long)]
        normalize: bool,
        /// JSON list such as '[{"op":"invert"},{"op":"noise","std":0.1}]'.
        #[arg(long)]
        transforms: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model, writing checkpoints, metrics and a validation report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. training.lr=1e-3. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Run config; its model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated tIoU thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several variants on the same data and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "baseline,afse,afswish,afsesswish,ce_interleaved")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Comma-separated clip lengths in seconds; "full" trains on whole sequences.
        #[arg(long, value_delimiter = ',', default_value = "full")]
        clip_lengths: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let text = record.args().to_string();
        let msg = serde_json::from_str::<serde_json::Value>(&text).unwrap_or(json!(text));
        let line = json!({"level": record.level().as_str(), "target": record.target(), "msg": msg});
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(log::LevelFilter::Info));
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", json!({"event": "error", "kind": format!("{e:?}").split([' ', '(', '{']).next(), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn summary(ds: &cetal::data::Dataset) -> serde_json::Value {
    let segments: usize = ds.sequences.iter().map(|s| s.segments.len()).sum();
    let samples: usize = ds.sequences.iter().map(|s| s.len()).sum();
    json!({"sequences": ds.sequences.len(), "segments": segments, "samples": samples, "classes": ds.num_classes})
}

fn run(cmd: Command) -> cetal::Result<()> {
    match cmd {
        Command::Synth { out, classes, channels, sequences, length, rate, noise, seed } => {
            let spec = SynthSpec {
                num_classes: classes,
                channels,
                num_sequences: sequences,
                length,
                rate_hz: rate,
                noise_std: noise,
                seed,
                ..SynthSpec::default()
            };
            let ds = synth_dataset(&spec)?;
            let manifest = save_dataset(&out, &ds)?;
            println!("{}", json!({"manifest": manifest, "summary": summary(&ds)}));
        }
        Command::Augment { manifest, out, no_permutations, normalize, transforms, seed } => {
            let transforms: Vec<Transform> = match transforms {
                Some(t) => serde_json::from_str(&t).map_err(|e| Error::Config(format!("--transforms: {e}")))?,
                None => Vec::new(),
            };
            let spec = AugmentSpec { permutations: !no_permutations, axis_normalize: normalize, transforms, seed };
            let ds = augment_dataset(&load_dataset(&manifest)?, &spec)?;
            let manifest = save_dataset(&out, &ds)?;
            println!("{}", json!({"manifest": manifest, "summary": summary(&ds)}));
        }
        Command::Train { config, overrides, resume } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let s = train_run(&cfg, resume.as_deref())?;
            println!(
                "{}",
                json!({"out_dir": s.out_dir, "epochs": [s.first_epoch, s.last_epoch], "final_loss": s.final_loss,
                    "best_val_avg_map": s.best_val_avg_map, "final_avg_map": s.report.as_ref().map(|r| r.avg_map)})
            );
        }
        Command::Eval { checkpoint, manifest, config, overrides, thresholds, out } => {
            let expect = match (&config, overrides.is_empty()) {
                (None, true) => None,
                _ => Some(RunConfig::load(config.as_deref(), &overrides)?),
            };
            let base = expect.clone().unwrap_or_default();
            let mut eval_cfg = base.eval.clone();
            if let Some(t) = thresholds {
                eval_cfg.tiou_thresholds = t;
            }
            if eval_cfg.tiou_thresholds.is_empty() || eval_cfg.tiou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Config(format!("thresholds must lie in [0, 1], got {:?}", eval_cfg.tiou_thresholds)));
            }
            let report = eval_run(&checkpoint, &manifest, expect.as_ref(), &base.decode, &eval_cfg, &base.data, Some(&out), base.output.svg)?;
            println!("{}", json!({"avg_map": report.avg_map, "thresholds": report.thresholds, "map_per_threshold": report.map_per_threshold}));
        }
        Command::Ablate { config, mut overrides, variants, seeds, clip_lengths, out } => {
            let variants = variants.iter().map(|v| Variant::parse(v.trim())).collect::<cetal::Result<Vec<_>>>()?;
            let clips = clip_lengths
                .iter()
                .map(|c| match c.trim() {
                    "full" => Ok(None),
                    s => s.parse::<f64>().map(Some).map_err(|_| Error::Config(format!("bad clip length '{s}'"))),
                })
                .collect::<cetal::Result<Vec<_>>>()?;
            overrides.push(format!("output.dir={}", out.join("runs").display()));
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let (train, val) = load_splits(&cfg)?;
            let rows = ablate(&cfg, &train, &val, &variants, &seeds, &clips)?;
            write_ablation(Path::new(&out), &rows, cfg.output.svg)?;
            print!("{}", ablation_markdown(&rows));
        }
    }
    Ok(())
}
