//! End-to-end runs: data preparation, training with artifacts, evaluation
//! from checkpoints and variant ablations.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::Variant;
use crate::config::{DataConfig, RunConfig};
use crate::data::augment::axis_normalize;
use crate::data::io::load_dataset;
use crate::data::window::window;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::report::{bar_chart_svg, confusion_csv, confusion_svg, map_curve_svg, map_table};
use crate::eval::{EvalConfig, EvalReport};
use crate::heads::DecodeConfig;
use crate::training::{config_fingerprint, evaluate_model, Checkpoint, EpochLog, TrainConfig, Trainer};

fn emit(event: serde_json::Value) {
    log::info!(target: "cetal", "{event}");
}

/// Normalisation and windowing as requested by the data section.
pub fn prepare_dataset(ds: &Dataset, cfg: &DataConfig) -> Result<Dataset> {
    let mut sequences = Vec::with_capacity(ds.sequences.len());
    for s in &ds.sequences {
        let s = if cfg.normalize { axis_normalize(s)? } else { s.clone() };
        match cfg.clip_len_s {
            Some(cl) => sequences.extend(window(&s, cl, cfg.overlap)?),
            None => sequences.push(s),
        }
    }
    Ok(Dataset { sequences, num_classes: ds.num_classes, labels: ds.labels.clone() })
}

/// Raw train and validation sets from the configured manifests.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train_path = cfg
        .data
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::Config("data.train_manifest is required".into()))?;
    let full = load_dataset(Path::new(train_path))?;
    let (train, val) = match &cfg.data.val_manifest {
        Some(v) => (full, load_dataset(Path::new(v))?),
        None => full.split_every(cfg.data.val_every),
    };
    Ok((train, val))
}

fn check_compatible(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model.num_classes is {}",
            ds.num_classes, cfg.model.num_classes
        )));
    }
    if let Some(c) = ds.channels() {
        if c != cfg.model.input_channels {
            return Err(Error::Config(format!("dataset has {c} channels, model.input_channels is {}", cfg.model.input_channels)));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `eval_report.json`, `confusion.csv` and optionally the SVG charts.
pub fn write_report(dir: &Path, report: &EvalReport, labels: &[String], svg: bool) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("eval_report.json"), serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("confusion.csv"), confusion_csv(&report.confusion, labels))?;
    if svg {
        write_file(&dir.join("confusion.svg"), confusion_svg(&report.confusion, labels))?;
        write_file(&dir.join("map_curve.svg"), map_curve_svg(&[("model".to_string(), report)]))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_avg_map: Option<f64>,
    /// Final model on the validation split.
    pub report: Option<EvalReport>,
    pub final_loss: f64,
    pub elapsed_s: f64,
}

/// Trains on the configured data, writing artifacts into `output.dir`.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let (train, val) = load_splits(cfg)?;
    train_on(cfg, &prepare_dataset(&train, &cfg.data)?, &prepare_dataset(&val, &cfg.data)?, resume)
}

/// Trains on already prepared splits. Artifacts: `config.json`, `metrics.jsonl`
/// (header line, then one line per epoch), `best.ckpt`, `last.ckpt` and the
/// validation report of the final model.
pub fn train_on(cfg: &RunConfig, train: &Dataset, val: &Dataset, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    check_compatible(cfg, train)?;
    let out = PathBuf::from(&cfg.output.dir);
    create_dir(&out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let fp = config_fingerprint(&cfg.model);
            if ck.fingerprint != fp {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config (fingerprint {} vs {fp})",
                    p.display(),
                    ck.fingerprint
                )));
            }
            Trainer::<f32>::resume(&ck, cfg.training.clone())?
        }
        None => Trainer::<f32>::new(cfg.model.clone(), cfg.training.clone())?,
    };
    let first_epoch = trainer.next_epoch;
    if first_epoch >= cfg.training.epochs {
        return Err(Error::Config(format!(
            "checkpoint already reached epoch {}, training.epochs is {}",
            first_epoch, cfg.training.epochs
        )));
    }
    write_file(&out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let header = json!({
        "type": "header",
        "fingerprint": config_fingerprint(&cfg.model),
        "parameters": trainer.model.num_parameters(),
        "train_sequences": train.sequences.len(),
        "val_sequences": val.sequences.len(),
        "resumed_at_epoch": resume.map(|_| first_epoch),
        "config": cfg,
    });
    writeln!(metrics, "{header}").map_err(|e| Error::io(&metrics_path, e))?;
    emit(json!({"event": "train_start", "out_dir": out, "first_epoch": first_epoch, "parameters": trainer.model.num_parameters()}));

    let best_path = out.join("best.ckpt");
    let mut best: Option<(f64, usize)> = match resume {
        Some(_) if best_path.exists() => {
            let ck = Checkpoint::load(&best_path)?;
            ck.meta["val_avg_map"].as_f64().map(|m| (m, ck.epoch))
        }
        _ => None,
    };
    let mut observe = |log: &EpochLog, t: &Trainer<f32>| -> Result<()> {
        let mut line = serde_json::to_value(log)?;
        line["type"] = json!("epoch");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        emit(json!({"event": "epoch", "epoch": log.epoch, "loss": log.loss, "lr": log.lr, "val_avg_map": log.val_avg_map}));
        if let Some(m) = log.val_avg_map {
            if best.map_or(true, |(b, _)| m > b) {
                best = Some((m, log.epoch));
                t.checkpoint(log.epoch, Some(m)).save(&best_path)?;
            }
        }
        Ok(())
    };
    let outcome = trainer.fit(train, Some(val), &cfg.decode, &cfg.eval, &mut observe)?;
    outcome.last.save(&out.join("last.ckpt"))?;
    let report = if val.sequences.is_empty() {
        None
    } else {
        let r = evaluate_model(&trainer.model, val, &cfg.decode, &cfg.eval)?;
        write_report(&out, &r, &val.labels, cfg.output.svg)?;
        Some(r)
    };
    let last = outcome.history.last();
    let summary = TrainSummary {
        out_dir: out,
        first_epoch,
        last_epoch: trainer.next_epoch - 1,
        best_epoch: best.map(|b| b.1),
        best_val_avg_map: best.map(|b| b.0),
        report,
        final_loss: last.map_or(f64::NAN, |h| h.loss),
        elapsed_s: last.map_or(0.0, |h| h.elapsed_s),
    };
    emit(json!({"event": "train_done", "last_epoch": summary.last_epoch, "best_val_avg_map": summary.best_val_avg_map,
        "final_avg_map": summary.report.as_ref().map(|r| r.avg_map)}));
    Ok(summary)
}

/// Evaluates a checkpoint on a manifest. When `expect` is given its model
/// config must match the checkpoint's fingerprint.
pub fn eval_run(
    checkpoint: &Path,
    manifest: &Path,
    expect: Option<&RunConfig>,
    decode: &DecodeConfig,
    eval_cfg: &EvalConfig,
    data_cfg: &DataConfig,
    out_dir: Option<&Path>,
    svg: bool,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(cfg) = expect {
        let fp = config_fingerprint(&cfg.model);
        if fp != ck.fingerprint {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match the supplied model config ({fp})",
                ck.fingerprint
            )));
        }
    }
    let model = ck.restore_model::<f32>()?;
    let ds = prepare_dataset(&load_dataset(manifest)?, data_cfg)?;
    if ds.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint model predicts {}",
            ds.num_classes, model.config.num_classes
        )));
    }
    let report = evaluate_model(&model, &ds, decode, eval_cfg)?;
    if let Some(dir) = out_dir {
        write_report(dir, &report, &ds.labels, svg)?;
    }
    emit(json!({"event": "eval_done", "avg_map": report.avg_map, "map_per_threshold": report.map_per_threshold}));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub clip_len_s: Option<f64>,
    pub seeds: Vec<u64>,
    pub avg_maps: Vec<f64>,
    pub mean_avg_map: f64,
    pub std_avg_map: f64,
    /// Mean mAP per threshold across seeds.
    pub map_per_threshold: Vec<f64>,
    /// `mean_avg_map` minus the baseline's at the same clip length.
    pub delta_vs_baseline: Option<f64>,
}

/// Trains every variant × clip length × seed on shared data.
pub fn ablate(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    clip_lengths: &[Option<f64>],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let base_dir = PathBuf::from(&cfg.output.dir);
    let mut rows = Vec::new();
    for &cl in clip_lengths {
        let data_cfg = DataConfig { clip_len_s: cl, ..cfg.data.clone() };
        let (tr, va) = (prepare_dataset(train, &data_cfg)?, prepare_dataset(val, &data_cfg)?);
        for &variant in variants {
            let mut maps = Vec::new();
            let mut per_thr = vec![0.0; cfg.eval.tiou_thresholds.len()];
            for &seed in seeds {
                let cl_tag = cl.map_or("full".to_string(), |c| format!("{c}"));
                let mut run = cfg.clone();
                run.model.variant = variant;
                run.training = TrainConfig { seed, ..cfg.training.clone() };
                run.data = data_cfg.clone();
                run.output.dir = base_dir.join(format!("{}_cl{cl_tag}_s{seed}", variant.name())).display().to_string();
                let summary = train_on(&run, &tr, &va, None)?;
                let report = summary.report.ok_or_else(|| Error::data("ablation", "empty validation split"))?;
                maps.push(report.avg_map);
                per_thr.iter_mut().zip(&report.map_per_threshold).for_each(|(a, m)| *a += m / seeds.len() as f64);
            }
            let mean = maps.iter().sum::<f64>() / maps.len() as f64;
            let std = (maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / maps.len() as f64).sqrt();
            rows.push(AblationRow {
                variant,
                clip_len_s: cl,
                seeds: seeds.to_vec(),
                avg_maps: maps,
                mean_avg_map: mean,
                std_avg_map: std,
                map_per_threshold: per_thr,
                delta_vs_baseline: None,
            });
        }
    }
    let baselines: Vec<(Option<f64>, f64)> =
        rows.iter().filter(|r| r.variant == Variant::Baseline).map(|r| (r.clip_len_s, r.mean_avg_map)).collect();
    for r in &mut rows {
        r.delta_vs_baseline = baselines.iter().find(|(cl, _)| *cl == r.clip_len_s).map(|(_, b)| r.mean_avg_map - b);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,clip_len_s,seeds,mean_avg_map,std_avg_map,delta_vs_baseline");
    let n_thr = rows.first().map_or(0, |r| r.map_per_threshold.len());
    for i in 0..n_thr {
        s.push_str(&format!(",map_t{i}"));
    }
    s.push('\n');
    for r in rows {
        let cl = r.clip_len_s.map_or("full".to_string(), |c| format!("{c}"));
        let delta = r.delta_vs_baseline.map_or(String::new(), |d| format!("{d:.6}"));
        s.push_str(&format!("{},{cl},{},{:.6},{:.6},{delta}", r.variant, r.seeds.len(), r.mean_avg_map, r.std_avg_map));
        for m in &r.map_per_threshold {
            s.push_str(&format!(",{m:.6}"));
        }
        s.push('\n');
    }
    s
}

/// Markdown table: one row per variant, one column per clip length, mean
/// avg mAP (in %) with the delta against the baseline.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut cls: Vec<Option<f64>> = Vec::new();
    let mut variants: Vec<Variant> = Vec::new();
    for r in rows {
        if !cls.contains(&r.clip_len_s) {
            cls.push(r.clip_len_s);
        }
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let mut s = String::from("| variant |");
    for cl in &cls {
        s.push_str(&format!(" CL {} |", cl.map_or("full".to_string(), |c| format!("{c}"))));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(cls.len()));
    s.push('\n');
    for v in variants {
        s.push_str(&format!("| {v} |"));
        for cl in &cls {
            match rows.iter().find(|r| r.variant == v && r.clip_len_s == *cl) {
                Some(r) => {
                    let d = r.delta_vs_baseline.filter(|_| v != Variant::Baseline).map_or(String::new(), |d| format!(" ({:+.2})", 100.0 * d));
                    s.push_str(&format!(" {:.2}{d} |", 100.0 * r.mean_avg_map));
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow], svg: bool) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("ablation.csv"), ablation_csv(rows))?;
    write_file(&dir.join("ablation.md"), ablation_markdown(rows))?;
    let mut f = File::create(dir.join("ablation.json")).map_err(|e| Error::io(dir, e))?;
    f.write_all(serde_json::to_string_pretty(rows)?.as_bytes()).map_err(|e| Error::io(dir, e))?;
    if svg {
        let names: Vec<String> = rows
            .iter()
            .map(|r| match r.clip_len_s {
                Some(c) => format!("{} CL{c}", r.variant),
                None => r.variant.to_string(),
            })
            .collect();
        let means: Vec<f64> = rows.iter().map(|r| r.mean_avg_map).collect();
        let stds: Vec<f64> = rows.iter().map(|r| r.std_avg_map).collect();
        write_file(&dir.join("ablation.svg"), bar_chart_svg("average mAP by variant", &names, &means, Some(&stds)))?;
    }
    Ok(())
}

/// Markdown mAP table for a set of named reports.
pub fn summary_table(reports: &[(String, EvalReport)]) -> String {
    let refs: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    map_table(&refs)
}
