//! The optimisation loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{detection_loss, LossConfig};
use super::optim::{clip_grad_norm, lr_schedule, AdamW};
use super::targets::{assign_targets, BatchTargets, LevelGeometry, Targets};
use crate::backbone::ModelConfig;
use crate::data::{AnnotatedSequence, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::heads::DecodeConfig;
use crate::model::Detector;
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::segment::Segment;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_grad_norm: Option<f64>,
    /// Validation cadence in epochs; the final epoch is always evaluated.
    pub eval_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 300,
            warmup_epochs: 5,
            batch_size: 4,
            seed: 0,
            clip_grad_norm: Some(1.0),
            eval_every: 10,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("weight_decay must be non-negative".to_string());
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            problems.push(format!("need warmup_epochs ({}) < epochs ({})", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            problems.push("clip_grad_norm must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_avg_map: Option<f64>,
    pub elapsed_s: f64,
}

/// A sequence converted to the model's scalar type with its targets.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    pub features: Tensor<T>,
    pub targets: Targets<T>,
}

pub fn prepare<T: Scalar>(seqs: &[AnnotatedSequence], cfg: &ModelConfig) -> Result<Vec<Sample<T>>> {
    seqs.iter()
        .map(|s| {
            if s.channels() != cfg.input_channels {
                return Err(Error::data(
                    format!("sequence '{}'", s.id),
                    format!("{} channels, model expects {}", s.channels(), cfg.input_channels),
                ));
            }
            let geom = LevelGeometry::new(cfg, s.len(), s.rate_hz);
            let targets = assign_targets(&s.segments, &geom)
                .map_err(|e| Error::data(format!("sequence '{}'", s.id), e.to_string()))?;
            Ok(Sample { id: s.id.clone(), features: s.features.cast(), targets })
        })
        .collect()
}

/// Minibatches of equal-length samples for one epoch.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        buckets.entry(lengths[i]).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = buckets.values().flat_map(|b| b.chunks(batch_size).map(<[usize]>::to_vec)).collect();
    batches.shuffle(&mut rng);
    batches
}

#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Detector<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    /// First epoch the next call to [`Trainer::fit`] runs.
    pub next_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    /// Highest validation mAP and the checkpoint that reached it.
    pub best: Option<(f64, Checkpoint)>,
    pub last: Checkpoint,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Detector::new(model_cfg, config.seed)?;
        let optimizer = AdamW::new(&model.params);
        Ok(Self { model, optimizer, config, next_epoch: 0 })
    }

    /// Continues from a checkpoint written after epoch `ck.epoch`.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ck.restore_model()?;
        let optimizer = ck.restore_optimizer(&model)?.unwrap_or_else(|| AdamW::new(&model.params));
        Ok(Self { model, optimizer, config, next_epoch: ck.epoch + 1 })
    }

    /// One optimisation step; returns (loss, cls, reg, grad norm).
    pub fn step(&mut self, batch: &[&Sample<T>], lr: f64) -> Result<(f64, f64, f64, f64)> {
        let (c, t) = (batch[0].features.dim(0), batch[0].features.dim(1));
        let mut data = Vec::with_capacity(batch.len() * c * t);
        for s in batch {
            data.extend_from_slice(s.features.data());
        }
        let x = Tensor::new(&[batch.len(), c, t], data)?;
        let targets = BatchTargets::stack(&batch.iter().map(|s| s.targets.clone()).collect::<Vec<_>>())?;
        let mut grads = {
            let mut g = Graph::new(&self.model.params);
            let xv = g.constant(x);
            let (_, dense) = self.model.forward(&mut g, xv)?;
            let loss = detection_loss(&mut g, &dense, &targets, &self.config.loss)?;
            let value = g.value(loss.total).item().f64();
            if !value.is_finite() {
                return Err(Error::Numeric(nan_diagnostic(&g, &dense, &self.model, batch, value)));
            }
            g.backward(loss.total)?;
            let grads = g.param_grads();
            (grads, value, loss.classification, loss.regression)
        };
        if let Some((i, _)) = grads.0.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
            if let Some(e) = self.model.params.entries().iter().find(|e| !e.value.all_finite()) {
                return Err(Error::Numeric(format!("first non-finite tensor: parameter '{}'", e.name)));
            }
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{}'",
                self.model.params.entries()[i].name
            )));
        }
        let norm = match self.config.clip_grad_norm {
            Some(max) => clip_grad_norm(&mut grads.0, max),
            None => clip_grad_norm(&mut grads.0, f64::INFINITY),
        };
        self.optimizer.update(&mut self.model.params, &grads.0, lr, self.config.weight_decay)?;
        Ok((grads.1, grads.2, grads.3, norm))
    }

    /// Trains up to `config.epochs`, calling `observe` after every epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        decode: &DecodeConfig,
        eval_cfg: &EvalConfig,
        observe: &mut dyn FnMut(&EpochLog, &Trainer<T>) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if train.sequences.is_empty() {
            return Err(Error::data("training set", "no sequences"));
        }
        let samples = prepare::<T>(&train.sequences, &self.model.config)?;
        let lengths: Vec<usize> = samples.iter().map(|s| s.features.dim(1)).collect();
        let mut history = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        let clock = Instant::now();
        let cfg = self.config.clone();
        for epoch in self.next_epoch..cfg.epochs {
            let lr = lr_schedule(epoch, cfg.lr, cfg.warmup_epochs, cfg.epochs);
            let (mut sum, mut cls, mut reg, mut gn, mut n) = (0.0, 0.0, 0.0, 0.0f64, 0usize);
            for batch in epoch_batches(&lengths, cfg.batch_size, cfg.seed, epoch) {
                let items: Vec<&Sample<T>> = batch.iter().map(|&i| &samples[i]).collect();
                let (l, c, r, g) = self
                    .step(&items, lr)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                        other => other,
                    })?;
                sum += l;
                cls += c;
                reg += r;
                gn = gn.max(g);
                n += 1;
            }
            self.next_epoch = epoch + 1;
            let last_epoch = epoch + 1 == cfg.epochs;
            let val_avg_map = match val {
                Some(v) if !v.sequences.is_empty() && (last_epoch || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) => {
                    Some(evaluate_model(&self.model, v, decode, eval_cfg)?.avg_map)
                }
                _ => None,
            };
            let log = EpochLog {
                epoch,
                lr,
                loss: sum / n as f64,
                cls_loss: cls / n as f64,
                reg_loss: reg / n as f64,
                grad_norm: gn,
                val_avg_map,
                elapsed_s: clock.elapsed().as_secs_f64(),
            };
            if let Some(m) = val_avg_map {
                if best.as_ref().map_or(true, |(b, _)| m > *b) {
                    best = Some((m, self.checkpoint(epoch, Some(m))));
                }
            }
            observe(&log, self)?;
            history.push(log);
        }
        let last = self.checkpoint(self.next_epoch.saturating_sub(1), history.last().and_then(|h| h.val_avg_map));
        Ok(TrainOutcome { history, best, last })
    }

    pub fn checkpoint(&self, epoch: usize, val_avg_map: Option<f64>) -> Checkpoint {
        let meta = serde_json::json!({ "train": self.config, "val_avg_map": val_avg_map });
        Checkpoint::capture(&self.model, Some(&self.optimizer), epoch, meta)
    }
}

fn nan_diagnostic<T: Scalar>(
    g: &Graph<'_, T>,
    dense: &crate::heads::DenseOutputs,
    model: &Detector<T>,
    batch: &[&Sample<T>],
    value: f64,
) -> String {
    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = batch.iter().find(|s| !s.features.all_finite()) {
        return format!("loss {value}; first non-finite tensor: input features of '{}'", s.id);
    }
    if let Some(e) = model.params.entries().iter().find(|e| !e.value.all_finite()) {
        return format!("loss {value}; first non-finite tensor: parameter '{}'", e.name);
    }
    for (l, (&c, &o)) in dense.class_logits.iter().zip(&dense.offsets).enumerate() {
        if !g.value(c).all_finite() {
            return format!("loss {value}; first non-finite tensor: class logits at level {l} (batch {ids:?})");
        }
        if !g.value(o).all_finite() {
            return format!("loss {value}; first non-finite tensor: offsets at level {l} (batch {ids:?})");
        }
    }
    format!("loss {value} with finite head outputs (batch {ids:?})")
}

/// Post-processed detections for every sequence of a dataset.
pub fn predict_dataset<T: Scalar>(model: &Detector<T>, ds: &Dataset, decode: &DecodeConfig) -> Result<Vec<Vec<Segment>>> {
    ds.sequences.iter().map(|s| model.predict(&s.features.cast(), s.rate_hz, decode)).collect()
}

pub fn evaluate_model<T: Scalar>(
    model: &Detector<T>,
    ds: &Dataset,
    decode: &DecodeConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    let preds = predict_dataset(model, ds, decode)?;
    let gts: Vec<Vec<Segment>> = ds.sequences.iter().map(|s| s.segments.clone()).collect();
    evaluate(&preds, &gts, ds.num_classes, eval_cfg)
}
