use cetal::backbone::{EnhancementConfig, ModelConfig, Variant};
use cetal::data::synth::{synth_dataset, SynthSpec};
use cetal::data::Dataset;
use cetal::eval::EvalConfig;
use cetal::heads::{DecodeConfig, DenseOutputs};
use cetal::nn::ParamStore;
use cetal::tensor::{gradcheck, Tape, Tensor};
use cetal::training::{
    assign_targets, detection_loss, evaluate_model, lr_schedule, prepare, AdamW, BatchTargets, Checkpoint, LevelGeometry,
    LossConfig, Sample, TrainConfig, Trainer,
};
use cetal::{Detector64, Error, Segment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant, blocks: usize, d: usize, channels: usize, classes: usize) -> ModelConfig {
    let mut strides = vec![2; blocks];
    strides[0] = 1;
    ModelConfig {
        input_channels: channels,
        embed_dim: d,
        num_blocks: blocks,
        block_strides: strides,
        num_heads: 2,
        mlp_ratio: 2.0,
        variant,
        num_classes: classes,
        enhancement: EnhancementConfig { reduction: 2, ..Default::default() },
        ..ModelConfig::default()
    }
}

fn toy_data(n: usize) -> Dataset {
    synth_dataset(&SynthSpec {
        num_classes: 2,
        channels: 6,
        num_sequences: n,
        length: 48,
        segments_per_sequence: [1, 1],
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 1e-3, epochs, warmup_epochs: 1, batch_size: 2, eval_every: 0, ..TrainConfig::default() }
}

fn geometry(lengths: Vec<usize>, strides: Vec<usize>, ranges: Vec<[f64; 2]>) -> LevelGeometry {
    LevelGeometry { lengths, strides, ranges, rate_hz: 10.0, num_classes: 3 }
}

/// Per-timestep containment check written without the library's loop order.
fn brute_targets(gt: &[Segment], g: &LevelGeometry) -> Vec<Vec<Option<(usize, f64, f64)>>> {
    (0..g.lengths.len())
        .map(|l| {
            (0..g.lengths[l])
                .map(|t| {
                    let c = (t * g.strides[l]) as f64;
                    gt.iter()
                        .map(|s| (s, s.start * g.rate_hz, s.end * g.rate_hz))
                        .filter(|&(_, a, b)| a <= c && c <= b)
                        .filter(|&(_, a, b)| {
                            let reach = (c - a).max(b - c);
                            g.ranges[l][0] <= reach && reach < g.ranges[l][1]
                        })
                        .min_by(|x, y| (x.2 - x.1).partial_cmp(&(y.2 - y.1)).unwrap())
                        .map(|(s, a, b)| (s.label, (c - a) / g.strides[l] as f64, (b - c) / g.strides[l] as f64))
                })
                .collect()
        })
        .collect()
}

fn assert_targets_match(gt: &[Segment], g: &LevelGeometry) {
    let got = assign_targets::<f64>(gt, g).unwrap();
    let want = brute_targets(gt, g);
    for l in 0..want.len() {
        let t = g.lengths[l];
        for (i, w) in want[l].iter().enumerate() {
            assert_eq!(got.positive[l][i], w.is_some(), "level {l} t {i}");
            let onehot: Vec<f64> = (0..g.num_classes).map(|k| got.classes[l].data()[k * t + i]).collect();
            match w {
                Some((label, left, right)) => {
                    assert_eq!(onehot.iter().sum::<f64>(), 1.0);
                    assert_eq!(onehot[*label], 1.0);
                    assert!((got.offsets[l].data()[i] - left).abs() < 1e-12);
                    assert!((got.offsets[l].data()[t + i] - right).abs() < 1e-12);
                }
                None => assert!(onehot.iter().all(|&v| v == 0.0)),
            }
        }
    }
}

#[test]
fn no_ground_truth_means_all_background() {
    let g = geometry(vec![16, 8], vec![1, 2], vec![[0.0, 4.0], [4.0, f64::INFINITY]]);
    let t = assign_targets::<f64>(&[], &g).unwrap();
    assert_eq!(t.num_positive(), 0);
    assert!(t.classes.iter().all(|c| c.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn full_span_segment_covers_level_zero() {
    let g = geometry(vec![10], vec![1], vec![[0.0, f64::INFINITY]]);
    let t = assign_targets::<f64>(&[Segment::new(0.0, 0.9, 2)], &g).unwrap();
    assert_eq!(t.positive[0], vec![true; 10]);
}

#[test]
fn two_segment_case_matches_containment_oracle() {
    let g = geometry(vec![32, 16, 8], vec![1, 2, 4], vec![[0.0, 4.0], [4.0, 8.0], [8.0, f64::INFINITY]]);
    // nested segments of different classes: the shorter one wins where both apply
    assert_targets_match(&[Segment::new(0.2, 2.6, 0), Segment::new(1.0, 1.6, 1)], &g);
    assert_targets_match(&[Segment::new(0.0, 0.5, 2), Segment::new(1.7, 3.1, 1)], &g);
    let t = assign_targets::<f64>(&[Segment::new(0.2, 2.6, 0), Segment::new(1.0, 1.6, 1)], &g).unwrap();
    assert!(t.num_positive() > 0);
    assert!(assign_targets::<f64>(&[Segment::new(0.0, 0.5, 3)], &g).is_err());
}

/// Focal + IoU terms written from their textbook definitions.
fn oracle_loss(logits: &[Tensor<f64>], offsets: &[Tensor<f64>], bt: &BatchTargets<f64>, cfg: &LossConfig) -> f64 {
    let (a, gm) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut cls = 0.0;
    let mut reg = 0.0;
    for l in 0..logits.len() {
        for (&z, &y) in logits[l].data().iter().zip(bt.classes[l].data()) {
            let p = 1.0 / (1.0 + (-z).exp());
            let ce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let pt = if y == 1.0 { p } else { 1.0 - p };
            let at = if y == 1.0 { a } else { 1.0 - a };
            cls += at * (1.0 - pt).powf(gm) * ce;
        }
        let (b, t) = (bt.weights[l].dim(0), bt.weights[l].dim(1));
        for bi in 0..b {
            for ti in 0..t {
                if bt.weights[l].data()[bi * t + ti] == 0.0 {
                    continue;
                }
                let at = |x: &Tensor<f64>, k: usize| x.data()[bi * 2 * t + k * t + ti];
                let (pl, pr, ql, qr) = (at(&offsets[l], 0), at(&offsets[l], 1), at(&bt.offsets[l], 0), at(&bt.offsets[l], 1));
                let inter = pl.min(ql) + pr.min(qr);
                let union = (pl + pr) + (ql + qr) - inter;
                reg += 1.0 - inter / union;
            }
        }
    }
    let n = bt.num_positive.max(1) as f64;
    cls / n + cfg.reg_weight * reg / n
}

fn random_batch(rng: &mut ChaCha8Rng) -> (LevelGeometry, BatchTargets<f64>) {
    let g = geometry(vec![24, 12, 6], vec![1, 2, 4], vec![[0.0, 4.0], [4.0, 8.0], [8.0, f64::INFINITY]]);
    let items: Vec<_> = (0..2)
        .map(|_| {
            let gt: Vec<Segment> = (0..rng.gen_range(0..3))
                .map(|_| {
                    let a = rng.gen_range(0.0..1.5);
                    Segment::new(a, a + rng.gen_range(0.2..0.9), rng.gen_range(0..3))
                })
                .collect();
            assign_targets::<f64>(&gt, &g).unwrap()
        })
        .collect();
    (g.clone(), BatchTargets::stack(&items).unwrap())
}

fn dense_on_tape(tape: &mut Tape<f64>, logits: &[Tensor<f64>], offsets: &[Tensor<f64>]) -> DenseOutputs {
    DenseOutputs {
        class_logits: logits.iter().map(|t| tape.leaf(t.clone(), true)).collect(),
        offsets: offsets.iter().map(|t| tape.leaf(t.clone(), true)).collect(),
    }
}

#[test]
fn loss_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let (g, bt) = random_batch(&mut rng);
        let rand_t = |shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let logits: Vec<_> = g.lengths.iter().map(|&t| rand_t(&[2, 3, t], -4.0, 4.0, &mut rng)).collect();
        let offsets: Vec<_> = g.lengths.iter().map(|&t| rand_t(&[2, 2, t], 0.05, 6.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let dense = dense_on_tape(&mut tape, &logits, &offsets);
        let lv = detection_loss(&mut tape, &dense, &bt, &cfg).unwrap();
        let got = tape.value(lv.total).item();
        let want = oracle_loss(&logits, &offsets, &bt, &cfg);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got >= 0.0 && got.is_finite());
    }
}

#[test]
fn saturated_correct_predictions_cost_almost_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (_, bt) = loop {
        let b = random_batch(&mut rng);
        if b.1.num_positive > 0 {
            break b;
        }
    };
    let logits: Vec<_> = bt.classes.iter().map(|c| c.map(|y| if y == 1.0 { 20.0 } else { -20.0 })).collect();
    let mut tape = Tape::new();
    let dense = dense_on_tape(&mut tape, &logits, &bt.offsets);
    let lv = detection_loss(&mut tape, &dense, &bt, &LossConfig::default()).unwrap();
    let total = tape.value(lv.total).item();
    assert!(total < 1e-4, "{total}");
    assert!(lv.regression.abs() < 1e-15, "{}", lv.regression);
}

#[test]
fn adamw_without_decay_is_adam() {
    let target = [1.5, -2.0, 0.25];
    let curv = [1.0, 3.0, 0.5];
    let grad_of = |th: &[f64]| -> Vec<f64> { (0..3).map(|i| 2.0 * curv[i] * (th[i] - target[i])).collect() };
    let mut store = ParamStore::<f64>::new();
    let id = store.add("theta", Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap(), true);
    let mut opt = AdamW::new(&store);
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let (mut th, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
    for t in 1..=60 {
        let g = grad_of(&th);
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            th[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let lib_g = grad_of(store.get(id).data());
        opt.update(&mut store, &[Some(Tensor::new(&[1, 3], lib_g).unwrap())], lr, 0.0).unwrap();
        for i in 0..3 {
            assert!((store.get(id).data()[i] - th[i]).abs() < 1e-12, "step {t}");
        }
    }
}

#[test]
fn decay_skips_vectors() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::new(&[1, 1], vec![1.0]).unwrap(), true);
    let b = store.add("b", Tensor::new(&[1], vec![1.0]).unwrap(), true);
    let mut opt = AdamW::new(&store);
    opt.update(&mut store, &[None, None], 0.1, 0.05).unwrap();
    assert!((store.get(w).data()[0] - 0.995).abs() < 1e-15);
    assert_eq!(store.get(b).data()[0], 1.0);
}

#[test]
fn schedule_examples() {
    assert!((lr_schedule(0, 1e-4, 5, 300) - 0.2e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(5, 1e-4, 5, 300), 1e-4);
    assert!(lr_schedule(299, 1e-4, 5, 300) < 1e-8);
}

fn samples(ds: &Dataset, cfg: &ModelConfig) -> Vec<Sample<f32>> {
    prepare::<f32>(&ds.sequences, cfg).unwrap()
}

#[test]
fn ten_steps_are_bitwise_reproducible() {
    let cfg = tiny(Variant::CeInterleaved, 2, 8, 6, 2);
    let ds = toy_data(4);
    let run = || {
        let mut tr = Trainer::<f32>::new(cfg.clone(), quick(10)).unwrap();
        let s = samples(&ds, &cfg);
        for k in 0..10 {
            let batch = [&s[k % 4], &s[(k + 1) % 4]];
            tr.step(&batch, 1e-3).unwrap();
        }
        tr.model.params.entries().iter().map(|e| e.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn total_loss_gradient_on_micro_model() {
    let cfg = ModelConfig { block_strides: vec![1], ..tiny(Variant::CeInterleaved, 1, 8, 3, 2) };
    let model = Detector64::new(cfg.clone(), 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::new(&[2, 3, 12], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let geom = LevelGeometry::new(&cfg, 12, 10.0);
    let items = [
        assign_targets::<f64>(&[Segment::new(0.1, 0.55, 1)], &geom).unwrap(),
        assign_targets::<f64>(&[Segment::new(0.3, 0.8, 0), Segment::new(0.85, 1.1, 1)], &geom).unwrap(),
    ];
    let bt = BatchTargets::stack(&items).unwrap();
    assert!(bt.num_positive > 0);
    let res = gradcheck::check_graph(&model.params, &[x], 1e-5, |g, v| {
        let (_, dense) = model.forward(g, v[0])?;
        Ok(detection_loss(g, &dense, &bt, &LossConfig::default())?.total)
    })
    .unwrap();
    assert!(res.max_rel_error() < 1e-4, "{:?}", res.rel_errors);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny(Variant::CeInterleaved, 2, 8, 6, 2);
    let ds = toy_data(4);
    let mut tr = Trainer::<f32>::new(cfg.clone(), quick(3)).unwrap();
    let s = samples(&ds, &cfg);
    tr.step(&[&s[0], &s[1]], 1e-3).unwrap();
    let ck = tr.checkpoint(0, None);
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(&bytes[..8], b"CETAL001");

    let model = back.restore_model::<f32>().unwrap();
    for (a, b) in model.params.entries().iter().zip(tr.model.params.entries()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let opt = back.restore_optimizer(&model).unwrap().unwrap();
    assert_eq!(opt, tr.optimizer);
    let (dc, ec) = (DecodeConfig::default(), EvalConfig::default());
    assert_eq!(evaluate_model(&model, &ds, &dc, &ec).unwrap(), evaluate_model(&tr.model, &ds, &dc, &ec).unwrap());

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::read_from(&mut trailing.as_slice()).is_err());
    let mut tampered = back.clone();
    tampered.model_config.embed_dim = 16;
    assert!(tampered.restore_model::<f32>().is_err());
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let cfg = tiny(Variant::CeInterleaved, 2, 8, 6, 2);
    let ds = toy_data(6);
    let mut nothing = |_: &cetal::training::EpochLog, _: &Trainer<f32>| Ok(());
    let (dc, ec) = (DecodeConfig::default(), EvalConfig::default());
    let mut full = Trainer::<f32>::new(cfg.clone(), quick(4)).unwrap();
    let out_full = full.fit(&ds, None, &dc, &ec, &mut nothing).unwrap();

    let mut first = Trainer::<f32>::new(cfg.clone(), TrainConfig { ..quick(4) }).unwrap();
    let mut stop_after_two = |log: &cetal::training::EpochLog, _: &Trainer<f32>| {
        if log.epoch == 1 {
            Err(Error::Config("stop".into()))
        } else {
            Ok(())
        }
    };
    assert!(first.fit(&ds, None, &dc, &ec, &mut stop_after_two).is_err());
    let ck = first.checkpoint(1, None);
    let mut resumed = Trainer::<f32>::resume(&ck, quick(4)).unwrap();
    assert_eq!(resumed.next_epoch, 2);
    let out = resumed.fit(&ds, None, &dc, &ec, &mut nothing).unwrap();
    assert_eq!(out.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![2, 3]);
    assert_eq!(out.history.last().unwrap().loss, out_full.history.last().unwrap().loss);
    for (a, b) in resumed.model.params.entries().iter().zip(full.model.params.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn single_sample_loss_decreases() {
    let cfg = tiny(Variant::CeInterleaved, 2, 16, 6, 2);
    let ds = toy_data(1);
    let s = samples(&ds, &cfg);
    let mut tr = Trainer::<f32>::new(cfg, quick(50)).unwrap();
    let losses: Vec<f64> = (0..10).map(|e| tr.step(&[&s[0]], lr_schedule(e, 1e-3, 1, 50)).unwrap().0).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn every_variant_trains() {
    let ds = toy_data(4);
    let (tr_ds, va) = ds.split_every(4);
    for v in [Variant::Baseline, Variant::Afse, Variant::Afswish, Variant::Afsesswish, Variant::CeInterleaved, Variant::CeBridged] {
        let cfg = tiny(v, 3, 8, 6, 2);
        let mut tr = Trainer::<f32>::new(cfg, TrainConfig { eval_every: 1, ..quick(2) }).unwrap();
        let out = tr
            .fit(&tr_ds, Some(&va), &DecodeConfig::default(), &EvalConfig::default(), &mut |_, _| Ok(()))
            .unwrap();
        assert_eq!(out.history.len(), 2, "{v}");
        assert!(out.history.iter().all(|h| h.loss.is_finite() && h.val_avg_map.is_some()));
    }
}

#[test]
fn nan_parameters_abort_with_their_name() {
    let cfg = tiny(Variant::CeInterleaved, 2, 8, 6, 2);
    let ds = toy_data(2);
    let s = samples(&ds, &cfg);
    let mut tr = Trainer::<f32>::new(cfg, quick(3)).unwrap();
    let name = tr.model.params.entries()[3].name.clone();
    tr.model.params.entry_mut(3).value.data_mut()[0] = f32::NAN;
    match tr.step(&[&s[0]], 1e-3) {
        Err(Error::Numeric(msg)) => assert!(msg.contains(&name), "{msg}"),
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig { warmup_epochs: 10, epochs: 10, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.lr, d.weight_decay, d.epochs, d.warmup_epochs), (1e-4, 0.05, 300, 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn targets_agree_with_containment(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(vec![40, 20, 10, 5], vec![1, 2, 4, 8], vec![[0.0, 4.0], [4.0, 8.0], [8.0, 16.0], [16.0, f64::INFINITY]]);
        let gt: Vec<Segment> = (0..rng.gen_range(0..4))
            .map(|_| {
                let a = rng.gen_range(0.0..3.5);
                Segment::new(a, (a + rng.gen_range(0.1..2.0)).min(4.0), rng.gen_range(0..3))
            })
            .collect();
        assert_targets_match(&gt, &g);
    }

    #[test]
    fn loss_is_finite_and_non_negative(seed in 0u64..10_000, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, bt) = random_batch(&mut rng);
        let logits: Vec<_> = g.lengths.iter().map(|&t| Tensor::new(&[2, 3, t], (0..6 * t).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()).collect();
        let offsets: Vec<_> = g.lengths.iter().map(|&t| Tensor::new(&[2, 2, t], (0..4 * t).map(|_| rng.gen_range(1e-3..scale)).collect()).unwrap()).collect();
        let mut tape = Tape::new();
        let dense = dense_on_tape(&mut tape, &logits, &offsets);
        let total = detection_loss(&mut tape, &dense, &bt, &LossConfig::default()).unwrap().total;
        let v = tape.value(total).item();
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}
