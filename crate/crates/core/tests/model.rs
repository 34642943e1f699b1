use cetal::backbone::{pyramid_lengths, EnhancementKind, ModelConfig, Variant};
use cetal::enhancement::{AceConfig, BetaMode};
use cetal::heads::{decode_heads, dense_to_segments, DenseTensors};
use cetal::nn::Graph;
use cetal::scalar::{sigmoid, softplus};
use cetal::segment::{nms, tiou, NmsMethod, Segment};
use cetal::tensor::{gradcheck, Tensor};
use cetal::{Detector, Detector64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant, blocks: usize, d: usize) -> ModelConfig {
    let mut strides = vec![2; blocks];
    strides[0] = 1;
    ModelConfig {
        input_channels: 3,
        embed_dim: d,
        num_blocks: blocks,
        block_strides: strides,
        num_heads: 2,
        mlp_ratio: 2.0,
        variant,
        num_classes: 2,
        enhancement: cetal::backbone::EnhancementConfig { reduction: 2, ..Default::default() },
        ..ModelConfig::default()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_params(model: &mut Detector64, prefix: &str) {
    for i in 0..model.params.len() {
        let e = model.params.entry_mut(i);
        if e.name.starts_with(prefix) {
            e.value.data_mut().fill(0.0);
        }
    }
}

#[test]
fn projection_zero_weights_and_length() {
    let mut m = Detector64::new(tiny(Variant::Baseline, 2, 4), 1).unwrap();
    for t in [1, 5, 224] {
        let mut g = Graph::inference(&m.params);
        let x = g.constant(random(&[2, 3, t], t as u64));
        let y = m.backbone.project(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, t]);
    }
    zero_params(&mut m, "proj.");
    let mut g = Graph::inference(&m.params);
    let x = g.constant(random(&[1, 3, 9], 2));
    let y = m.backbone.project(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(random(&[1, 5, 9], 2));
    assert!(m.backbone.project(&mut g, bad).is_err());
}

#[test]
fn residual_identity_block() {
    let mut m = Detector64::new(tiny(Variant::Baseline, 1, 4), 3).unwrap();
    let block = m.backbone.blocks[0].clone();
    block.zero_residual_branches(&mut m.params);
    let mut g = Graph::inference(&m.params);
    let xt = random(&[2, 4, 6], 4);
    let x = g.constant(xt.clone());
    let y = block.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn strided_block_uses_ceil_length() {
    let m = Detector64::new(tiny(Variant::Baseline, 2, 4), 3).unwrap();
    let mut g = Graph::inference(&m.params);
    let x = g.constant(random(&[1, 4, 7], 5));
    let y = m.backbone.blocks[1].forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4]);
}

#[test]
fn pyramid_levels_follow_schedule() {
    let cfg = ModelConfig { input_channels: 3, embed_dim: 4, num_heads: 1, mlp_ratio: 1.0, ..ModelConfig::default() };
    let m = Detector64::new(cfg.clone(), 0).unwrap();
    let mut g = Graph::inference(&m.params);
    let x = g.constant(random(&[1, 3, 224], 6));
    let (pyr, dense) = m.forward(&mut g, x).unwrap();
    let lens: Vec<usize> = pyr.levels.iter().map(|&v| g.shape(v)[2]).collect();
    assert_eq!(lens, vec![224, 112, 56, 28, 14, 7, 4]);
    assert_eq!(lens, pyramid_lengths(224, &cfg.block_strides));
    assert_eq!(pyr.level_strides, vec![1, 2, 4, 8, 16, 32, 64]);
    for (l, (&c, &r)) in dense.class_logits.iter().zip(&dense.offsets).enumerate() {
        assert_eq!(g.shape(c), &[1, cfg.num_classes, lens[l]]);
        assert_eq!(g.shape(r), &[1, 2, lens[l]]);
        assert!(g.value(r).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn module_counts_by_variant() {
    let base = ModelConfig { embed_dim: 8, num_heads: 2, ..ModelConfig::default() };
    let count = |v| {
        let cfg = ModelConfig { variant: v, ..base.clone() };
        let m = Detector64::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.backbone.module_count(), cfg.enhanced_levels().len());
        m.backbone.module_count()
    };
    assert_eq!(count(Variant::CeInterleaved), 7);
    assert_eq!(count(Variant::CeBridged), 4);
    assert_eq!(count(Variant::Afse), 7);
    assert_eq!(count(Variant::Baseline), 0);
    assert_eq!(count(Variant::Afswish), 0);
}

#[test]
fn closed_form_parameter_count_matches_instantiation() {
    for variant in Variant::ALL {
        for kind in [EnhancementKind::Ace, EnhancementKind::Mce] {
            for beta in [BetaMode::Fixed { beta: 1.0 }, BetaMode::Learnable { init: 1.0 }] {
                let mut cfg = tiny(variant, 3, 6);
                cfg.enhancement.kind = kind;
                cfg.enhancement.beta = beta;
                cfg.mlp_ratio = 1.5;
                let m = Detector64::new(cfg.clone(), 9).unwrap();
                assert_eq!(m.num_parameters(), cfg.parameter_count(), "{variant} {kind:?} {beta:?}");
            }
        }
    }
}

#[test]
fn enhancement_overhead_at_full_width() {
    let ce = ModelConfig { embed_dim: 512, variant: Variant::CeInterleaved, ..ModelConfig::default() };
    let base = ModelConfig { variant: Variant::Baseline, ..ce.clone() };
    let extra = ce.parameter_count() - base.parameter_count();
    // reported totals 28,635,386 and 26,563,610 differ by exactly seven modules
    assert_eq!(extra, 7 * AceConfig::new(512).parameter_count());
    assert_eq!(extra, 28_635_386 - 26_563_610);
    let overhead = extra as f64 / base.parameter_count() as f64;
    assert!(overhead < 0.10, "overhead {overhead}");
}

#[test]
fn zeroed_modules_halve_each_block_output() {
    let mut cfg = tiny(Variant::CeInterleaved, 3, 4);
    cfg.input_channels = 4;
    let mut m = Detector64::new(cfg, 11).unwrap();
    let backbone = m.backbone.clone();
    for e in backbone.enhancers.iter().flatten() {
        if let cetal::backbone::Enhancer::Ace(a) = e {
            a.zero_bottleneck(&mut m.params);
            a.set_identity_projection(&mut m.params);
        } else {
            panic!("expected ACE modules");
        }
    }
    let xt = random(&[1, 4, 16], 12);
    let mut g = Graph::inference(&m.params);
    let x = g.constant(xt.clone());
    let pyr = backbone.forward_pyramid(&mut g, x).unwrap();

    let mut r = Graph::inference(&m.params);
    let x = r.constant(xt);
    let mut h = backbone.project(&mut r, x).unwrap();
    for (l, block) in backbone.blocks.iter().enumerate() {
        let y = block.forward(&mut r, h).unwrap();
        h = r.scale(y, 0.5);
        assert_eq!(g.value(pyr.levels[l]), r.value(h), "level {l}");
    }
}

#[test]
fn baseline_identity_blocks_reproduce_projection() {
    let mut cfg = tiny(Variant::Baseline, 3, 4);
    cfg.block_strides = vec![1, 1, 1];
    let mut m = Detector64::new(cfg, 2).unwrap();
    for b in m.backbone.blocks.clone() {
        b.zero_residual_branches(&mut m.params);
    }
    let mut g = Graph::inference(&m.params);
    let x = g.constant(random(&[2, 3, 10], 3));
    let p = m.backbone.project(&mut g, x).unwrap();
    let pyr = m.backbone.forward_pyramid(&mut g, x).unwrap();
    assert_eq!(g.value(pyr.levels[0]), g.value(p));
}

fn pyramid_gradcheck(variant: Variant, kind: EnhancementKind) {
    let mut cfg = tiny(variant, 2, 4);
    cfg.enhancement.kind = kind;
    cfg.enhancement.beta = BetaMode::Learnable { init: 1.0 };
    let m = Detector64::new(cfg, 21).unwrap();
    let x = random(&[2, 3, 6], 22);
    let probes = [random(&[2, 4, 6], 23), random(&[2, 4, 3], 24)];
    let res = gradcheck::check_graph(&m.params, &[x], 1e-5, |g, v| {
        let pyr = m.backbone.forward_pyramid(g, v[0])?;
        let mut total = None;
        for (&lvl, p) in pyr.levels.iter().zip(&probes) {
            let p = g.constant(p.clone());
            let y = g.mul(lvl, p)?;
            let s = g.sum(y);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    assert!(res.max_rel_error() < 1e-4, "{variant}: {:?}", res.rel_errors);
}

#[test]
fn pyramid_gradients_interleaved_ace() {
    pyramid_gradcheck(Variant::CeInterleaved, EnhancementKind::Ace);
}

#[test]
fn pyramid_gradients_bridged_and_se() {
    pyramid_gradcheck(Variant::CeBridged, EnhancementKind::Ace);
    pyramid_gradcheck(Variant::Afsesswish, EnhancementKind::Ace);
    pyramid_gradcheck(Variant::CeInterleaved, EnhancementKind::Mce);
}

#[test]
fn heads_gradient_check() {
    let m = Detector64::new(tiny(Variant::Baseline, 2, 4), 31).unwrap();
    let levels = [random(&[1, 4, 5], 32), random(&[1, 4, 3], 33)];
    let probes = [random(&[1, 2, 5], 34), random(&[1, 2, 3], 35), random(&[1, 2, 5], 36), random(&[1, 2, 3], 37)];
    let res = gradcheck::check_graph(&m.params, &levels, 1e-5, |g, v| {
        let pyr = cetal::backbone::PyramidFeatures { levels: v.to_vec(), level_strides: vec![1, 2] };
        let d = decode_heads(g, &pyr, &m.heads)?;
        let mut total = g.constant(Tensor::scalar(0.0));
        for (&o, p) in d.class_logits.iter().chain(&d.offsets).zip(&probes) {
            let p = g.constant(p.clone());
            let y = g.mul(o, p)?;
            let s = g.sum(y);
            total = g.add(total, s)?;
        }
        Ok(total)
    })
    .unwrap();
    assert!(res.max_rel_error() < 1e-4, "{:?}", res.rel_errors);
}

#[test]
fn zero_weight_heads_emit_biases() {
    let mut m = Detector64::new(tiny(Variant::Baseline, 2, 4), 5).unwrap();
    for id in m.heads.conv_weights() {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
    let [cb, rb] = m.heads.output_biases();
    m.params.get_mut(rb).data_mut().copy_from_slice(&[0.3, -0.7]);
    let prior = m.params.get(cb).data().to_vec();
    assert!((sigmoid(prior[0]) - 0.01).abs() < 1e-12);
    let d = m.infer(&random(&[1, 3, 8], 6)).unwrap();
    for (logits, offs) in d.class_logits.iter().zip(&d.offsets) {
        let t = logits.dim(2);
        for c in 0..2 {
            assert!((0..t).all(|i| logits.at(&[0, c, i]) == prior[c]));
        }
        assert!((0..t).all(|i| offs.at(&[0, 0, i]) == softplus(0.3) && offs.at(&[0, 1, i]) == softplus(-0.7)));
    }
}

#[test]
fn determinism_in_f64() {
    let cfg = tiny(Variant::CeBridged, 3, 4);
    let x = random(&[1, 3, 12], 8);
    let a = Detector64::new(cfg.clone(), 77).unwrap().infer(&x).unwrap();
    let b = Detector64::new(cfg.clone(), 77).unwrap().infer(&x).unwrap();
    assert_eq!(a, b);
    let c = Detector64::new(cfg, 78).unwrap().infer(&x).unwrap();
    assert_ne!(a, c);
}

#[test]
fn unknown_variant_is_rejected() {
    let json = r#"{"variant": "tridet"}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let f32_model: Detector<f32> = Detector::new(tiny(Variant::Afswish, 2, 4), 0).unwrap();
    assert!(f32_model.infer(&Tensor::zeros(&[1, 4, 5])).is_err());
}

#[test]
fn hard_nms_examples() {
    let a = Segment::scored(1.0, 2.0, 0, 0.9);
    let b = Segment::scored(1.0, 2.0, 0, 0.8);
    assert_eq!(nms(&[b, a], 0.5, NmsMethod::Hard), vec![a]);
    let disjoint = [Segment::scored(0.0, 1.0, 0, 0.3), Segment::scored(1.0, 2.0, 0, 0.4), Segment::scored(3.0, 4.0, 0, 0.5)];
    assert_eq!(nms(&disjoint, 0.5, NmsMethod::Hard).len(), 3);
}

#[test]
fn hard_nms_random_pairwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let segs: Vec<Segment> = (0..20)
            .map(|_| {
                let s = rng.gen_range(0.0..10.0);
                Segment::scored(s, s + rng.gen_range(0.1..3.0), rng.gen_range(0..3), rng.gen_range(0.01..1.0))
            })
            .collect();
        let kept = nms(&segs, 0.4, NmsMethod::Hard);
        for (i, a) in kept.iter().enumerate() {
            assert!(segs.contains(a));
            for b in &kept[i + 1..] {
                assert!(a.label != b.label || tiou(a, b) <= 0.4);
            }
        }
        // every dropped segment is explained by a kept higher-scoring overlap
        for s in segs.iter().filter(|s| !kept.contains(s)) {
            assert!(kept.iter().any(|k| k.label == s.label && k.score >= s.score && tiou(k, s) > 0.4));
        }
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

fn dense_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (4usize..12).prop_flat_map(|t| {
        (prop::collection::vec(-6.0f64..6.0, 2 * t), prop::collection::vec(0.01f64..4.0, 2 * t), 0usize..5)
    })
}

proptest! {
    #[test]
    fn decoding_is_shift_equivariant((logits, offs, k) in dense_strategy()) {
        let t = logits.len() / 2;
        let stride = 2usize;
        let rate = 25.0;
        let build = |shift: usize| {
            let tt = t + shift;
            let mut l = Tensor::full(&[1, 2, tt], f64::NEG_INFINITY);
            let mut o = Tensor::ones(&[1, 2, tt]);
            for c in 0..2 {
                for i in 0..t {
                    l.set(&[0, c, i + shift], logits[c * t + i]);
                    o.set(&[0, c, i + shift], offs[c * t + i]);
                }
            }
            DenseTensors { class_logits: vec![l], offsets: vec![o] }
        };
        let a = dense_to_segments(&build(0), &[stride], rate, 0.01).unwrap().remove(0);
        let b = dense_to_segments(&build(k), &[stride], rate, 0.01).unwrap().remove(0);
        prop_assert_eq!(a.len(), b.len());
        let dt = (k * stride) as f64 / rate;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.start + dt - y.start).abs() < 1e-9 && (x.end + dt - y.end).abs() < 1e-9);
            prop_assert_eq!(x.label, y.label);
            prop_assert_eq!(x.score, y.score);
            prop_assert!(x.end > x.start);
            let s = x.score.unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
