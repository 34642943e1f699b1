use cetal::data::augment::{
    apply_permutation, augment_dataset, axis_normalize, permute_axes, transform, AugmentSpec, Transform, AXIS_PERMUTATIONS,
};
use cetal::data::io::{load_dataset, read_features, save_dataset, write_features};
use cetal::data::synth::{signature_channels, synth_dataset, SynthSpec};
use cetal::data::window::{window, window_starts};
use cetal::data::AnnotatedSequence;
use cetal::tensor::Tensor;
use cetal::{Error, Segment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(c: usize, t: usize, rate: f64, segments: Vec<Segment>, seed: u64) -> AnnotatedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * t).map(|_| rng.gen_range(-3.0..3.0f32) as f64).collect();
    AnnotatedSequence {
        id: format!("s{seed}"),
        subject: "sbj_0".into(),
        features: Tensor::new(&[c, t], data).unwrap(),
        rate_hz: rate,
        segments,
    }
}

fn row(s: &AnnotatedSequence, ch: usize) -> &[f64] {
    let t = s.len();
    &s.features.data()[ch * t..(ch + 1) * t]
}

#[test]
fn dataset_round_trips_through_files() {
    let ds = synth_dataset(&SynthSpec { num_sequences: 5, ..SynthSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
}

#[test]
fn feature_file_rejects_bad_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.cetf");
    let s = seq(3, 7, 50.0, vec![], 1);
    write_features(&p, &s.features, 50.0).unwrap();
    let (f, rate) = read_features(&p).unwrap();
    assert_eq!((f, rate), (s.features.clone(), 50.0));
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.pop();
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_features(&p), Err(Error::Data { .. })));
    std::fs::write(&p, b"NOTMAGIC........").unwrap();
    assert!(read_features(&p).unwrap_err().to_string().contains("magic"));
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    std::fs::write(&p, r#"{"sequences": [], "num_classes": 3}"#).unwrap();
    let ds = load_dataset(&p).unwrap();
    assert!(ds.sequences.is_empty());
    assert_eq!(ds.num_classes, 3);
}

#[test]
fn malformed_segment_names_the_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let s = seq(3, 50, 50.0, vec![], 2);
    write_features(&dir.path().join("walk_07.cetf"), &s.features, 50.0).unwrap();
    let p = dir.path().join("m.json");
    std::fs::write(
        &p,
        r#"{"sequences": [{"features": "walk_07.cetf", "rate_hz": 50.0,
            "segments": [{"start_s": 0.6, "end_s": 0.4, "label": 0}]}], "num_classes": 2}"#,
    )
    .unwrap();
    let err = load_dataset(&p).unwrap_err().to_string();
    assert!(err.contains("walk_07"), "{err}");

    std::fs::write(
        &p,
        r#"{"sequences": [{"features": "missing.cetf", "rate_hz": 50.0}], "num_classes": 2}"#,
    )
    .unwrap();
    assert!(load_dataset(&p).unwrap_err().to_string().contains("missing"));
}

#[test]
fn window_counts_follow_stride_formula() {
    let s = seq(2, 100, 50.0, vec![], 3);
    let w = window(&s, 1.0, 0.5).unwrap();
    let expected = (100 - 50) / 25 + 1;
    assert_eq!(w.len(), expected);
    assert_eq!(w.len(), 3);
    assert!(w.iter().all(|x| x.len() == 50));
    assert_eq!(row(&w[1], 1), &row(&s, 1)[25..75]);
}

#[test]
fn window_rebases_and_drops_segments() {
    let s = seq(1, 100, 50.0, vec![Segment::new(0.5, 1.5, 1), Segment::new(0.1, 0.3, 0)], 4);
    let w = window(&s, 1.0, 0.5).unwrap();
    // window at 25 samples spans [0.5, 1.5] s exactly
    assert_eq!(w[1].segments, vec![Segment::new(0.0, 1.0, 1)]);
    assert!(w[2].segments.iter().all(|g| g.label == 1));
    assert_eq!(w[2].segments, vec![Segment::new(0.0, 0.5, 1)]);
    assert!(w[0].segments.contains(&Segment::new(0.1, 0.3, 0)));
}

#[test]
fn short_sequence_yields_one_padded_window() {
    let s = seq(2, 30, 50.0, vec![Segment::new(0.0, 0.6, 0)], 5);
    let w = window(&s, 1.0, 0.5).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].len(), 50);
    assert_eq!(&row(&w[0], 0)[..30], row(&s, 0));
    assert!(row(&w[0], 0)[30..].iter().all(|&v| v == 0.0));
    assert!(window(&s, 0.0, 0.5).is_err());
    assert!(window(&s, 1.0, 1.0).is_err());
}

#[test]
fn permutations_enumerate_the_listed_orders() {
    let mut s = seq(3, 2, 10.0, vec![Segment::new(0.0, 0.1, 0)], 6);
    // x = 1, y = 2, z = 3
    s.features = Tensor::new(&[3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
    let out = permute_axes(&s).unwrap();
    assert_eq!(out.len(), 6);
    let orders: Vec<[f64; 3]> = out.iter().map(|o| [o.features.data()[0], o.features.data()[2], o.features.data()[4]]).collect();
    let (x, y, z) = (1.0, 2.0, 3.0);
    assert_eq!(orders, vec![[x, y, z], [x, z, y], [z, y, x], [z, x, y], [y, x, z], [y, z, x]]);
    assert_eq!(out[0].features, s.features);
    assert!(out.iter().all(|o| o.segments == s.segments));
}

#[test]
fn permutation_applies_per_sensor_and_xzy_is_an_involution() {
    let s = seq(6, 5, 10.0, vec![], 7);
    let once = apply_permutation(&s, [0, 2, 1]).unwrap();
    assert_eq!(row(&once, 4), row(&s, 5));
    assert_eq!(row(&once, 3), row(&s, 3));
    assert_eq!(apply_permutation(&once, [0, 2, 1]).unwrap(), s);
    assert!(matches!(permute_axes(&seq(4, 5, 10.0, vec![], 1)), Err(Error::Config(_))));
}

#[test]
fn composed_permutations_stay_in_the_list() {
    let s = seq(3, 4, 10.0, vec![], 8);
    for &p in &AXIS_PERMUTATIONS {
        for &q in &AXIS_PERMUTATIONS {
            let twice = apply_permutation(&apply_permutation(&s, p).unwrap(), q).unwrap();
            let hit = AXIS_PERMUTATIONS.iter().filter(|&&r| apply_permutation(&s, r).unwrap() == twice).count();
            assert_eq!(hit, 1, "{p:?} then {q:?}");
        }
    }
}

#[test]
fn normalize_closed_form() {
    let mut s = seq(2, 3, 1.0, vec![], 9);
    s.features = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
    let n = axis_normalize(&s).unwrap();
    let z = 1.0 / (2.0f64 / 3.0).sqrt();
    for (a, b) in row(&n, 0).iter().zip([-z, 0.0, z]) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
    assert!((row(&n, 0)[2] - 1.2247).abs() < 1e-4);
    assert_eq!(row(&n, 1), &[0.0, 0.0, 0.0]);
}

#[test]
fn normalized_channels_have_unit_statistics() {
    let s = seq(5, 400, 50.0, vec![], 10);
    let n = axis_normalize(&s).unwrap();
    for ch in 0..5 {
        let r = row(&n, ch);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        assert!(mean.abs() < 1e-10, "{mean}");
        assert!((std - 1.0).abs() < 1e-6, "{std}");
    }
    let twice = axis_normalize(&n).unwrap();
    let diff = twice.features.data().iter().zip(n.features.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6);
    assert!(axis_normalize(&seq(2, 1, 1.0, vec![], 1)).is_err());
}

#[test]
fn transform_pairs_invert_each_other() {
    let s = seq(3, 40, 50.0, vec![Segment::new(0.1, 0.5, 1)], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inv = transform(&transform(&s, Transform::Invert, &mut rng).unwrap(), Transform::Invert, &mut rng).unwrap();
    assert_eq!(inv, s);
    let down = transform(&s, Transform::Downscale { factor: 0.5 }, &mut rng).unwrap();
    assert_eq!(transform(&down, Transform::Magnify { factor: 2.0 }, &mut rng).unwrap(), s);
    assert_eq!(transform(&s, Transform::Noise { std: 0.0 }, &mut rng).unwrap(), s);
    let noisy = transform(&s, Transform::Noise { std: 0.1 }, &mut rng).unwrap();
    assert_ne!(noisy.features, s.features);
    assert_eq!(noisy.segments, s.segments);
}

#[test]
fn transform_parameters_are_checked() {
    let s = seq(3, 10, 50.0, vec![], 12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for op in [
        Transform::Downscale { factor: 1.0 },
        Transform::Downscale { factor: 0.0 },
        Transform::Magnify { factor: 1.0 },
        Transform::Magnify { factor: 0.5 },
        Transform::Noise { std: -1.0 },
    ] {
        assert!(matches!(transform(&s, op, &mut rng), Err(Error::Parameter(_))), "{op:?}");
    }
}

#[test]
fn augmentation_multiplies_and_keeps_labels() {
    let ds = synth_dataset(&SynthSpec { num_sequences: 3, ..SynthSpec::default() }).unwrap();
    let spec = AugmentSpec { transforms: vec![Transform::Invert, Transform::Noise { std: 0.2 }], ..AugmentSpec::default() };
    let out = augment_dataset(&ds, &spec).unwrap();
    assert_eq!(out.sequences.len(), 3 * 6 * 3);
    for s in &out.sequences {
        let src = ds.sequences.iter().find(|o| s.id.starts_with(&o.id)).unwrap();
        assert_eq!(s.segments, src.segments);
        assert_eq!(s.features.shape(), src.features.shape());
    }
    assert_eq!(augment_dataset(&ds, &spec).unwrap(), out);
}

#[test]
fn synth_rejects_single_class() {
    assert!(matches!(synth_dataset(&SynthSpec { num_classes: 1, ..SynthSpec::default() }), Err(Error::Config(_))));
}

#[test]
fn synth_is_deterministic_and_valid() {
    let spec = SynthSpec { seed: 7, ..SynthSpec::default() };
    let a = synth_dataset(&spec).unwrap();
    assert_eq!(a, synth_dataset(&spec).unwrap());
    assert_ne!(a, synth_dataset(&SynthSpec { seed: 8, ..spec.clone() }).unwrap());
    a.validate().unwrap();
    assert!(a.sequences.iter().all(|s| !s.segments.is_empty() && s.segments.iter().all(|g| g.end > g.start)));
}

#[test]
fn signature_channels_carry_six_db_more_power() {
    let spec = SynthSpec::default();
    let ds = synth_dataset(&spec).unwrap();
    let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0usize, 0usize);
    for s in &ds.sequences {
        for g in &s.segments {
            let (a, b) = ((g.start * s.rate_hz).round() as usize, (g.end * s.rate_hz).round() as usize);
            let sig = signature_channels(g.label, spec.channels, spec.num_classes);
            for ch in 0..spec.channels {
                let p: f64 = row(s, ch)[a..b].iter().map(|v| v * v).sum();
                if sig.contains(&ch) {
                    on += p;
                    n_on += b - a;
                } else {
                    off += p;
                    n_off += b - a;
                }
            }
        }
    }
    let db = 10.0 * ((on / n_on as f64) / (off / n_off as f64)).log10();
    assert!(db >= 6.0, "{db} dB");
}

#[test]
fn split_every_holds_out_each_kth() {
    let ds = synth_dataset(&SynthSpec { num_sequences: 8, ..SynthSpec::default() }).unwrap();
    let (tr, va) = ds.split_every(4);
    assert_eq!((tr.sequences.len(), va.sequences.len()), (6, 2));
    assert_eq!(va.sequences[0].id, ds.sequences[3].id);
}

proptest! {
    #[test]
    fn windows_cover_every_sample(len in 1usize..300, win in 1usize..80, stride_frac in 0.0f64..0.95) {
        let stride = (((1.0 - stride_frac) * win as f64).round() as usize).max(1);
        let starts = window_starts(len, win, stride);
        let mut covered = vec![false; len];
        for &s in &starts {
            prop_assert!(s + win <= len.max(win));
            for c in covered.iter_mut().skip(s).take(win) {
                *c = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn augmentations_preserve_segments(seed in 0u64..500, factor in 1.01f64..4.0) {
        let s = seq(6, 20, 10.0, vec![Segment::new(0.2, 1.1, 1), Segment::new(1.3, 1.9, 0)], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in [Transform::Invert, Transform::Magnify { factor }, Transform::Downscale { factor: 1.0 / factor }, Transform::Noise { std: 0.3 }] {
            prop_assert_eq!(&transform(&s, op, &mut rng).unwrap().segments, &s.segments);
        }
        for p in permute_axes(&s).unwrap() {
            prop_assert_eq!(&p.segments, &s.segments);
        }
    }
}
