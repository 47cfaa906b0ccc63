use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repcount::inference::*;
use repcount::model::{init_params, EmbeddingSequence, ModelConfig};
use repcount::video::VideoTensor;
use repcount::{Error, Tensor};

fn pred(l: u32, p: f64) -> PerFramePrediction {
    PerFramePrediction {
        period_length: l,
        period_confidence: 0.9,
        periodicity_prob: p,
    }
}

fn preds(ls: &[u32]) -> Vec<PerFramePrediction> {
    ls.iter().map(|&l| pred(l, 1.0)).collect()
}

#[test]
fn count_examples() {
    assert_eq!(count_from_predictions(&preds(&[8; 64]), CountMode::Always), 8.0);
    let mut mixed = vec![4; 32];
    mixed.extend([8; 32]);
    assert_eq!(count_from_predictions(&preds(&mixed), CountMode::Always), 12.0);
    let p: Vec<_> = [0.9, 0.9, 0.1, 0.1].iter().map(|&p| pred(2, p)).collect();
    assert_eq!(count_from_predictions(&p, CountMode::Thresholded(0.5)), 1.0);
    // 256 frames at stride 4 leave 64 sampled frames
    assert!((count_from_predictions(&preds(&[20; 64]), CountMode::Always) - 3.2).abs() < 1e-12);
}

#[test]
fn decode_picks_argmax() {
    let p = decode_frame(&[0.0f64, 2.0, 0.0, 0.0], 0.0);
    assert_eq!(p.period_length, 2);
    assert_eq!(p.periodicity_prob, 0.5);
    let z = 3.0 + 2f64.exp();
    assert!((p.period_confidence - 2f64.exp() / z).abs() < 1e-12);
}

#[test]
fn stride_choice() {
    assert_eq!(choose_stride(&[(1, 0.3), (2, 0.5), (3, 0.9), (4, 0.7)]), Some(3));
    assert_eq!(choose_stride(&[(1, 0.5), (2, 0.5), (3, 0.5), (4, 0.5)]), Some(1));
    assert_eq!(choose_stride(&[(4, 0.5), (2, 0.5)]), Some(2));
    assert_eq!(choose_stride(&[]), None);
}

#[test]
fn segment_examples() {
    let p: Vec<_> = [0.9, 0.9, 0.1, 0.9].iter().map(|&p| pred(2, p)).collect();
    assert_eq!(periodic_segments(&p, 0.5), vec![(0, 2), (3, 4)]);
    assert!(periodic_segments(&[pred(2, 0.1); 5], 0.5).is_empty());
    assert_eq!(periodic_segments(&[pred(2, 0.7); 5], 0.5), vec![(0, 5)]);
}

#[test]
fn speed_examples() {
    assert_eq!(speed_profile(&preds(&[5; 6])).unwrap(), vec![0; 5]);
    assert_eq!(speed_profile(&preds(&[4, 4, 6, 6])).unwrap(), vec![0, 2, 0]);
    assert!(speed_profile(&preds(&[9, 7, 5])).unwrap().iter().all(|&d| d < 0));
    assert!(matches!(speed_profile(&preds(&[4])), Err(Error::InsufficientData(_))));
}

fn embeddings(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> EmbeddingSequence<f64> {
    EmbeddingSequence(Tensor::from_fn(&[rows, cols], |k| f(k / cols, k % cols)))
}

#[test]
fn pca_collinear_and_constant() {
    let v = [0.3, -1.2, 2.0];
    let e = embeddings(7, 3, |i, j| i as f64 * v[j]);
    let trace = pca_trace(&e).unwrap();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (i, t) in trace.iter().enumerate() {
        assert!((t - (3.0 - i as f64) * norm).abs() < 1e-9, "{trace:?}");
    }
    assert!(pca_trace(&embeddings(5, 4, |_, j| j as f64)).unwrap().iter().all(|&t| t == 0.0));
    assert!(matches!(pca_trace(&embeddings(1, 3, |_, _| 1.0)), Err(Error::InsufficientData(_))));
}

#[test]
fn pca_variance_is_top_eigenvalue() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (12, 5);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = EmbeddingSequence(Tensor::new(vec![n, d], data.clone()).unwrap());
    let trace = pca_trace(&e).unwrap();
    let mut x = DMatrix::from_row_slice(n, d, &data);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let cov = x.transpose() * &x / n as f64;
    let top = SymmetricEigen::new(cov).eigenvalues.max();
    let var = trace.iter().map(|t| t * t).sum::<f64>() / n as f64;
    assert!((var - top).abs() < 1e-9 * top.max(1.0));
}

#[test]
fn pca_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = EmbeddingSequence(Tensor::new(vec![10, 2], data.clone()).unwrap());
    let (c, s) = (0.6f64, 0.8f64);
    let rotated: Vec<f64> = data
        .chunks(2)
        .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]])
        .collect();
    let r = EmbeddingSequence(Tensor::new(vec![10, 2], rotated).unwrap());
    for (a, b) in pca_trace(&e).unwrap().iter().zip(pca_trace(&r).unwrap()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn small_model() -> ModelConfig {
    ModelConfig::toy().with_frames(8)
}

fn random_video(frames: usize, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..frames * 32 * 32 * 3).map(|_| rng.random::<f32>()).collect();
    VideoTensor::new(frames, 32, 32, 30.0, pixels).unwrap()
}

#[test]
fn predict_frames_window_counts() {
    let cfg = small_model();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let v = random_video(16, 1);
    assert_eq!(predict_frames(&params, &v.slice(0, 8).unwrap(), 1, &cfg).unwrap().len(), 8);
    let both = predict_frames(&params, &v, 1, &cfg).unwrap();
    assert_eq!(both.len(), 16);
    assert_eq!(both, predict_frames(&params, &v, 1, &cfg).unwrap());
    // 16 frames at stride 3 sample 6, padded to one window of 8
    assert_eq!(predict_frames(&params, &v, 3, &cfg).unwrap().len(), 6);
    for p in &both {
        assert!((1..=cfg.period_classes as u32).contains(&p.period_length));
        assert!(p.period_confidence > 0.0 && p.period_confidence <= 1.0);
        assert!((0.0..=1.0).contains(&p.periodicity_prob));
    }
    assert!(predict_frames(&params, &v, 0, &cfg).is_err());
}

#[test]
fn count_repetitions_composes_the_pieces() {
    let cfg = small_model();
    let params = init_params::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let v = random_video(20, 3);
    let opts = CountOptions::default();
    let r = count_repetitions(&params, &v, &cfg, &opts).unwrap();
    let sel = select_stride(&params, &v, &opts.strides, &cfg).unwrap();
    assert_eq!(r.chosen_stride, sel.stride);
    assert_eq!(r.per_frame, sel.chosen().predictions);
    assert_eq!(r.count, count_from_predictions(&r.per_frame, CountMode::Always));
    let expected: f64 = r.per_frame.iter().map(|p| 1.0 / p.period_length as f64).sum();
    assert_eq!(r.count, expected);
    for &(a, b) in &r.segments {
        assert!(a < b && b <= 20);
    }

    let doubled = select_stride(&params, &v, &[1, 2, 3, 4, 1, 2, 3, 4], &cfg).unwrap();
    assert_eq!(doubled.stride, sel.stride);
    assert!(matches!(
        select_stride(&params, &v.slice(0, 5).unwrap(), &[1], &cfg),
        Err(Error::InsufficientFrames { needed: 8, available: 5 })
    ));
}

proptest! {
    #[test]
    fn counting_is_additive_over_windows(
        a in prop::collection::vec(1u32..32, 1..50),
        b in prop::collection::vec(1u32..32, 1..50),
    ) {
        let joined: Vec<u32> = a.iter().chain(&b).copied().collect();
        let whole = count_from_predictions(&preds(&joined), CountMode::Always);
        let parts = count_from_predictions(&preds(&a), CountMode::Always)
            + count_from_predictions(&preds(&b), CountMode::Always);
        prop_assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn segments_cover_exactly_the_periodic_frames(
        p in prop::collection::vec(0.0f64..1.0, 0..60),
        t in 0.0f64..1.0,
    ) {
        let ps: Vec<_> = p.iter().map(|&v| pred(2, v)).collect();
        let segs = periodic_segments(&ps, t);
        let mut covered = vec![false; p.len()];
        let mut last_end = None;
        for &(s, e) in &segs {
            prop_assert!(s < e);
            if let Some(le) = last_end {
                prop_assert!(s > le);
            }
            last_end = Some(e);
            for c in &mut covered[s..e] {
                *c = true;
            }
        }
        for (i, &v) in p.iter().enumerate() {
            prop_assert_eq!(covered[i], v > t);
        }
    }
}
