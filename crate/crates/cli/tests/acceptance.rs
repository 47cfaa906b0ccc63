//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported but only fail the process when `REPCOUNT_STRICT=1`,
//! so the overfitting criteria can be tracked without breaking the test run.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repcount::datasets::{aggregate_annotations, drifting_scene, segment_iou, AnnotatorMark, Aggregation};
use repcount::inference::{count_repetitions, predict_frames, CountMode, CountOptions};
use repcount::metrics::{mae, obo, periodicity_scores, pr_auc, CountEval, PeriodicityEval, Threshold};
use repcount::model::{build_tsm, init_params, EmbeddingSequence, ModelConfig};
use repcount::synth::{apply_camera_motion, smooth_track, synthesize_repetition, AffineTrack, MotionFlags, SynthesisConfig};
use repcount::training::{
    grad_check, load_checkpoint, save_checkpoint, train, Checkpoint, DataSources, LabeledVideo, Sample, TrainConfig,
};
use repcount::video::{load_video_frames, write_video_frames, PeriodLabels, VideoTensor};
use repcount::{Checkpoint32, Tensor};

// tolerances
const TSM_EXACT: f64 = 1e-6;
const ROW_SUM: f64 = 1e-5;
const HAND_VALUE: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-3;
const GRAD_FINE_EPS: f64 = 1e-6;
const GRAD_MAX_REL: f64 = 1e-3;
const GRAD_MIN_ENTRIES: usize = 200;
const METRIC_EXACT: f64 = 1e-9;

// overfit run
const OVERFIT_VIDEOS: usize = 20;
const OVERFIT_LEN: usize = 128;
const OVERFIT_STEPS: usize = 1000;
const OVERFIT_LR: f64 = 5e-4;
const FRESH_VIDEOS: usize = 50;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: usize, name: &str, started: Instant, check: Check) -> bool {
    let status = if check.pass { "PASS" } else { "FAIL" };
    println!(
        "{status} {id:>2} {name}: {} [{:.1}s]",
        check.detail,
        started.elapsed().as_secs_f64()
    );
    check.pass
}

fn timed(limit: Duration, started: Instant, mut check: Check) -> Check {
    let t = started.elapsed();
    if t > limit {
        check.pass = false;
        check.detail += &format!(", took {:.1}s over the {}s budget", t.as_secs_f64(), limit.as_secs());
    }
    check
}

fn random_embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tsm(data: Vec<f64>, n: usize, cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
    let d = data.len() / n;
    let e = EmbeddingSequence::new(Tensor::new(vec![n, d], data).unwrap()).unwrap();
    let m = build_tsm(&e, cfg);
    (m.raw.data().to_vec(), m.s.data().to_vec())
}

fn tsm_invariants() -> Check {
    let started = Instant::now();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    let mut diag_max = true;
    for i in 0..200 {
        let n = [4, 16, 64][i % 3];
        let d = rng.random_range(1..=16);
        let data = random_embeddings(n, d, &mut rng);
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = data.iter().enumerate().map(|(k, v)| v + shift[k % d]).collect();
        let (raw, s) = tsm(data, n, &cfg);
        let (raw2, _) = tsm(shifted, n, &cfg);
        for r in 0..n {
            worst[1] = worst[1].max(raw[r * n + r].abs());
            let sum: f64 = s[r * n..(r + 1) * n].iter().sum();
            worst[2] = worst[2].max((sum - 1.0).abs());
            for c in 0..n {
                worst[0] = worst[0].max((raw[r * n + c] - raw[c * n + r]).abs());
                worst[3] = worst[3].max((raw[r * n + c] - raw2[r * n + c]).abs());
                diag_max &= s[r * n + r] >= s[r * n + c];
            }
        }
    }
    let pass = worst[0] <= TSM_EXACT && worst[1] <= TSM_EXACT && worst[2] <= ROW_SUM && worst[3] <= TSM_EXACT && diag_max;
    timed(
        Duration::from_secs(10),
        started,
        Check::new(
            pass,
            format!(
                "asymmetry {:.1e}, diagonal {:.1e}, row sum {:.1e}, shift {:.1e}, diagonal is row max: {diag_max}",
                worst[0], worst[1], worst[2], worst[3]
            ),
        ),
    )
}

fn hand_value() -> Check {
    let cfg = ModelConfig::toy();
    let (_, s) = tsm(vec![0.0, 1.0], 2, &cfg);
    let z = 1.0 + (-1.0f64 / 13.5).exp();
    let oracle = [1.0 / z, (-1.0f64 / 13.5).exp() / z];
    let hand = [0.5185, 0.4815];
    let pass = (0..2).all(|j| (s[j] - hand[j]).abs() <= HAND_VALUE && (s[j] - oracle[j]).abs() <= 1e-12);
    Check::new(pass, format!("row 0 = [{:.4}, {:.4}], oracle [{:.4}, {:.4}]", s[0], s[1], oracle[0], oracle[1]))
}

fn gradient_check() -> Check {
    let started = Instant::now();
    let model = ModelConfig::toy();
    let n = model.n_frames;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pixels: Vec<f32> = (0..n * 32 * 32 * 3).map(|_| rng.random()).collect();
    let video = VideoTensor::new(n, 32, 32, 30.0, pixels).unwrap();
    let periods: Vec<u32> = (0..n).map(|i| if i < 4 { 0 } else { 2 + (i % 7) as u32 }).collect();
    let batch = vec![Sample::from_video(video, PeriodLabels::from_periods(periods).unwrap()).unwrap()];
    let params = init_params::<f64>(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // the same picks at a finer step re-check entries whose coarse probes cross a kink
    let r = grad_check(&params, &batch, &model, GRAD_EPS, 12, &mut rng.clone()).unwrap();
    let fine = grad_check(&params, &batch, &model, GRAD_FINE_EPS, 12, &mut rng).unwrap();
    let smooth = r.smooth_entries().count();
    let (mut rechecked, mut fine_max, mut unresolved) = (0, 0.0f64, 0);
    for (c, f) in r.entries.iter().zip(&fine.entries) {
        assert_eq!((&c.name, c.index), (&f.name, f.index));
        if !c.kink {
            continue;
        }
        if f.kink {
            unresolved += 1;
        } else {
            rechecked += 1;
            fine_max = fine_max.max(f.rel_error);
        }
    }
    let arrays = params.len();
    let mut covered: Vec<&str> = r
        .entries
        .iter()
        .zip(&fine.entries)
        .filter(|(c, f)| !c.kink || !f.kink)
        .map(|(c, _)| c.name.as_str())
        .collect();
    covered.dedup();
    let pass = smooth >= GRAD_MIN_ENTRIES
        && r.max_rel_error < GRAD_MAX_REL
        && fine_max < GRAD_MAX_REL
        && covered.len() == arrays;
    timed(
        Duration::from_secs(120),
        started,
        Check::new(
            pass,
            format!(
                "{smooth} kink-free entries at eps {GRAD_EPS:e}, max rel error {:.2e}; \
                 {rechecked} kinked entries at eps {GRAD_FINE_EPS:e}, max {fine_max:.2e} ({unresolved} still kinked); \
                 {}/{arrays} arrays covered",
                r.max_rel_error,
                covered.len()
            ),
        ),
    )
}

fn synthesis_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let footage: Vec<VideoTensor> = (0..10).map(|_| drifting_scene(120, 16, 16, &mut rng)).collect();
    let mut failures = 0;
    for i in 0..500 {
        let cfg = SynthesisConfig {
            count_range: (2, 8),
            aug_fraction: 0.0,
            target_len: if i % 2 == 0 { Some(64) } else { None },
            ..SynthesisConfig::default()
        };
        let s = synthesize_repetition(&footage[i % footage.len()], &cfg, &mut rng).unwrap();
        let m = &s.meta;
        let (start, end) = (m.prepad, m.prepad + m.period * m.count);
        let mut ok = !m.augmented
            && s.track.is_identity()
            && s.video.num_frames() == end + m.postpad
            && s.labels.len() == s.video.num_frames()
            && m.period == m.clip_len * if m.reversed { 2 } else { 1 }
            && (s.labels.count() - m.count as f64).abs() < 1e-9;
        for t in 0..s.video.num_frames() {
            let inside = (start..end).contains(&t);
            ok &= s.labels.periodicity[t] == inside;
            ok &= s.labels.period_length[t] == if inside { m.period as u32 } else { 0 };
            if inside && t + m.period < end {
                ok &= s.video.frame(t) == s.video.frame(t + m.period);
            }
        }
        failures += usize::from(!ok);
    }
    timed(
        Duration::from_secs(60),
        started,
        Check::new(failures == 0, format!("{}/500 samples consistent", 500 - failures)),
    )
}

fn smoothness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let interval = rng.random_range(1..40);
        let lo = rng.random_range(-2.0..1.0);
        let hi = lo + rng.random_range(0.0..2.0);
        let track = smooth_track(n, (lo, hi), interval, &mut rng).unwrap();
        let bound = (hi - lo) / interval as f64;
        violations += track.iter().filter(|v| !(lo..=hi).contains(*v)).count();
        violations += track.windows(2).filter(|w| (w[1] - w[0]).abs() > bound).count();
    }
    let mut identity_exact = true;
    for (h, w) in [(9, 13), (32, 32), (17, 5)] {
        let v = drifting_scene(6, h, w, &mut rng);
        let out = apply_camera_motion(&v, &AffineTrack::identity(6)).unwrap();
        identity_exact &= out.pixels().iter().zip(v.pixels()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Check::new(
        violations == 0 && identity_exact,
        format!("{violations} bound violations in 1000 tracks, identity warp bit-exact: {identity_exact}"),
    )
}

struct Overfit {
    model: ModelConfig,
    ckpt: Checkpoint32,
    train_set: Vec<(LabeledVideo, usize)>,
}

fn overfit_synthesis() -> SynthesisConfig {
    SynthesisConfig {
        period_range: (4, 24),
        count_range: (2, 64),
        reversal_prob: 0.3,
        prepad_range: (0, 8),
        postpad_range: (0, 8),
        aug_fraction: 0.0,
        max_period: 32,
        target_len: Some(OVERFIT_LEN),
        ..SynthesisConfig::default()
    }
}

fn overfit_samples(n: usize, seed: u64) -> Vec<(LabeledVideo, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let footage = drifting_scene(300, 32, 32, &mut rng);
            let s = synthesize_repetition(&footage, &overfit_synthesis(), &mut rng).unwrap();
            (LabeledVideo::new(s.video, s.labels).unwrap(), s.meta.count)
        })
        .collect()
}

fn overfit() -> Overfit {
    let model = ModelConfig::toy();
    let train_set = overfit_samples(OVERFIT_VIDEOS, 11);
    let sources = DataSources {
        fixed: train_set.iter().map(|(v, _)| v.clone()).collect(),
        ..Default::default()
    };
    let cfg = TrainConfig {
        learning_rate: OVERFIT_LR,
        steps: OVERFIT_STEPS,
        seed: 1,
        aug_fraction: 0.0,
        synthesis: overfit_synthesis(),
        ..TrainConfig::default()
    };
    let params = init_params::<f32>(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ckpt = train(params, &sources, &model, &cfg, None).unwrap();
    Overfit { model, ckpt, train_set }
}

fn count_opts() -> CountOptions {
    CountOptions {
        mode: CountMode::Thresholded(0.5),
        ..CountOptions::default()
    }
}

fn count_within_one(o: &Overfit, set: &[(LabeledVideo, usize)]) -> Vec<bool> {
    set.iter()
        .map(|(v, k)| {
            let r = count_repetitions(&o.ckpt.params, &v.video, &o.model, &count_opts()).unwrap();
            (r.count - *k as f64).abs() <= 1.0
        })
        .collect()
}

fn overfit_and_count(o: &Overfit, started: Instant) -> Check {
    let (mut hit, mut total) = (0, 0);
    for (v, _) in &o.train_set {
        let preds = predict_frames(&o.ckpt.params, &v.video, 1, &o.model).unwrap();
        for (p, (&l, &periodic)) in preds.iter().zip(v.labels.period_length.iter().zip(&v.labels.periodicity)) {
            if periodic {
                total += 1;
                hit += usize::from(p.period_length == l);
            }
        }
    }
    let acc = hit as f64 / total as f64;
    let good = count_within_one(o, &o.train_set).iter().filter(|&&g| g).count();
    timed(
        Duration::from_secs(15 * 60),
        started,
        Check::new(
            acc >= 0.95 && good >= 18,
            format!("frame accuracy {acc:.3}, {good}/{OVERFIT_VIDEOS} counts within one ({OVERFIT_STEPS} steps)"),
        ),
    )
}

fn generalization(o: &Overfit) -> Check {
    let fresh = overfit_samples(FRESH_VIDEOS, 999);
    let misses = count_within_one(o, &fresh).iter().filter(|&&g| !g).count();
    let err = misses as f64 / FRESH_VIDEOS as f64;
    Check::new(err <= 0.3, format!("OBO error {err:.2} on {FRESH_VIDEOS} fresh samples"))
}

fn multi_speed(o: &Overfit) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let footage = drifting_scene(200, 32, 32, &mut rng);
    let cfg = SynthesisConfig {
        period_range: (80, 80),
        count_range: (4, 4),
        prepad_range: (0, 0),
        postpad_range: (0, 0),
        max_period: 80,
        target_len: None,
        aug_fraction: 0.0,
        motion: MotionFlags {
            reversal: false,
            ..MotionFlags::default()
        },
        ..SynthesisConfig::default()
    };
    let s = synthesize_repetition(&footage, &cfg, &mut rng).unwrap();
    assert_eq!(s.video.num_frames(), 320);
    let r = count_repetitions(&o.ckpt.params, &s.video, &o.model, &count_opts()).unwrap();
    Check::new(
        r.chosen_stride >= 3 && (r.count - 4.0).abs() <= 1.0,
        format!("stride {}, count {:.2} (true 4)", r.chosen_stride, r.count),
    )
}

// brute-force metric references

fn obo_ref(pairs: &[(f64, u32)]) -> f64 {
    let mut miss = 0.0;
    for &(p, t) in pairs {
        if (p - t as f64).abs() > 1.0 {
            miss += 1.0;
        }
    }
    miss / pairs.len() as f64
}

fn mae_ref(pairs: &[(f64, u32)]) -> f64 {
    let mut sum = 0.0;
    for &(p, t) in pairs {
        sum += (p - t as f64).abs() / t as f64;
    }
    sum / pairs.len() as f64
}

/// (precision, recall, f1, overlap) of one video.
fn prf_ref(scores: &[f64], truth: &[bool], t: f64) -> [f64; 4] {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &g) in scores.iter().zip(truth) {
        match (s >= t, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        return [1.0; 4];
    }
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    [p, r, f, tp / (tp + fp + fn_)]
}

fn mean_prf_ref(videos: &[(Vec<f64>, Vec<bool>)], t: f64) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for (s, g) in videos {
        for (a, v) in acc.iter_mut().zip(prf_ref(s, g, t)) {
            *a += v;
        }
    }
    acc.map(|a| a / videos.len() as f64)
}

fn pooled_ref(videos: &[(Vec<f64>, Vec<bool>)]) -> (Vec<f64>, Vec<bool>) {
    let s = videos.iter().flat_map(|v| v.0.clone()).collect();
    let g = videos.iter().flat_map(|v| v.1.clone()).collect();
    (s, g)
}

/// Best pooled F1 over every threshold that changes the prediction, plus
/// one above the maximum score.
fn best_f1_ref(videos: &[(Vec<f64>, Vec<bool>)]) -> (f64, f64) {
    let (s, g) = pooled_ref(videos);
    let mut ts = s.clone();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    ts.insert(0, ts[0].next_up());
    let mut best = (f64::NAN, -1.0);
    for t in ts {
        let f = prf_ref(&s, &g, t)[2];
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}

fn pr_auc_ref(videos: &[(Vec<f64>, Vec<bool>)]) -> f64 {
    let (s, g) = pooled_ref(videos);
    let mut ts = s.clone();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let [p, r, ..] = prf_ref(&s, &g, t);
            (r, p)
        })
        .collect();
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

fn evals(videos: &[(Vec<f64>, Vec<bool>)]) -> Vec<PeriodicityEval> {
    videos
        .iter()
        .map(|(s, g)| PeriodicityEval::new(s.clone(), g.clone()).unwrap())
        .collect()
}

fn vid(scores: &[f64], truth: &[u8]) -> (Vec<f64>, Vec<bool>) {
    (scores.to_vec(), truth.iter().map(|&t| t == 1).collect())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= METRIC_EXACT
}

fn metric_oracles() -> Check {
    let count_case = |pairs: &[(f64, u32)], expect_obo: Option<f64>, expect_mae: Option<f64>| {
        let e: Vec<CountEval> = pairs.iter().map(|&(p, t)| CountEval::new(p, t).unwrap()).collect();
        let (o, m) = (obo(&e).unwrap(), mae(&e).unwrap());
        close(o, obo_ref(pairs))
            && close(m, mae_ref(pairs))
            && expect_obo.is_none_or(|x| close(o, x))
            && expect_mae.is_none_or(|x| close(m, x))
    };
    let fixed_case = |videos: &[(Vec<f64>, Vec<bool>)], t: f64, expect_f1: Option<f64>| {
        let r = periodicity_scores(&evals(videos), Threshold::Fixed(t)).unwrap();
        let [p, rc, f, o] = mean_prf_ref(videos, t);
        close(r.scores.precision, p)
            && close(r.scores.recall, rc)
            && close(r.scores.f1, f)
            && close(r.scores.overlap, o)
            && expect_f1.is_none_or(|x| close(r.scores.f1, x))
    };
    let best_case = |videos: &[(Vec<f64>, Vec<bool>)], expect_t: Option<f64>| {
        let r = periodicity_scores(&evals(videos), Threshold::BestF1).unwrap();
        let (t, f) = best_f1_ref(videos);
        r.threshold == t && close(r.pooled_f1, f) && expect_t.is_none_or(|x| r.threshold == x)
    };
    let auc_case = |videos: &[(Vec<f64>, Vec<bool>)], expect: Option<f64>| {
        let a = pr_auc(&evals(videos)).unwrap();
        close(a, pr_auc_ref(videos)) && expect.is_none_or(|x| close(a, x))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random_videos: Vec<(Vec<f64>, Vec<bool>)> = (0..4)
        .map(|_| {
            let n = rng.random_range(5..40);
            let s = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut g: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            g[0] = true;
            (s, g)
        })
        .collect();
    let random_counts: Vec<(f64, u32)> =
        (0..30).map(|_| (rng.random_range(0.0..40.0), rng.random_range(1..40))).collect();

    let cases: Vec<(&str, bool)> = vec![
        ("obo worked example", count_case(&[(10.0, 10), (11.0, 10), (13.0, 10)], Some(1.0 / 3.0), None)),
        ("mae worked example", count_case(&[(5.0, 4), (8.0, 8)], None, Some(0.125))),
        ("obo boundary", count_case(&[(5.0, 4), (5.0001, 4)], Some(0.5), None)),
        ("random counts", count_case(&random_counts, None, None)),
        ("identical masks", fixed_case(&[vid(&[1.0, 0.0, 1.0, 1.0], &[1, 0, 1, 1])], 0.5, Some(1.0))),
        ("all positive on half truth", fixed_case(&[vid(&[0.9; 4], &[1, 1, 0, 0])], 0.5, Some(2.0 / 3.0))),
        (
            "per-video average",
            fixed_case(
                &[vid(&[1.0, 1.0, 0.0], &[1, 1, 1]), vid(&[1.0; 7], &[1, 1, 1, 0, 0, 0, 0])],
                0.5,
                Some(0.7),
            ),
        ),
        ("negative video", fixed_case(&[vid(&[0.1, 0.2], &[0, 0])], 0.5, Some(1.0))),
        ("best F1 separates", best_case(&[vid(&[0.9, 0.7, 0.4, 0.2], &[1, 1, 0, 0])], Some(0.7))),
        ("best F1 on random videos", best_case(&random_videos, None)),
        ("separable PR-AUC", auc_case(&[vid(&[0.9, 0.8, 0.1], &[1, 1, 0]), vid(&[0.95, 0.3], &[1, 0])], Some(1.0))),
        ("random PR-AUC", auc_case(&random_videos, None) && auc_case(&[vid(&[0.5; 5], &[1, 0, 0, 1, 0])], Some(0.4))),
    ];
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Check::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{}/{} cases match", cases.len(), cases.len())
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    )
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn round_trips() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let model = ModelConfig::toy();
    let ckpt = Checkpoint {
        params: init_params::<f32>(&model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(),
        step: 17,
        config: model,
        history: Vec::new(),
    };
    save_checkpoint(&ckpt, &t.join("m.ckpt")).unwrap();
    let back = load_checkpoint(&t.join("m.ckpt")).unwrap();
    let ckpt_ok = back.step == ckpt.step
        && back.config == ckpt.config
        && back.params.iter().zip(ckpt.params.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let video = drifting_scene(12, 20, 24, &mut ChaCha8Rng::seed_from_u64(4));
    write_video_frames(&video, &t.join("frames")).unwrap();
    let loaded = load_video_frames(&t.join("frames"), None).unwrap();
    let frames_ok = loaded.num_frames() == video.num_frames()
        && loaded.fps() == video.fps()
        && loaded.pixels().iter().zip(video.pixels()).all(|(a, b)| a.to_bits() == b.to_bits());

    let generate = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_repcount"))
            .args(["--deterministic", "generate", "--out-dir", out, "--num", "4", "--seed", "21"])
            .current_dir(t)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        status.success()
    };
    let cli_ok = generate("g1") && generate("g2") && dir_bytes(&t.join("g1")) == dir_bytes(&t.join("g2"));
    Check::new(
        ckpt_ok && frames_ok && cli_ok,
        format!("checkpoint {ckpt_ok}, frame directory {frames_ok}, CLI generate {cli_ok}"),
    )
}

/// The value with at least two entries on each side, ties included.
fn median_ref(v: [f64; 3]) -> f64 {
    *v.iter()
        .find(|&&x| v.iter().filter(|&&y| y <= x).count() >= 2 && v.iter().filter(|&&y| y >= x).count() >= 2)
        .unwrap()
}

fn aggregation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut mismatches, mut accepted) = (0, 0);
    for _ in 0..100 {
        let base = rng.random_range(0.0..10.0);
        let marks: Vec<AnnotatorMark> = (0..3)
            .map(|i| {
                let s = base + rng.random_range(-1.0..1.0);
                let e = s + rng.random_range(2.0..6.0);
                AnnotatorMark::new(format!("a{i}"), (s, e), rng.random_range(1..30)).unwrap()
            })
            .collect();
        let min_iou = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, b)| segment_iou(marks[a].segment, marks[b].segment))
            .fold(f64::INFINITY, f64::min);
        let got = aggregate_annotations(&marks, 0.5).unwrap();
        let ok = match got {
            Aggregation::Accepted(a) => {
                accepted += 1;
                let start = median_ref([0, 1, 2].map(|i| marks[i].segment.0));
                let end = median_ref([0, 1, 2].map(|i| marks[i].segment.1));
                let count = median_ref([0, 1, 2].map(|i| marks[i].count as f64));
                min_iou >= 0.5 && a.segment == (start, end) && a.count as f64 == count
            }
            Aggregation::Rejected { .. } => min_iou < 0.5,
        };
        mismatches += usize::from(!ok);
    }
    let mut disjoint_accepted = 0;
    for _ in 0..100 {
        let s = rng.random_range(0.0..10.0);
        let a = (s, s + rng.random_range(0.5..3.0));
        let gap = rng.random_range(0.0..2.0);
        let b = (a.1 + gap, a.1 + gap + rng.random_range(0.5..3.0));
        let mut marks = vec![
            AnnotatorMark::new("a", a, 3).unwrap(),
            AnnotatorMark::new("b", b, 3).unwrap(),
            AnnotatorMark::new("c", if rng.random_bool(0.5) { a } else { b }, 4).unwrap(),
        ];
        marks.rotate_left(rng.random_range(0..3));
        if matches!(aggregate_annotations(&marks, 0.5).unwrap(), Aggregation::Accepted(_)) {
            disjoint_accepted += 1;
        }
    }
    Check::new(
        mismatches == 0 && disjoint_accepted == 0,
        format!("{mismatches} oracle mismatches ({accepted} accepted), {disjoint_accepted}/100 disjoint triples accepted"),
    )
}

fn main() {
    // single-threaded so every run reproduces bit for bit
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Check| {
        let started = Instant::now();
        results.push(report(id, name, started, f()));
    };
    run(1, "TSM invariants", &tsm_invariants);
    run(2, "TSM hand value", &hand_value);
    run(3, "gradient check", &gradient_check);
    run(4, "synthesis oracle", &synthesis_oracle);
    run(5, "track smoothness", &smoothness);

    let started = Instant::now();
    let o = overfit();
    results.push(report(6, "overfit and count", started, overfit_and_count(&o, started)));
    let started = Instant::now();
    results.push(report(7, "generalization smoke", started, generalization(&o)));
    let started = Instant::now();
    results.push(report(8, "multi-speed", started, multi_speed(&o)));

    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Check| {
        let started = Instant::now();
        results.push(report(id, name, started, f()));
    };
    run(9, "metric oracles", &metric_oracles);
    run(10, "round trips", &round_trips);
    run(11, "annotation aggregation", &aggregation);

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    let strict = std::env::var("REPCOUNT_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
