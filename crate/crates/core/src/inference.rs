//! Turning per-frame network outputs into counts, periodic segments, stride
//! choices, speed profiles and embedding traces.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::model::{forward, EmbeddingSequence, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::video::{sample_window, PadPolicy, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerFramePrediction {
    /// Decoded period in sampled frames (`argmax class + 1`).
    #[serde(rename = "l")]
    pub period_length: u32,
    /// Softmax probability of the decoded class.
    #[serde(rename = "conf")]
    pub period_confidence: f64,
    #[serde(rename = "p")]
    pub periodicity_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "threshold", rename_all = "snake_case")]
pub enum CountMode {
    /// Every frame contributes `1 / l`.
    Always,
    /// Only frames with periodicity above the threshold contribute.
    Thresholded(f64),
}

pub const DEFAULT_STRIDES: [usize; 4] = [1, 2, 3, 4];

/// Decodes one row of period logits and a periodicity logit.
pub fn decode_frame<T: Scalar>(period_logits: &[T], periodicity_logit: T) -> PerFramePrediction {
    let logits: Vec<f64> = period_logits.iter().map(|v| v.to_f64_lossy()).collect();
    let (best, &max) = logits
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    PerFramePrediction {
        period_length: best as u32 + 1,
        period_confidence: 1.0 / z,
        periodicity_prob: sigmoid(periodicity_logit.to_f64_lossy()),
    }
}

/// Runs the network over consecutive non-overlapping windows of the video
/// sampled every `stride` frames. Returns one prediction per sampled frame;
/// padding frames of the last window are dropped.
pub fn predict_frames<T: Scalar>(
    params: &ModelParams<T>,
    video: &VideoTensor,
    stride: usize,
    cfg: &ModelConfig,
) -> Result<Vec<PerFramePrediction>> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let n = cfg.n_frames;
    let sampled = video.num_frames().div_ceil(stride);
    let video = if (video.height(), video.width()) == cfg.input_hw {
        std::borrow::Cow::Borrowed(video)
    } else {
        std::borrow::Cow::Owned(video.resize(cfg.input_hw.0, cfg.input_hw.1)?)
    };
    let mut preds = Vec::with_capacity(sampled);
    for w in 0..sampled.div_ceil(n) {
        let window = sample_window(&video, w * n * stride, stride, n, PadPolicy::RepeatLast)?;
        let out = forward(&window, params, cfg)?.outputs;
        for i in 0..window.valid_len {
            preds.push(decode_frame(out.period_logits.row(i), out.periodicity_logits.at(i, 0)));
        }
    }
    Ok(preds)
}

pub fn count_from_predictions(preds: &[PerFramePrediction], mode: CountMode) -> f64 {
    preds
        .iter()
        .filter(|p| match mode {
            CountMode::Always => true,
            CountMode::Thresholded(t) => p.periodicity_prob > t,
        })
        .map(|p| 1.0 / p.period_length as f64)
        .sum()
}

/// Mean period confidence over the predictions.
pub fn stride_score(preds: &[PerFramePrediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().map(|p| p.period_confidence).sum::<f64>() / preds.len() as f64
}

/// Highest score wins; ties go to the smallest stride.
pub fn choose_stride(scores: &[(usize, f64)]) -> Option<usize> {
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|&(s, _)| s);
    sorted
        .into_iter()
        .fold(None, |best: Option<(usize, f64)>, (s, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((s, v)),
        })
        .map(|(s, _)| s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrideRun {
    pub stride: usize,
    pub score: f64,
    pub predictions: Vec<PerFramePrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrideSelection {
    pub stride: usize,
    pub runs: Vec<StrideRun>,
}

impl StrideSelection {
    pub fn chosen(&self) -> &StrideRun {
        self.runs.iter().find(|r| r.stride == self.stride).expect("chosen stride was run")
    }

    pub fn scores(&self) -> Vec<(usize, f64)> {
        self.runs.iter().map(|r| (r.stride, r.score)).collect()
    }
}

pub fn select_stride<T: Scalar>(
    params: &ModelParams<T>,
    video: &VideoTensor,
    strides: &[usize],
    cfg: &ModelConfig,
) -> Result<StrideSelection> {
    if strides.is_empty() {
        return Err(Error::InvalidInput("no strides to try".into()));
    }
    if video.num_frames() < cfg.n_frames {
        return Err(Error::InsufficientFrames {
            needed: cfg.n_frames,
            available: video.num_frames(),
        });
    }
    let runs = strides
        .iter()
        .map(|&stride| {
            let predictions = predict_frames(params, video, stride, cfg)?;
            Ok(StrideRun {
                stride,
                score: stride_score(&predictions),
                predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(usize, f64)> = runs.iter().map(|r| (r.stride, r.score)).collect();
    let stride = choose_stride(&scores).expect("non-empty");
    Ok(StrideSelection { stride, runs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountOptions {
    pub strides: Vec<usize>,
    pub mode: CountMode,
    /// Periodicity threshold used for segment extraction.
    pub segment_threshold: f64,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            strides: DEFAULT_STRIDES.to_vec(),
            mode: CountMode::Always,
            segment_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountResult {
    pub count: f64,
    pub chosen_stride: usize,
    pub stride_scores: Vec<(usize, f64)>,
    /// Predictions at the chosen stride, one per sampled frame.
    pub per_frame: Vec<PerFramePrediction>,
    /// Periodic `[start, end)` ranges in original frame indices.
    pub segments: Vec<(usize, usize)>,
}

pub fn count_repetitions<T: Scalar>(
    params: &ModelParams<T>,
    video: &VideoTensor,
    cfg: &ModelConfig,
    opts: &CountOptions,
) -> Result<CountResult> {
    let selection = select_stride(params, video, &opts.strides, cfg)?;
    let run = selection.chosen();
    let s = run.stride;
    let segments = periodic_segments(&run.predictions, opts.segment_threshold)
        .into_iter()
        .map(|(a, b)| (a * s, (b * s).min(video.num_frames())))
        .collect();
    Ok(CountResult {
        count: count_from_predictions(&run.predictions, opts.mode),
        chosen_stride: s,
        stride_scores: selection.scores(),
        per_frame: run.predictions.clone(),
        segments,
    })
}

/// Maximal runs of frames whose periodicity exceeds `threshold`.
pub fn periodic_segments(preds: &[PerFramePrediction], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, p) in preds.iter().enumerate() {
        match (p.periodicity_prob > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, preds.len()));
    }
    out
}

/// `out[i] = l[i + 1] - l[i]`; negative values mean the motion speeds up.
pub fn speed_profile(preds: &[PerFramePrediction]) -> Result<Vec<i64>> {
    if preds.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "speed profile needs 2 predictions, got {}",
            preds.len()
        )));
    }
    Ok(preds
        .windows(2)
        .map(|w| w[1].period_length as i64 - w[0].period_length as i64)
        .collect())
}

/// Projection of the centered embeddings onto their first principal
/// direction. The sign makes the first clearly nonzero value positive.
pub fn pca_trace<T: Scalar>(embeddings: &EmbeddingSequence<T>) -> Result<Vec<f64>> {
    let m = embeddings.matrix();
    let (n, d) = (m.rows(), m.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs 2 frames, got {n}")));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| m.at(i, j).to_f64_lossy());
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let (top, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("n >= 2");
    let scale = x.norm().max(f64::MIN_POSITIVE);
    if lambda <= 1e-12 * scale * scale {
        return Ok(vec![0.0; n]);
    }
    let mut trace: Vec<f64> = eig.eigenvectors.column(top).iter().map(|u| u * lambda.sqrt()).collect();
    let tol = 1e-9 * trace.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if let Some(first) = trace.iter().find(|v| v.abs() > tol) {
        if *first < 0.0 {
            trace.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(trace)
}
