//! Batch assembly, the Adam training loop, checkpoints and gradient checking.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, IoContext, Result};
use crate::model::checkpoint::{config_sidecar, read_arrays, write_arrays, write_config};
use crate::model::{build_forward, build_loss, window_tensor, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::synth::{synthesize_repetition, SynthesisConfig};
use crate::tensor::Tensor;
use crate::video::{sample_window, CountRecord, FrameWindow, PadPolicy, PeriodLabels, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMix {
    Synthetic,
    Real,
    #[serde(alias = "synthetic+real")]
    SyntheticReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_videos: usize,
    pub data_mix: DataMix,
    /// Share of synthetic samples that receive camera motion.
    pub aug_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Probability of drawing a real clip when mixing sources.
    pub real_fraction: f64,
    /// Parameters whose name contains any of these substrings are not updated.
    pub frozen: Vec<String>,
    /// Write a log row every this many steps.
    pub log_every: usize,
    /// Largest frame stride used when windowing fixed videos.
    pub max_window_stride: usize,
    pub synthesis: SynthesisConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-6,
            steps: 5000,
            batch_videos: 5,
            data_mix: DataMix::Synthetic,
            aug_fraction: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            real_fraction: 0.5,
            frozen: vec![".bn.".into()],
            log_every: 1,
            max_window_stride: 1,
            synthesis: SynthesisConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Step count and batch size of the original large-scale schedule.
    pub fn large_scale() -> Self {
        Self {
            steps: 400_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_videos == 0 {
            return Err(Error::InvalidConfig("batch_videos must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.aug_fraction) || !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::InvalidConfig("fractions must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        if self.log_every == 0 || self.max_window_stride == 0 {
            return Err(Error::InvalidConfig("log_every and max_window_stride must be at least 1".into()));
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|f| name.contains(f.as_str()))
    }
}

/// One training example: an `N`-frame window and its per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: FrameWindow,
    pub labels: PeriodLabels,
    pub augmented: bool,
}

impl Sample {
    /// Wraps a whole video of exactly `N` frames.
    pub fn from_video(video: VideoTensor, labels: PeriodLabels) -> Result<Self> {
        let n = video.num_frames();
        let window = sample_window(&video, 0, 1, n, PadPolicy::Reject)?;
        labels.validate()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{} labels for {n} frames", labels.len())));
        }
        Ok(Self {
            window,
            labels,
            augmented: false,
        })
    }
}

/// A real video with its count annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct RealClip {
    pub video: VideoTensor,
    pub record: CountRecord,
}

/// A video with exact per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub video: VideoTensor,
    pub labels: PeriodLabels,
}

impl LabeledVideo {
    pub fn new(video: VideoTensor, labels: PeriodLabels) -> Result<Self> {
        labels.validate()?;
        if labels.len() != video.num_frames() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} frames",
                labels.len(),
                video.num_frames()
            )));
        }
        Ok(Self { video, labels })
    }

    /// A random `n`-frame window at stride 1 with the matching labels.
    pub fn random_window(&self, n: usize, rng: &mut impl Rng) -> Result<Sample> {
        self.random_strided_window(n, 1, rng)
    }

    /// Strides usable for `n`-frame windows: every period divides evenly and
    /// stays at least 2 sampled frames long.
    pub fn window_strides(&self, n: usize, max_stride: usize) -> Vec<usize> {
        let len = self.video.num_frames();
        (1..=max_stride)
            .filter(|&s| (n - 1) * s < len)
            .filter(|&s| {
                self.labels
                    .period_length
                    .iter()
                    .all(|&l| l == 0 || (l as usize % s == 0 && l as usize / s >= 2))
            })
            .collect()
    }

    /// A random window at a random admissible stride up to `max_stride`, with
    /// period labels expressed in sampled frames.
    pub fn random_strided_window(&self, n: usize, max_stride: usize, rng: &mut impl Rng) -> Result<Sample> {
        let len = self.video.num_frames();
        if len < n {
            return Err(Error::InsufficientFrames { needed: n, available: len });
        }
        let strides = self.window_strides(n, max_stride);
        let stride = *strides.choose(rng).unwrap_or(&1);
        let start = rng.random_range(0..=len - 1 - (n - 1) * stride);
        let indices: Vec<usize> = (0..n).map(|i| start + i * stride).collect();
        let mut labels = self.labels.select(&indices);
        for l in &mut labels.period_length {
            *l /= stride as u32;
        }
        Ok(Sample {
            window: sample_window(&self.video, start, stride, n, PadPolicy::Reject)?,
            labels,
            augmented: false,
        })
    }
}

/// Where training samples come from. A non-empty `fixed` set overrides the
/// other sources; each draw takes a random window of a random fixed video.
#[derive(Clone, Debug, Default)]
pub struct DataSources {
    /// Unlabeled footage that synthetic repetitions are cut from.
    pub footage: Vec<VideoTensor>,
    pub real: Vec<RealClip>,
    pub fixed: Vec<LabeledVideo>,
}

pub fn make_batch(
    sources: &DataSources,
    cfg: &TrainConfig,
    model: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    if !sources.fixed.is_empty() {
        return (0..cfg.batch_videos)
            .map(|_| {
                let v = sources.fixed.choose(rng).expect("non-empty");
                let mut sample = v.random_strided_window(model.n_frames, cfg.max_window_stride, rng)?;
                sample.window.frames = fit_frames(sample.window.frames, model)?;
                Ok(sample)
            })
            .collect();
    }
    let synth_cfg = SynthesisConfig {
        aug_fraction: cfg.aug_fraction,
        max_period: model.period_classes,
        target_len: Some(model.n_frames),
        ..cfg.synthesis.clone()
    };
    let mut batch = Vec::with_capacity(cfg.batch_videos);
    for _ in 0..cfg.batch_videos {
        let use_real = match cfg.data_mix {
            DataMix::Synthetic => false,
            DataMix::Real => true,
            DataMix::SyntheticReal => rng.random_bool(cfg.real_fraction),
        };
        let sample = if use_real {
            let clip = sources.real.choose(rng).ok_or(Error::EmptyDataset)?;
            real_sample(clip, model, rng)?
        } else {
            let footage = sources.footage.choose(rng).ok_or(Error::EmptyDataset)?;
            let s = synthesize_repetition(footage, &synth_cfg, rng)?;
            let video = fit_frames(s.video, model)?;
            let mut sample = Sample::from_video(video, s.labels)?;
            sample.augmented = s.meta.augmented;
            sample
        };
        batch.push(sample);
    }
    Ok(batch)
}

fn fit_frames(video: VideoTensor, model: &ModelConfig) -> Result<VideoTensor> {
    let (h, w) = model.input_hw;
    if (video.height(), video.width()) == (h, w) {
        Ok(video)
    } else {
        video.resize(h, w)
    }
}

/// Period of a real clip in source frames, assuming uniform repetitions.
pub fn uniform_period(record: &CountRecord, fps: f64) -> f64 {
    record.duration() * fps / record.count as f64
}

/// Cuts an `N`-frame window around the annotated segment of a real clip.
/// The stride is the smallest one that brings the period within the class
/// range; frames outside the segment (and tail padding) are non-periodic.
pub fn real_sample(clip: &RealClip, model: &ModelConfig, rng: &mut impl Rng) -> Result<Sample> {
    let video = &clip.video;
    let n = model.n_frames;
    let fps = video.fps();
    let period = uniform_period(&clip.record, fps);
    if period < 2.0 {
        return Err(Error::InvalidLabel(format!(
            "period of {period:.2} frames is below the minimum of 2"
        )));
    }
    let stride = (period / model.period_classes as f64).ceil().max(1.0) as usize;
    let label = (period / stride as f64).round() as u32;
    let label = label.clamp(2, model.period_classes as u32);
    let last = video.num_frames() - 1;
    let seg_start = ((clip.record.segment.0 * fps).round() as usize).min(last);
    let seg_end = ((clip.record.segment.1 * fps).round() as usize).clamp(seg_start + 1, last + 1);
    let span = n * stride;
    let seg_len = seg_end - seg_start;
    let start = if seg_len >= span {
        rng.random_range(seg_start..=seg_end - span)
    } else {
        let lead = rng.random_range(0..=(span - seg_len).min(seg_start));
        seg_start - lead
    };
    let window = sample_window(video, start, stride, n, PadPolicy::RepeatLast)?;
    let (period_length, periodicity): (Vec<u32>, Vec<bool>) = window
        .source_indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let inside = k < window.valid_len && (seg_start..seg_end).contains(&i);
            if inside {
                (label, true)
            } else {
                (0, false)
            }
        })
        .unzip();
    let labels = PeriodLabels::new(period_length, periodicity)?;
    let window = FrameWindow {
        frames: fit_frames(window.frames, model)?,
        ..window
    };
    Ok(Sample {
        window,
        labels,
        augmented: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub period_loss: f64,
    pub periodicity_loss: f64,
    pub total: f64,
}

/// Trained parameters with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub step: usize,
    pub config: ModelConfig,
    pub history: Vec<LossRecord>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            params: self.params.cast(),
            step: self.step,
            config: self.config.clone(),
            history: self.history.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    config: ModelConfig,
    history: Vec<LossRecord>,
}

/// Writes the array file and a `<path>.config.json` sidecar.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        step: ckpt.step,
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
    };
    write_arrays(path, ckpt.params.arrays(), serde_json::to_value(meta)?)?;
    write_config(&config_sidecar(path), &ckpt.config)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let (arrays, meta) = read_arrays(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::CorruptCheckpoint(format!("bad metadata: {e}")))?;
    let params = ModelParams::from_arrays(arrays)?;
    params.check_config(&meta.config)?;
    Ok(Checkpoint {
        params,
        step: meta.step,
        config: meta.config,
        history: meta.history,
    })
}

/// Loads a checkpoint that must fit `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint<f32>> {
    let ckpt = load_checkpoint(path)?;
    ckpt.params.check_config(cfg)?;
    Ok(ckpt)
}

struct SampleGrad<T> {
    record: [f64; 3],
    grads: IndexMap<String, Tensor<T>>,
}

fn sample_gradient<T: Scalar>(params: &ModelParams<T>, sample: &Sample, cfg: &ModelConfig) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let x = g.input(window_tensor(&sample.window, cfg)?);
    let o = build_forward(&mut g, x, params, cfg, None);
    let l = build_loss(&mut g, o.period_logits, o.periodicity_logits, &sample.labels, cfg)?;
    let v = |var| g.value(var).data()[0].to_f64_lossy();
    let record = [v(l.period), v(l.periodicity), v(l.total)];
    let grads = if record[2].is_finite() {
        g.backward(l.total).into_params()
    } else {
        IndexMap::new()
    };
    Ok(SampleGrad { record, grads })
}

/// Batch-mean losses and gradients. Per-sample work may run in parallel; the
/// reduction is always in sample order.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Sample],
    cfg: &ModelConfig,
) -> Result<(LossRecord, IndexMap<String, Tensor<T>>)> {
    let parts: Vec<SampleGrad<T>> = batch
        .par_iter()
        .map(|s| sample_gradient(params, s, cfg))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut sums = [0.0; 3];
    let mut total: IndexMap<String, Tensor<T>> = IndexMap::new();
    for part in parts {
        for (s, r) in sums.iter_mut().zip(part.record) {
            *s += r;
        }
        for (name, g) in part.grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let t = T::from_f64_lossy(scale);
    for g in total.values_mut() {
        g.scale_in_place(t);
    }
    Ok((
        LossRecord {
            step: 0,
            period_loss: sums[0] * scale,
            periodicity_loss: sums[1] * scale,
            total: sums[2] * scale,
        },
        total,
    ))
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update; arrays for which `skip` returns true are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &IndexMap<String, Tensor<T>>, skip: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64_lossy(self.lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for (name, p) in params.iter_mut() {
            if skip(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

pub const LOG_HEADER: &str = "step,period_loss,periodicity_loss,total";

/// Runs `cfg.steps` Adam updates. Batches are drawn from an RNG seeded with
/// `cfg.seed`; results do not depend on the number of worker threads.
pub fn train<T: Scalar>(
    params: ModelParams<T>,
    sources: &DataSources,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    model.validate()?;
    params.check_config(model)?;
    let mut log = match log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
            writeln!(f, "{LOG_HEADER}").at(path)?;
            Some((f, path.to_path_buf()))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut ckpt = Checkpoint {
        params,
        step: 0,
        config: model.clone(),
        history: Vec::new(),
    };
    for step in 1..=cfg.steps {
        let batch = make_batch(sources, cfg, model, &mut rng)?;
        let (mut record, grads) = batch_gradient(&ckpt.params, &batch, model)?;
        record.step = step;
        let finite = record.total.is_finite() && grads.values().all(Tensor::is_finite);
        if !finite {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(ckpt.cast()),
            });
        }
        adam.step(&mut ckpt.params, &grads, |n| cfg.is_frozen(n));
        ckpt.step = step;
        ckpt.history.push(record);
        if let Some((f, path)) = log.as_mut() {
            if step % cfg.log_every == 0 || step == cfg.steps {
                writeln!(
                    f,
                    "{},{},{},{}",
                    record.step, record.period_loss, record.periodicity_loss, record.total
                )
                .at(path.as_path())?;
            }
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.5}", record.total);
        }
    }
    if let Some((mut f, path)) = log {
        f.flush().at(path)?;
    }
    Ok(ckpt)
}

/// One compared gradient entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The two probes landed on different sides of a ReLU or max, so the
    /// central difference does not estimate the derivative.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    /// Largest relative error over entries that crossed no kink.
    pub max_rel_error: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheck {
    pub fn smooth_entries(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| !e.kink)
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().filter(|e| e.kink).count()
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Mean batch loss and the branch signature of every sample.
fn batch_loss(params: &ModelParams<f64>, batch: &[Sample], cfg: &ModelConfig) -> Result<(f64, Vec<u64>)> {
    let mut total = 0.0;
    let mut signature = Vec::with_capacity(batch.len());
    for s in batch {
        let mut g = Graph::inference().with_branch_tracking();
        let x = g.input(window_tensor(&s.window, cfg)?);
        let o = build_forward(&mut g, x, params, cfg, None);
        let l = build_loss(&mut g, o.period_logits, o.periodicity_logits, &s.labels, cfg)?;
        total += g.value(l.total).data()[0];
        signature.push(g.branch_signature().expect("tracking enabled"));
    }
    Ok((total / batch.len() as f64, signature))
}

/// Compares analytic gradients of the batch loss with central differences on
/// `per_array` randomly chosen entries of every parameter array. Entries whose
/// probes straddle a kink are flagged and left out of the maximum.
pub fn grad_check(
    params: &ModelParams<f64>,
    batch: &[Sample],
    cfg: &ModelConfig,
    eps: f64,
    per_array: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, grads) = batch_gradient(params, batch, cfg)?;
    let mut probe = params.clone();
    let mut entries = Vec::new();
    let names: Vec<String> = params.arrays().keys().cloned().collect();
    for name in names {
        let len = params.get(&name).len();
        let picks: Vec<usize> = if len <= per_array {
            (0..len).collect()
        } else {
            (0..per_array).map(|_| rng.random_range(0..len)).collect()
        };
        for index in picks {
            let original = params.get(&name).data()[index];
            let mut eval = |v: f64| {
                probe.get_mut(&name).expect("known name").data_mut()[index] = v;
                batch_loss(&probe, batch, cfg)
            };
            let (plus, sig_plus) = eval(original + eps)?;
            let (minus, sig_minus) = eval(original - eps)?;
            probe.get_mut(&name).expect("known name").data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[index]);
            entries.push(GradEntry {
                name: name.clone(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
                kink: sig_plus != sig_minus,
            });
        }
    }
    let max_rel_error = entries
        .iter()
        .filter(|e| !e.kink)
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, entries })
}
