//! Synthetic repetition videos built from arbitrary source footage, plus
//! temporally smooth camera-motion augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{PeriodLabels, VideoTensor};

/// Which transforms the generator may apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionFlags {
    pub rotation: bool,
    pub translation: bool,
    pub scale: bool,
    pub reversal: bool,
}

impl Default for MotionFlags {
    fn default() -> Self {
        Self {
            rotation: true,
            translation: true,
            scale: true,
            reversal: true,
        }
    }
}

/// Parameters of [`synthesize_repetition`]. Ranges are inclusive `(lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Clip length `P` in frames.
    pub period_range: (usize, usize),
    /// Repetition count `K`.
    pub count_range: (usize, usize),
    pub reversal_prob: f64,
    pub prepad_range: (usize, usize),
    pub postpad_range: (usize, usize),
    /// Probability that a sample receives camera motion.
    pub aug_fraction: f64,
    pub motion: MotionFlags,
    /// Longest repeated unit the model can label (`N / 2`).
    pub max_period: usize,
    /// When set, `K` and the pads are chosen so the output has exactly this many
    /// frames; the trailing pad absorbs the remainder.
    pub target_len: Option<usize>,
    /// Rotation bound in radians (track range is `[-max, max]`).
    pub max_angle: f64,
    /// Translation bound as a fraction of the frame size.
    pub max_translation: f64,
    /// Bound on the natural log of the zoom factor.
    pub max_log_scale: f64,
    /// Frames between random control points of a motion track.
    pub control_interval: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            period_range: (2, 32),
            count_range: (2, 32),
            reversal_prob: 0.5,
            prepad_range: (0, 16),
            postpad_range: (0, 16),
            aug_fraction: 0.5,
            motion: MotionFlags::default(),
            max_period: 32,
            target_len: Some(64),
            max_angle: 0.25,
            max_translation: 0.1,
            max_log_scale: 0.15,
            control_interval: 16,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, (lo, hi)) in [
            ("period_range", self.period_range),
            ("count_range", self.count_range),
            ("prepad_range", self.prepad_range),
            ("postpad_range", self.postpad_range),
        ] {
            if lo > hi {
                return bad(format!("{name} is empty: ({lo}, {hi})"));
            }
        }
        if self.period_range.0 < 2 {
            return bad("period_range minimum must be at least 2".into());
        }
        if self.count_range.0 < 2 {
            return bad("count_range minimum must be at least 2".into());
        }
        if self.max_period < 2 {
            return bad("max_period must be at least 2".into());
        }
        if self.period_range.0 > self.max_period {
            return bad(format!(
                "shortest period {} exceeds max_period {}",
                self.period_range.0, self.max_period
            ));
        }
        if self.period_range.1 > 2 * self.max_period {
            return bad(format!(
                "longest period {} exceeds twice max_period {}",
                self.period_range.1, self.max_period
            ));
        }
        for (name, p) in [("reversal_prob", self.reversal_prob), ("aug_fraction", self.aug_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.control_interval == 0 {
            return bad("control_interval must be positive".into());
        }
        if self.max_angle < 0.0 || self.max_translation < 0.0 || self.max_log_scale < 0.0 {
            return bad("motion bounds must be non-negative".into());
        }
        Ok(())
    }

    /// Source frames required by the worst-case draw.
    pub fn min_source_frames(&self) -> usize {
        match self.target_len {
            Some(t) => t.max(self.period_range.1.min(self.max_period) + self.prepad_range.1),
            None => self.period_range.1.min(self.max_period) + self.prepad_range.1 + self.postpad_range.1,
        }
    }
}

/// Per-frame affine camera parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTrack {
    /// Radians, counter-clockwise about the frame center.
    pub angle: Vec<f64>,
    /// Pixels.
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
    /// Natural log of the zoom factor.
    pub log_scale: Vec<f64>,
}

impl AffineTrack {
    pub fn identity(n: usize) -> Self {
        Self {
            angle: vec![0.0; n],
            tx: vec![0.0; n],
            ty: vec![0.0; n],
            log_scale: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.angle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angle.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        [&self.angle, &self.tx, &self.ty, &self.log_scale]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// Draws smooth tracks for every enabled motion type; disabled ones stay at identity.
    pub fn random(n: usize, height: usize, width: usize, cfg: &SynthesisConfig, rng: &mut impl Rng) -> Result<Self> {
        let ci = cfg.control_interval;
        let sym = |b: f64| (-b, b);
        let mut track = Self::identity(n);
        if cfg.motion.rotation {
            track.angle = smooth_track(n, sym(cfg.max_angle), ci, rng)?;
        }
        if cfg.motion.translation {
            track.tx = smooth_track(n, sym(cfg.max_translation * width as f64), ci, rng)?;
            track.ty = smooth_track(n, sym(cfg.max_translation * height as f64), ci, rng)?;
        }
        if cfg.motion.scale {
            track.log_scale = smooth_track(n, sym(cfg.max_log_scale), ci, rng)?;
        }
        Ok(track)
    }
}

/// Linear interpolation through control values placed every `interval` frames.
pub fn interpolate_controls(controls: &[f64], interval: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let seg = t / interval;
            let frac = (t % interval) as f64 / interval as f64;
            let a = controls[seg];
            if frac == 0.0 {
                a
            } else {
                a + (controls[seg + 1] - a) * frac
            }
        })
        .collect()
}

/// A random piecewise-linear track in `[lo, hi]`: control values are drawn
/// uniformly every `control_interval` frames and linearly interpolated, so
/// consecutive values differ by at most `(hi - lo) / control_interval`.
pub fn smooth_track(n: usize, bounds: (f64, f64), control_interval: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let (lo, hi) = bounds;
    if n == 0 || control_interval == 0 || !(lo <= hi) {
        return Err(Error::InvalidConfig(format!(
            "smooth_track needs n >= 1, interval >= 1, lo <= hi (got {n}, {control_interval}, [{lo}, {hi}])"
        )));
    }
    let points = (n - 1).div_ceil(control_interval) + 1;
    let controls: Vec<f64> = (0..points)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect();
    Ok(interpolate_controls(&controls, control_interval, n))
}

/// Warps every frame by its affine parameters: rotate about the center, zoom by
/// `exp(log_scale)`, then translate. Samples outside the frame replicate the edge.
pub fn apply_camera_motion(video: &VideoTensor, track: &AffineTrack) -> Result<VideoTensor> {
    let n = video.num_frames();
    if [track.angle.len(), track.tx.len(), track.ty.len(), track.log_scale.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::ShapeMismatch(format!(
            "track of length {} for {n} frames",
            track.len()
        )));
    }
    let (h, w) = (video.height(), video.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(video.pixels().len());
    for t in 0..n {
        let src = video.frame(t);
        let (sin, cos) = track.angle[t].sin_cos();
        let inv_scale = (-track.log_scale[t]).exp();
        for y in 0..h {
            for x in 0..w {
                // inverse map: p = c + R(-θ) (p' - c - t) / s
                let dx = x as f64 - cx - track.tx[t];
                let dy = y as f64 - cy - track.ty[t];
                let sx = cx + (cos * dx + sin * dy) * inv_scale;
                let sy = cy + (-sin * dx + cos * dy) * inv_scale;
                bilinear_clamped(src, h, w, sy, sx, &mut out);
            }
        }
    }
    VideoTensor::new(n, h, w, video.fps(), out)
}

fn bilinear_clamped(src: &[f32], h: usize, w: usize, y: f64, x: f64, out: &mut Vec<f32>) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    for c in 0..3 {
        let at = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
    }
}

/// Describes how a [`SynthesizedSample`] was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Length of the repeated unit (`P`, or `2P` with reversal).
    pub period: usize,
    /// Length of the sampled clip `P`.
    pub clip_len: usize,
    /// Number of unit repetitions `K`.
    pub count: usize,
    pub reversed: bool,
    pub prepad: usize,
    pub postpad: usize,
    /// Index of the clip's first frame in the source video.
    pub clip_start: usize,
    pub augmented: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    pub video: VideoTensor,
    pub labels: PeriodLabels,
    pub meta: SampleMeta,
    pub track: AffineTrack,
}

/// Builds `prepad ++ unit^K ++ postpad` from a source video, where `unit` is a
/// clip `C` or `reverse(C) ++ C`. Frames inside the repeated span are labeled
/// with the unit length; pad frames are non-periodic.
pub fn synthesize_repetition(source: &VideoTensor, cfg: &SynthesisConfig, rng: &mut impl Rng) -> Result<SynthesizedSample> {
    cfg.validate()?;
    let avail = source.num_frames();

    let reversed = cfg.motion.reversal
        && 2 * cfg.period_range.0 <= cfg.max_period
        && rng.random_bool(cfg.reversal_prob);
    let unit_factor = if reversed { 2 } else { 1 };
    let p_hi = cfg.period_range.1.min(cfg.max_period / unit_factor);
    let clip_len = rng.random_range(cfg.period_range.0..=p_hi);
    let unit = clip_len * unit_factor;

    let (count, prepad, postpad) = match cfg.target_len {
        None => (
            rng.random_range(cfg.count_range.0..=cfg.count_range.1),
            rng.random_range(cfg.prepad_range.0..=cfg.prepad_range.1),
            rng.random_range(cfg.postpad_range.0..=cfg.postpad_range.1),
        ),
        Some(target) => {
            let room = target
                .checked_sub(cfg.prepad_range.0 + cfg.postpad_range.0)
                .unwrap_or(0);
            let k_hi = cfg.count_range.1.min(room / unit);
            if k_hi < cfg.count_range.0 {
                return Err(Error::InvalidConfig(format!(
                    "target length {target} cannot hold {} repetitions of {unit} frames",
                    cfg.count_range.0
                )));
            }
            let count = rng.random_range(cfg.count_range.0..=k_hi);
            let pre_hi = cfg
                .prepad_range
                .1
                .min(target - unit * count - cfg.postpad_range.0);
            let prepad = rng.random_range(cfg.prepad_range.0..=pre_hi);
            (count, prepad, target - unit * count - prepad)
        }
    };

    let needed = prepad + clip_len + postpad;
    if avail < needed {
        return Err(Error::InsufficientFrames {
            needed,
            available: avail,
        });
    }
    let clip_start = rng.random_range(prepad..=avail - clip_len - postpad);

    let mut indices = Vec::with_capacity(prepad + unit * count + postpad);
    indices.extend(clip_start - prepad..clip_start);
    let clip: Vec<usize> = (clip_start..clip_start + clip_len).collect();
    let mut unit_idx: Vec<usize> = Vec::with_capacity(unit);
    if reversed {
        unit_idx.extend(clip.iter().rev());
    }
    unit_idx.extend(&clip);
    for _ in 0..count {
        indices.extend(&unit_idx);
    }
    indices.extend(clip_start + clip_len..clip_start + clip_len + postpad);

    let mut video = source.select(&indices)?;
    let mut periods = vec![0u32; indices.len()];
    for p in &mut periods[prepad..prepad + unit * count] {
        *p = unit as u32;
    }
    let labels = PeriodLabels::from_periods(periods)?;

    let any_motion = cfg.motion.rotation || cfg.motion.translation || cfg.motion.scale;
    let augmented = any_motion && cfg.aug_fraction > 0.0 && rng.random_bool(cfg.aug_fraction);
    let track = if augmented {
        let track = AffineTrack::random(video.num_frames(), video.height(), video.width(), cfg, rng)?;
        video = apply_camera_motion(&video, &track)?;
        track
    } else {
        AffineTrack::identity(video.num_frames())
    };

    Ok(SynthesizedSample {
        video,
        labels,
        meta: SampleMeta {
            period: unit,
            clip_len,
            count,
            reversed,
            prepad,
            postpad,
            clip_start,
            augmented,
        },
        track,
    })
}
