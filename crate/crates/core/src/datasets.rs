//! Annotation ingestion (Countix-style CSV, QUVA-style directories), multi-annotator
//! aggregation, dataset statistics and a procedural toy corpus.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::interpolate_controls;
use crate::video::{load_video_frames, read_manifest, CountRecord, PeriodLabels, VideoTensor};

// ---------------------------------------------------------------------------
// Countix-style annotations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" | "valid" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountixRecord {
    pub video_id: String,
    pub kinetics_class: String,
    /// Clip window `[start, end]` in seconds.
    pub clip: (f64, f64),
    /// Repetition segment `[start, end]` in seconds, inside the clip window.
    pub repetition: (f64, f64),
    pub count: u32,
    pub split: Split,
}

impl CountixRecord {
    pub fn validate(&self) -> Result<()> {
        let (cs, ce) = self.clip;
        let (rs, re) = self.repetition;
        if !(cs < ce) || !(rs < re) {
            return Err(Error::InvalidInput("segment start must precede end".into()));
        }
        if rs < cs || re > ce {
            return Err(Error::InvalidInput(format!(
                "repetition [{rs}, {re}] outside clip [{cs}, {ce}]"
            )));
        }
        if self.count < 2 {
            return Err(Error::InvalidInput(format!("count {} below 2", self.count)));
        }
        Ok(())
    }
}

pub const COUNTIX_COLUMNS: [&str; 8] = [
    "video_id",
    "class",
    "clip_start",
    "clip_end",
    "rep_start",
    "rep_end",
    "count",
    "split",
];

/// A data row that failed validation; `line` is 1-based including the header.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CountixParse {
    pub records: Vec<CountixRecord>,
    pub invalid: Vec<RowError>,
}

/// Reads a Countix-style CSV. Malformed rows are reported in `invalid`.
pub fn parse_countix(path: &Path) -> Result<CountixParse> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    parse_countix_reader(&mut reader)
}

pub fn parse_countix_str(text: &str) -> Result<CountixParse> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    parse_countix_reader(&mut reader)
}

fn parse_countix_reader<R: std::io::Read>(reader: &mut csv::Reader<R>) -> Result<CountixParse> {
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 8];
    for (slot, name) in index.iter_mut().zip(COUNTIX_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
    }
    let mut out = CountixParse::default();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let parsed = result.map_err(Error::from).and_then(|rec| {
            let field = |k: usize| rec.get(index[k]).unwrap_or("");
            let num = |k: usize| {
                field(k)
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("{} is not a number", COUNTIX_COLUMNS[k])))
            };
            let record = CountixRecord {
                video_id: field(0).to_string(),
                kinetics_class: field(1).to_string(),
                clip: (num(2)?, num(3)?),
                repetition: (num(4)?, num(5)?),
                count: field(6)
                    .parse()
                    .map_err(|_| Error::InvalidInput("count is not an integer".into()))?,
                split: field(7).parse()?,
            };
            record.validate()?;
            Ok(record)
        });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(e) => out.invalid.push(RowError {
                line,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// annotator aggregation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMark {
    pub annotator_id: String,
    pub segment: (f64, f64),
    pub count: u32,
}

impl AnnotatorMark {
    pub fn new(annotator_id: impl Into<String>, segment: (f64, f64), count: u32) -> Result<Self> {
        if !(segment.0 < segment.1) || count < 1 {
            return Err(Error::InvalidInput(format!(
                "mark needs start < end and count >= 1, got {segment:?} / {count}"
            )));
        }
        Ok(Self {
            annotator_id: annotator_id.into(),
            segment,
            count,
        })
    }
}

/// Consensus of three annotator marks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAnnotation {
    pub segment: (f64, f64),
    pub count: u32,
    pub min_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Aggregation {
    Accepted(AggregatedAnnotation),
    Rejected { min_iou: f64 },
}

pub const DEFAULT_IOU_MIN: f64 = 0.5;

/// Temporal intersection-over-union of two `[start, end]` segments.
pub fn segment_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn median3<T: PartialOrd + Copy>(mut v: [T; 3]) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    v[1]
}

/// Rejects the triple when any pair overlaps with IoU below `iou_min`;
/// otherwise takes the per-coordinate median of start, end and count.
pub fn aggregate_annotations(marks: &[AnnotatorMark], iou_min: f64) -> Result<Aggregation> {
    let [a, b, c] = marks else {
        return Err(Error::InvalidInput(format!(
            "expected 3 annotator marks, got {}",
            marks.len()
        )));
    };
    let min_iou = [(a, b), (a, c), (b, c)]
        .iter()
        .map(|(x, y)| segment_iou(x.segment, y.segment))
        .fold(f64::INFINITY, f64::min);
    if min_iou < iou_min {
        return Ok(Aggregation::Rejected { min_iou });
    }
    Ok(Aggregation::Accepted(AggregatedAnnotation {
        segment: (
            median3([a.segment.0, b.segment.0, c.segment.0]),
            median3([a.segment.1, b.segment.1, c.segment.1]),
        ),
        count: median3([a.count, b.count, c.count]),
        min_iou,
    }))
}

// ---------------------------------------------------------------------------
// QUVA-style directories

pub const QUVA_ANNOTATIONS: &str = "annotations.csv";

#[derive(Debug, Deserialize)]
struct QuvaRow {
    filename: String,
    count: u32,
}

/// Reads `annotations.csv` (`filename,count`); every listed video must exist as
/// a frame directory next to it. Records span the whole video.
pub fn load_quva(dir: &Path) -> Result<Vec<CountRecord>> {
    let path = dir.join(QUVA_ANNOTATIONS);
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<QuvaRow>() {
        let row = row?;
        let video_dir = dir.join(&row.filename);
        if !video_dir.is_dir() {
            return Err(Error::NotFound(video_dir));
        }
        let manifest = read_manifest(&video_dir)?;
        let duration = manifest.num_frames as f64 / manifest.fps;
        out.push(CountRecord::new(row.filename, (0.0, duration), row.count)?);
    }
    Ok(out)
}

/// Loads the frames of a QUVA record relative to the dataset directory.
pub fn load_record_video(dir: &Path, record: &CountRecord, target_hw: Option<(usize, usize)>) -> Result<VideoTensor> {
    load_video_frames(&dir.join(&record.video_ref), target_hw)
}

// ---------------------------------------------------------------------------
// statistics

/// Anything that carries a repetition duration and count.
pub trait Annotated {
    fn split(&self) -> Option<Split>;
    fn duration(&self) -> f64;
    fn count(&self) -> u32;
}

impl Annotated for CountixRecord {
    fn split(&self) -> Option<Split> {
        Some(self.split)
    }

    fn duration(&self) -> f64 {
        self.repetition.1 - self.repetition.0
    }

    fn count(&self) -> u32 {
        self.count
    }
}

impl Annotated for CountRecord {
    fn split(&self) -> Option<Split> {
        None
    }

    fn duration(&self) -> f64 {
        CountRecord::duration(self)
    }

    fn count(&self) -> u32 {
        self.count
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_videos: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub duration: Summary,
    pub count: Summary,
}

pub fn dataset_stats<R: Annotated>(records: &[R]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = |s: Split| records.iter().filter(|r| r.split() == Some(s)).count();
    let durations: Vec<f64> = records.iter().map(Annotated::duration).collect();
    let counts: Vec<f64> = records.iter().map(|r| r.count() as f64).collect();
    Ok(DatasetStats {
        num_videos: records.len(),
        train: per(Split::Train),
        val: per(Split::Val),
        test: per(Split::Test),
        duration: Summary::of(&durations),
        count: Summary::of(&counts),
    })
}

// ---------------------------------------------------------------------------
// procedural corpus

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A square whose brightness pulses once per period.
    Blinking,
    /// A blob circling the frame center once per period.
    Orbiting,
    /// A blob swinging left and right once per period.
    Swinging,
    /// Nothing moves.
    Static,
    /// Blobs wandering on random, non-repeating paths.
    Drifting,
}

impl SceneKind {
    pub fn is_periodic(self) -> bool {
        matches!(self, Self::Blinking | Self::Orbiting | Self::Swinging)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProceduralConfig {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub period_range: (usize, usize),
    pub kinds: Vec<SceneKind>,
    pub fps: f64,
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        Self {
            num_frames: 64,
            height: 32,
            width: 32,
            period_range: (2, 32),
            kinds: vec![SceneKind::Blinking, SceneKind::Orbiting, SceneKind::Swinging, SceneKind::Static],
            fps: 30.0,
        }
    }
}

/// `n` toy videos with exactly known per-frame labels.
pub fn procedural_corpus(n: usize, rng: &mut impl Rng, cfg: &ProceduralConfig) -> Result<Vec<(VideoTensor, PeriodLabels)>> {
    if n == 0 || cfg.kinds.is_empty() {
        return Err(Error::InvalidConfig("procedural corpus needs n >= 1 and at least one kind".into()));
    }
    let (lo, hi) = cfg.period_range;
    if lo < 2 || lo > hi {
        return Err(Error::InvalidConfig(format!("invalid period range ({lo}, {hi})")));
    }
    (0..n)
        .map(|_| {
            let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
            let period = rng.random_range(lo..=hi);
            Ok(scene(kind, period as f64, cfg.num_frames, cfg.height, cfg.width, cfg.fps, rng))
        })
        .collect()
}

/// Renders one scene; `period` is ignored for non-periodic kinds. Periodic kinds
/// with an integral period satisfy `v[t] == v[t + period]` exactly.
pub fn scene(
    kind: SceneKind,
    period: f64,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    rng: &mut impl Rng,
) -> (VideoTensor, PeriodLabels) {
    if kind == SceneKind::Drifting {
        let video = drifting_scene(frames, height, width, rng)
            .with_fps(fps)
            .expect("positive fps");
        return (video, PeriodLabels::non_periodic(frames));
    }
    let canvas = Canvas::random(height, width, rng);
    let color = random_color(rng);
    let (h, w) = (height as f64, width as f64);
    let radius = 0.3 * h.min(w);
    let sigma = 0.09 * h.min(w);
    let phase0 = rng.random::<f64>();
    let mut pixels = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        // integral periods use the exact residue so frames repeat bit for bit
        let phase = if period.fract() == 0.0 {
            (t % period as usize) as f64 / period
        } else {
            (t as f64 / period).fract()
        };
        let theta = std::f64::consts::TAU * (phase + phase0);
        let mut frame = canvas.background.clone();
        match kind {
            SceneKind::Blinking => {
                let level = 0.5 - 0.5 * theta.cos();
                canvas.square(&mut frame, h / 2.0, w / 2.0, 0.25 * h.min(w), color, level);
            }
            SceneKind::Orbiting => {
                let (cy, cx) = (h / 2.0 + radius * theta.sin(), w / 2.0 + radius * theta.cos());
                canvas.blob(&mut frame, cy, cx, sigma, color);
            }
            SceneKind::Swinging => {
                let cx = w / 2.0 + radius * theta.sin();
                canvas.blob(&mut frame, h / 2.0, cx, sigma, color);
            }
            SceneKind::Static => {
                canvas.blob(&mut frame, h / 2.0, w / 2.0, sigma, color);
            }
            SceneKind::Drifting => unreachable!("drifting scenes are rendered by drifting_scene"),
        }
        pixels.extend(frame);
    }
    let pixels = pixels.into_iter().map(|v| v as f32).collect();
    let video = VideoTensor::new(frames, height, width, fps, pixels).expect("rendered frames are valid");
    let labels = if kind.is_periodic() {
        let p = period.round() as u32;
        PeriodLabels::from_periods(vec![p; frames]).expect("period >= 2")
    } else {
        PeriodLabels::non_periodic(frames)
    };
    (video, labels)
}

/// Non-repeating footage: textured background with a slow global tint drift and
/// four blobs jumping along independent random piecewise-linear paths. Used as raw
/// material for synthetic repetitions.
pub fn drifting_scene(frames: usize, height: usize, width: usize, rng: &mut impl Rng) -> VideoTensor {
    let canvas = Canvas::random(height, width, rng);
    let (h, w) = (height as f64, width as f64);
    let interval = 3;
    let points = frames.saturating_sub(1).div_ceil(interval) + 1;
    let mut path = |extent: f64| {
        let controls: Vec<f64> = (0..points)
            .map(|_| rng.random_range(0.15 * extent..=0.85 * extent))
            .collect();
        interpolate_controls(&controls, interval, frames)
    };
    let blobs: Vec<(Vec<f64>, Vec<f64>)> = (0..4).map(|_| (path(h), path(w))).collect();
    let colors: Vec<[f64; 3]> = (0..4).map(|_| random_color(rng)).collect();
    let tint = random_color(rng);
    let sigma = 0.08 * h.min(w);
    let mut pixels = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        let drift = 0.25 * t as f64 / frames.max(1) as f64;
        let mut frame: Vec<f64> = canvas
            .background
            .chunks(3)
            .flat_map(|px| (0..3).map(move |c| px[c] * (1.0 - drift) + tint[c] * drift))
            .collect();
        for ((ys, xs), color) in blobs.iter().zip(&colors) {
            canvas.blob(&mut frame, ys[t], xs[t], sigma, *color);
        }
        pixels.extend(frame);
    }
    VideoTensor::new(frames, height, width, 30.0, pixels.into_iter().map(|v| v as f32).collect())
        .expect("rendered frames are valid")
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    let mut color = [
        rng.random_range(0.55..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..0.45),
    ];
    color.rotate_left(rng.random_range(0..3));
    color
}

struct Canvas {
    height: usize,
    width: usize,
    /// `[H, W, 3]` in `[0, 0.6]`.
    background: Vec<f64>,
}

impl Canvas {
    /// Low-frequency sinusoidal texture with a random palette.
    fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()],
                )
            })
            .collect();
        let base = [rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)];
        let mut background = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (y as f64 / height as f64, x as f64 / width as f64);
                for c in 0..3 {
                    let mut val = base[c];
                    for (fy, fx, ph, amp) in &waves {
                        let s = (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin();
                        val += 0.1 * amp[c] * s;
                    }
                    background.push(val.clamp(0.0, 0.6));
                }
            }
        }
        Self {
            height,
            width,
            background,
        }
    }

    fn blob(&self, frame: &mut [f64], cy: f64, cx: f64, sigma: f64, color: [f64; 3]) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..self.height {
            for x in 0..self.width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let a = (-d2 * inv).exp();
                if a < 1e-6 {
                    continue;
                }
                let px = &mut frame[(y * self.width + x) * 3..][..3];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }

    fn square(&self, frame: &mut [f64], cy: f64, cx: f64, half: f64, color: [f64; 3], level: f64) {
        for y in 0..self.height {
            for x in 0..self.width {
                // soft edge one pixel wide
                let dy = ((y as f64 - cy).abs() - half).max(0.0);
                let dx = ((x as f64 - cx).abs() - half).max(0.0);
                let a = level * (1.0 - dy.max(dx)).clamp(0.0, 1.0);
                if a == 0.0 {
                    continue;
                }
                let px = &mut frame[(y * self.width + x) * 3..][..3];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}
