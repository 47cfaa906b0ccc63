//! Frame-level video representation, windowed sampling and lossless frame I/O.
//!
//! Pixel intensities are `f32` in `[0, 1]` and always lie on the 16-bit lattice
//! `k / 65535`. Frame directories store 16-bit RGB PNGs, so writing and
//! reading back any [`VideoTensor`] reproduces it bit for bit.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const LEVELS: f32 = 65535.0;

/// Snaps an intensity onto the 16-bit storage lattice.
#[inline]
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * LEVELS).round() / LEVELS
}

#[inline]
fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * LEVELS).round() as u16
}

/// An ordered, non-empty sequence of equally sized RGB frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    num_frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    /// `[N, H, W, 3]`, row-major.
    pixels: Vec<f32>,
}

impl VideoTensor {
    /// Builds a video from `[N, H, W, 3]` pixels. Values must be finite and in
    /// `[0, 1]`; they are snapped to the 16-bit lattice.
    pub fn new(num_frames: usize, height: usize, width: usize, fps: f64, mut pixels: Vec<f32>) -> Result<Self> {
        if num_frames == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "video needs at least one non-empty frame, got {num_frames}x{height}x{width}"
            )));
        }
        if pixels.len() != num_frames * height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} pixel values for a {num_frames}x{height}x{width}x3 video",
                pixels.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be positive, got {fps}")));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [0, 1]")));
        }
        for v in &mut pixels {
            *v = quantize(*v);
        }
        Ok(Self {
            num_frames,
            height,
            width,
            fps,
            pixels,
        })
    }

    /// Concatenates individual `[H, W, 3]` frames.
    pub fn from_frames(frames: &[Vec<f32>], height: usize, width: usize, fps: f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(frames.len() * height * width * 3);
        for (i, f) in frames.iter().enumerate() {
            if f.len() != height * width * 3 {
                return Err(Error::ShapeMismatch(format!("frame {i} has {} values", f.len())));
            }
            pixels.extend_from_slice(f);
        }
        Self::new(frames.len(), height, width, fps, pixels)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn with_fps(mut self, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be positive, got {fps}")));
        }
        self.fps = fps;
        Ok(self)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// Pixels of frame `i` as `[H, W, 3]`.
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Value at frame `t`, row `y`, column `x`, channel `c`.
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[((t * self.height + y) * self.width + x) * 3 + c]
    }

    /// Builds a new video from the frames at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::OutOfRange("empty frame selection".into()));
        }
        let mut pixels = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.num_frames {
                return Err(Error::OutOfRange(format!("frame {i} of {}", self.num_frames)));
            }
            pixels.extend_from_slice(self.frame(i));
        }
        Ok(Self {
            num_frames: indices.len(),
            pixels,
            ..*self
        })
    }

    /// Contiguous frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(&idx)
    }

    /// Frames of `self` followed by frames of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch("frame sizes differ".into()));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        Ok(Self {
            num_frames: self.num_frames + other.num_frames,
            pixels,
            ..*self
        })
    }

    /// Bilinear resize of every frame (half-pixel centers, edge clamped).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("resize to an empty frame".into()));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let mut pixels = Vec::with_capacity(self.num_frames * height * width * 3);
        for t in 0..self.num_frames {
            resize_frame(self.frame(t), self.height, self.width, height, width, &mut pixels);
        }
        Self::new(self.num_frames, height, width, self.fps, pixels)
    }

    /// Model input layout `[N, 3, H, W]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.pixels.len());
        for t in 0..self.num_frames {
            let f = self.frame(t);
            for c in 0..3 {
                for p in 0..h * w {
                    data.push(T::from_f64_lossy(f[p * 3 + c] as f64));
                }
            }
        }
        Tensor::from_parts(vec![self.num_frames, 3, h, w], data)
    }
}

fn resize_frame(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize, out: &mut Vec<f32>) {
    let sy = sh as f32 / dh as f32;
    let sx = sw as f32 / dw as f32;
    let coord = |o: usize, scale: f32, extent: usize| {
        let p = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f32);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, p - lo as f32)
    };
    for oy in 0..dh {
        let (y0, y1, fy) = coord(oy, sy, sh);
        for ox in 0..dw {
            let (x0, x1, fx) = coord(ox, sx, sw);
            for c in 0..3 {
                let at = |y: usize, x: usize| src[(y * sw + x) * 3 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
}

/// How [`sample_window`] handles a window running past the last frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    RepeatLast,
    Reject,
}

/// `n` frames sampled at a fixed stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWindow {
    pub frames: VideoTensor,
    /// Original index of every sampled frame; clamped to the last frame under padding.
    pub source_indices: Vec<usize>,
    pub stride: usize,
    /// Number of leading frames that are real samples rather than padding.
    pub valid_len: usize,
}

impl FrameWindow {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

/// Samples `n` frames starting at `start` every `stride` frames.
pub fn sample_window(video: &VideoTensor, start: usize, stride: usize, n: usize, pad: PadPolicy) -> Result<FrameWindow> {
    if stride == 0 || n == 0 {
        return Err(Error::InvalidInput(format!("stride {stride} and n {n} must be positive")));
    }
    let last = video.num_frames() - 1;
    if start > last {
        return Err(Error::OutOfRange(format!("start {start} past frame {last}")));
    }
    let mut indices = Vec::with_capacity(n);
    let mut valid_len = 0;
    for k in 0..n {
        let idx = start + k * stride;
        if idx <= last {
            indices.push(idx);
            valid_len += 1;
        } else if pad == PadPolicy::RepeatLast {
            indices.push(last);
        } else {
            return Err(Error::OutOfRange(format!(
                "window needs frame {idx}, video has {}",
                video.num_frames()
            )));
        }
    }
    Ok(FrameWindow {
        frames: video.select(&indices)?,
        source_indices: indices,
        stride,
        valid_len,
    })
}

/// Contents of `manifest.json` in a frame directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_frames: usize,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

/// Writes one 16-bit RGB PNG per frame plus `manifest.json`.
pub fn write_video_frames(video: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let (h, w) = (video.height() as u32, video.width() as u32);
    for t in 0..video.num_frames() {
        let raw: Vec<u16> = video.frame(t).iter().map(|&v| to_u16(v)).collect();
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w, h, raw).expect("frame buffer matches dimensions");
        let path = dir.join(frame_file_name(t));
        img.save(&path).map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io { path, source },
            other => Error::Image(other),
        })?;
    }
    let manifest = Manifest {
        num_frames: video.num_frames(),
        fps: video.fps(),
        height: video.height(),
        width: video.width(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let text = fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&text)?)
}

/// Loads a frame directory written by [`write_video_frames`] (8- or 16-bit PNGs).
pub fn load_video_frames(dir: &Path, target_hw: Option<(usize, usize)>) -> Result<VideoTensor> {
    let manifest = read_manifest(dir)?;
    let on_disk = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("frame_") && name.ends_with(".png")
        })
        .count();
    if on_disk != manifest.num_frames || manifest.num_frames == 0 {
        return Err(Error::CorruptDataset(format!(
            "manifest lists {} frames, directory holds {on_disk}",
            manifest.num_frames
        )));
    }
    let mut frames = Vec::with_capacity(manifest.num_frames);
    let mut dims: Option<(usize, usize)> = None;
    for t in 0..manifest.num_frames {
        let path = dir.join(frame_file_name(t));
        if !path.is_file() {
            return Err(Error::CorruptDataset(format!("missing {}", path.display())));
        }
        let img = image::open(&path)?.into_rgb16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / LEVELS).collect();
        let frame = match target_hw {
            Some((th, tw)) if (th, tw) != (h, w) => {
                let mut out = Vec::with_capacity(th * tw * 3);
                resize_frame(&pixels, h, w, th, tw, &mut out);
                out
            }
            Some(_) => pixels,
            None => {
                match dims {
                    None => dims = Some((h, w)),
                    Some(d) if d != (h, w) => {
                        return Err(Error::ShapeMismatch(format!(
                            "frame {t} is {h}x{w}, earlier frames are {}x{}",
                            d.0, d.1
                        )))
                    }
                    _ => {}
                }
                pixels
            }
        };
        frames.push(frame);
    }
    let (h, w) = target_hw.or(dims).expect("at least one frame");
    VideoTensor::from_frames(&frames, h, w, manifest.fps)
}

/// Per-frame supervision: period length (0 for non-periodic frames) and periodicity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodLabels {
    pub period_length: Vec<u32>,
    pub periodicity: Vec<bool>,
}

impl PeriodLabels {
    pub fn new(period_length: Vec<u32>, periodicity: Vec<bool>) -> Result<Self> {
        let labels = Self {
            period_length,
            periodicity,
        };
        labels.validate()?;
        Ok(labels)
    }

    /// Derives periodicity from period lengths (`>= 2` is periodic, `0` is not).
    pub fn from_periods(period_length: Vec<u32>) -> Result<Self> {
        let periodicity = period_length.iter().map(|&p| p > 0).collect();
        Self::new(period_length, periodicity)
    }

    pub fn non_periodic(len: usize) -> Self {
        Self {
            period_length: vec![0; len],
            periodicity: vec![false; len],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_length.len() != self.periodicity.len() {
            return Err(Error::InvalidLabel("period and periodicity lengths differ".into()));
        }
        for (i, (&p, &on)) in self.period_length.iter().zip(&self.periodicity).enumerate() {
            if (on && p < 2) || (!on && p != 0) {
                return Err(Error::InvalidLabel(format!(
                    "frame {i}: period {p} with periodicity {on}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.period_length.len()
    }

    pub fn is_empty(&self) -> bool {
        self.period_length.is_empty()
    }

    /// Labels of the frames at `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            period_length: indices.iter().map(|&i| self.period_length[i]).collect(),
            periodicity: indices.iter().map(|&i| self.periodicity[i]).collect(),
        }
    }

    /// Ground-truth count implied by the labels: `Σ 1 / period` over periodic frames.
    pub fn count(&self) -> f64 {
        self.period_length
            .iter()
            .filter(|&&p| p > 0)
            .map(|&p| 1.0 / p as f64)
            .sum()
    }
}

/// A video reference with an annotated repetition segment and its count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub video_ref: String,
    /// `[start_sec, end_sec]`.
    pub segment: (f64, f64),
    pub count: u32,
}

impl CountRecord {
    pub fn new(video_ref: impl Into<String>, segment: (f64, f64), count: u32) -> Result<Self> {
        if !(segment.0 < segment.1) {
            return Err(Error::InvalidInput(format!(
                "segment start {} not before end {}",
                segment.0, segment.1
            )));
        }
        if count < 2 {
            return Err(Error::InvalidInput(format!("count {count} below 2")));
        }
        Ok(Self {
            video_ref: video_ref.into(),
            segment,
            count,
        })
    }

    pub fn duration(&self) -> f64 {
        self.segment.1 - self.segment.0
    }
}
