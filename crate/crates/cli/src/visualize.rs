use std::path::{Path, PathBuf};

use clap::ValueEnum;
use image::{GrayImage, Luma, Rgb, RgbImage};

use repcount::inference::pca_trace;
use repcount::model::forward;
use repcount::training::load_checkpoint;
use repcount::video::{load_video_frames, sample_window, PadPolicy};
use repcount::{Error, Result};

use crate::io;

#[derive(Clone, Copy, ValueEnum)]
pub enum What {
    /// Temporal self-similarity matrix.
    Tsm,
    /// First principal component of the frame embeddings.
    Pca,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, value_enum)]
    what: What,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame directory.
    #[arg(long)]
    video: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// First frame of the window.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

const CELL: u32 = 4;

fn save_png(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    Ok(img(path)?)
}

fn tsm_outputs(s: &[f64], n: usize, dir: &Path) -> Result<()> {
    let mut csv = String::new();
    for row in s.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    io::write_text(&dir.join("tsm.csv"), &csv)?;

    let max = s.iter().copied().fold(0.0, f64::max);
    let side = n as u32 * CELL;
    let img = GrayImage::from_fn(side, side, |x, y| {
        let v = s[(y / CELL) as usize * n + (x / CELL) as usize];
        let level = if max > 0.0 { v / max } else { 0.0 };
        Luma([(level.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_png(|p| img.save(p), &dir.join("tsm.png"))
}

fn pca_outputs(trace: &[f64], dir: &Path) -> Result<()> {
    let mut csv = String::from("frame,value\n");
    for (i, v) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    io::write_text(&dir.join("pca.csv"), &csv)?;

    let (w, h) = (trace.len() as u32 * 2 * CELL, 160u32);
    let lo = trace.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y_of = |v: f64| ((1.0 - (v - lo) / span) * (h - 9) as f64).round() as i64 + 4;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut put = |x: i64, y: i64| {
        if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb([30, 80, 200]));
        }
    };
    let xs: Vec<i64> = (0..trace.len()).map(|i| (i as u32 * 2 * CELL + CELL) as i64).collect();
    for i in 0..trace.len() {
        let (x, y) = (xs[i], y_of(trace[i]));
        for d in -1..=1 {
            put(x + d, y);
            put(x, y + d);
        }
        if i + 1 < trace.len() {
            let (x1, y1) = (xs[i + 1], y_of(trace[i + 1]));
            let steps = (x1 - x).abs().max((y1 - y).abs()).max(1);
            for k in 0..=steps {
                put(x + (x1 - x) * k / steps, y + (y1 - y) * k / steps);
            }
        }
    }
    save_png(|p| img.save(p), &dir.join("pca.png"))
}

pub fn run(args: Args) -> Result<()> {
    if args.stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = &ckpt.config;
    let video = load_video_frames(&args.video, Some(cfg.input_hw))?;
    if args.start >= video.num_frames() {
        return Err(Error::OutOfRange(format!(
            "start frame {} of a {}-frame video",
            args.start,
            video.num_frames()
        )));
    }
    let window = sample_window(&video, args.start, args.stride, cfg.n_frames, PadPolicy::RepeatLast)?;
    let out = forward(&window, &ckpt.params, cfg)?;
    io::create_dir(&args.out)?;
    match args.what {
        What::Tsm => {
            let s: Vec<f64> = out.similarity.s.data().iter().map(|&v| v as f64).collect();
            tsm_outputs(&s, out.similarity.size(), &args.out)
        }
        What::Pca => pca_outputs(&pca_trace(&out.embeddings)?, &args.out),
    }
}
