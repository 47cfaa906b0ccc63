use std::path::PathBuf;

use serde::Serialize;

use repcount::inference::{count_repetitions, CountMode, CountOptions, PerFramePrediction, DEFAULT_STRIDES};
use repcount::training::load_checkpoint;
use repcount::video::load_video_frames;
use repcount::Result;

use crate::io;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame directory.
    #[arg(long)]
    video: PathBuf,
    /// Candidate strides, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_STRIDES)]
    strides: Vec<usize>,
    /// Count only frames whose periodicity exceeds this.
    #[arg(long)]
    threshold: Option<f64>,
    /// Periodicity threshold for the reported segments.
    #[arg(long, default_value_t = 0.5)]
    segment_threshold: f64,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct StrideScore {
    stride: usize,
    score: f64,
}

#[derive(Serialize)]
struct Output {
    count: f64,
    chosen_stride: usize,
    stride_scores: Vec<StrideScore>,
    per_frame: Vec<PerFramePrediction>,
    segments: Vec<(usize, usize)>,
}

pub fn run(args: Args) -> Result<()> {
    let opts = CountOptions {
        strides: args.strides,
        mode: args.threshold.map_or(CountMode::Always, CountMode::Thresholded),
        segment_threshold: args.segment_threshold,
    };
    io::log_config("count", &opts);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let video = load_video_frames(&args.video, Some(ckpt.config.input_hw))?;
    let r = count_repetitions(&ckpt.params, &video, &ckpt.config, &opts)?;
    let out = Output {
        count: r.count,
        chosen_stride: r.chosen_stride,
        stride_scores: r.stride_scores.into_iter().map(|(stride, score)| StrideScore { stride, score }).collect(),
        per_frame: r.per_frame,
        segments: r.segments,
    };
    io::emit_json(&out, args.out.as_deref())
}
