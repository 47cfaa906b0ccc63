use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use repcount::datasets::drifting_scene;
use repcount::synth::{synthesize_repetition, SampleMeta, SynthesisConfig};
use repcount::video::{load_video_frames, write_video_frames, VideoTensor};
use repcount::{Error, Result};

use crate::io;

pub const LABELS_FILE: &str = "labels.json";

#[derive(clap::Args)]
pub struct Args {
    /// A frame directory, or a directory of frame directories, to cut clips from.
    /// Procedural footage is used when omitted.
    #[arg(long)]
    source_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with a generation config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub num: usize,
    pub seed: u64,
    /// Source footage is resized to this before synthesis.
    pub frame_hw: (usize, usize),
    /// Procedural footage used when no source directory is given.
    pub procedural_videos: usize,
    pub procedural_frames: usize,
    pub synthesis: SynthesisConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            num: 10,
            seed: 0,
            frame_hw: (32, 32),
            procedural_videos: 4,
            procedural_frames: 256,
            synthesis: SynthesisConfig::default(),
        }
    }
}

/// Contents of `labels.json` next to a generated sample's frames.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleLabels {
    pub period_length: Vec<u32>,
    pub periodicity: Vec<bool>,
    pub meta: SampleMeta,
}

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:04}")
}

/// Frame directories under `dir`; `dir` itself when it holds a manifest.
pub fn frame_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    if dir.join("manifest.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::CorruptDataset(format!("no frame directories in {}", dir.display())));
    }
    Ok(dirs)
}

pub fn load_footage(dir: &Path, hw: (usize, usize)) -> Result<Vec<VideoTensor>> {
    frame_dirs(dir)?.iter().map(|d| load_video_frames(d, Some(hw))).collect()
}

pub fn procedural_footage(n: usize, frames: usize, hw: (usize, usize), rng: &mut impl Rng) -> Vec<VideoTensor> {
    (0..n).map(|_| drifting_scene(frames, hw.0, hw.1, rng)).collect()
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg: GenerateConfig = io::load_config(args.config.as_deref())?;
    if let Some(n) = args.num {
        cfg.num = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.synthesis.validate()?;
    io::log_config("generate", &cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let footage = match &args.source_dir {
        Some(dir) => load_footage(dir, cfg.frame_hw)?,
        None => procedural_footage(cfg.procedural_videos, cfg.procedural_frames, cfg.frame_hw, &mut rng),
    };
    let need = cfg.synthesis.min_source_frames();
    let usable: Vec<&VideoTensor> = footage.iter().filter(|v| v.num_frames() >= need).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientFrames {
            needed: need,
            available: footage.iter().map(|v| v.num_frames()).max().unwrap_or(0),
        });
    }

    io::create_dir(&args.out_dir)?;
    for i in 0..cfg.num {
        let source = usable[rng.random_range(0..usable.len())];
        let sample = synthesize_repetition(source, &cfg.synthesis, &mut rng)?;
        let dir = args.out_dir.join(sample_dir_name(i));
        write_video_frames(&sample.video, &dir)?;
        let labels = SampleLabels {
            period_length: sample.labels.period_length,
            periodicity: sample.labels.periodicity,
            meta: sample.meta,
        };
        io::write_text(&dir.join(LABELS_FILE), &io::to_json(&labels)?)?;
    }
    log::info!("wrote {} samples to {}", cfg.num, args.out_dir.display());
    Ok(())
}
