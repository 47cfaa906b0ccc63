use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use repcount::datasets::{load_quva, load_record_video};
use repcount::model::{init_params, ModelConfig};
use repcount::training::{load_checkpoint, save_checkpoint, train, DataMix, DataSources, LabeledVideo, RealClip, TrainConfig};
use repcount::video::{load_video_frames, PeriodLabels};
use repcount::{Error, Params32, Result};

use crate::generate::{frame_dirs, load_footage, procedural_footage, LABELS_FILE};
use crate::io;

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    model: Preset,
    /// JSON model config; replaces the preset.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Videos per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Directory of labeled samples (as written by `generate`) to train on directly.
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Footage to synthesize repetitions from.
    #[arg(long)]
    source_dir: Option<PathBuf>,
    /// QUVA-style directory of real clips with `annotations.csv`.
    #[arg(long)]
    quva: Option<PathBuf>,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from this checkpoint; its model config is used.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Copy encoder arrays from this checkpoint file before training.
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
}

#[derive(Deserialize)]
struct FixedLabels {
    period_length: Vec<u32>,
    periodicity: Vec<bool>,
}

/// Every sample directory under `dir` with frames and `labels.json`.
pub fn load_fixed(dir: &Path) -> Result<Vec<LabeledVideo>> {
    frame_dirs(dir)?
        .iter()
        .map(|d| {
            let l: FixedLabels = io::read_json(&d.join(LABELS_FILE))?;
            let labels = PeriodLabels::new(l.period_length, l.periodicity)?;
            LabeledVideo::new(load_video_frames(d, None)?, labels)
        })
        .collect()
}

fn load_real(dir: &Path, hw: (usize, usize)) -> Result<Vec<RealClip>> {
    load_quva(dir)?
        .into_iter()
        .map(|record| {
            let video = load_record_video(dir, &record, Some(hw))?;
            Ok(RealClip { video, record })
        })
        .collect()
}

#[derive(Serialize)]
struct Resolved<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg: TrainConfig = io::load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_videos = v;
    }
    if args.quva.is_some() && cfg.data_mix == DataMix::Synthetic {
        cfg.data_mix = DataMix::SyntheticReal;
    }
    cfg.validate()?;

    let (model, params): (ModelConfig, Params32) = match &args.init {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.config, ckpt.params)
        }
        None => {
            let model = match &args.model_config {
                Some(p) => io::read_json(p)?,
                None => match args.model {
                    Preset::Toy => ModelConfig::toy(),
                    Preset::Full => ModelConfig::full(),
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            let params = init_params(&model, &mut rng)?;
            (model, params)
        }
    };
    model.validate()?;
    let syn = &mut cfg.synthesis;
    syn.max_period = model.period_classes;
    syn.period_range.1 = syn.period_range.1.min(model.period_classes);
    syn.period_range.0 = syn.period_range.0.min(syn.period_range.1);
    syn.validate()?;
    io::log_config("train", &Resolved { model: &model, train: &cfg });

    let mut params = params;
    if let Some(path) = &args.encoder_weights {
        let n = params.load_encoder_weights(path)?;
        log::info!("loaded {n} encoder arrays from {}", path.display());
    }

    let mut sources = DataSources::default();
    if let Some(dir) = &args.fixed {
        sources.fixed = load_fixed(dir)?;
    } else {
        if let Some(dir) = &args.quva {
            sources.real = load_real(dir, model.input_hw)?;
        }
        if cfg.data_mix != DataMix::Real {
            sources.footage = match &args.source_dir {
                Some(dir) => load_footage(dir, model.input_hw)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(2);
                    procedural_footage(16, 4 * model.n_frames, model.input_hw, &mut rng)
                }
            };
        }
    }
    log::info!(
        "sources: {} footage, {} real, {} fixed",
        sources.footage.len(),
        sources.real.len(),
        sources.fixed.len()
    );

    match train(params, &sources, &model, &cfg, args.log.as_deref()) {
        Ok(ckpt) => {
            save_checkpoint(&ckpt, &args.out)?;
            log::info!("wrote {} after {} steps", args.out.display(), ckpt.step);
            Ok(())
        }
        Err(Error::Diverged { step, last_good }) => {
            save_checkpoint(&last_good, &args.out)?;
            log::error!("last finite parameters (step {}) saved to {}", last_good.step, args.out.display());
            Err(Error::Diverged { step, last_good })
        }
        Err(e) => Err(e),
    }
}
