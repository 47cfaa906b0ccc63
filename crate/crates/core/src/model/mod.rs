//! The counting network: per-frame encoder, self-similarity layer and the
//! period/periodicity predictor.

pub mod checkpoint;
mod config;
mod network;
mod params;

pub use config::{EncoderKind, ModelConfig, PredictorKind, Similarity};
pub use network::{
    build_forward, build_loss, build_tsm, compute_loss, encode, forward, forward_traced, period_targets,
    predict_period, similarity_from_raw, window_tensor, EmbeddingSequence, ForwardOutputs, GraphOutputs, LossVars,
    Losses, PeriodOutputs, ShapeTrace, SimilarityMatrix,
};
pub use params::{init_params, param_specs, Init, ModelParams, ParamSpec, TRUNK_STAGES};
