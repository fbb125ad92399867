//! Cooperative base model: per-agent encoder, agent fusion and a decoder that
//! is frozen once pretraining ends.

mod fusion;
mod model;
mod pretrain;

pub use fusion::{fuse_agents, fuse_backward, fuse_forward, FusionCache, FusionKind};
pub use model::{
    observation_tensor, BaseConfig, BaseModel, Decoder, DecoderCache, DecoderStage, DecoderStats, Encoder,
    EncoderCache,
};
pub use pretrain::{
    build_samples, evaluate_base, predict_sample, pretrain_base, BaseSample, EpochLog, PretrainConfig,
    PretrainOutcome,
};
