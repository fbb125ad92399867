//! The temporal fusion module: an importance-fused initial query, a stack of
//! attention blocks with deformable cross-attention over `[history.., current]`,
//! and an importance-weighted aggregation of the stack output with the current
//! embedding.

mod block;
mod deformable;
mod history;
mod model;
mod sampling;

pub use block::{AttentionBlock, BlockCache};
pub use deformable::{DeformableAttention, DeformableCache};
pub use history::{HistoryBuffer, StreamId};
pub use model::{TemporalCache, TemporalFusion};
pub use sampling::bilinear_sample;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bev::{check_same_shape, BevEmbedding, EmbeddingSource, ImportanceEstimator};
use crate::error::{Error, Result};
use crate::real::Real;

/// What re-enters the history buffer after each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySource {
    Refined,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub history_len: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub num_keypoints: usize,
    pub channels: usize,
    pub feedforward_dim: usize,
    /// `O`, the importance generator width.
    pub importance_channels: usize,
    pub history_source: HistorySource,
    /// Blend the stack output with the current embedding (off: return the stack output).
    pub feature_aggregation: bool,
    /// Importance-fused initial query (off: uniform mean of current and history).
    pub query_importance: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            history_len: 1,
            num_blocks: 3,
            num_heads: 4,
            num_keypoints: 4,
            channels: 64,
            feedforward_dim: 128,
            importance_channels: 32,
            history_source: HistorySource::Refined,
            feature_aggregation: true,
            query_importance: true,
        }
    }
}

impl TemporalConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.num_heads * self.head_dim() != self.channels {
            return bad(format!(
                "num_heads ({}) must divide channels ({})",
                self.num_heads, self.channels
            ));
        }
        if self.num_keypoints == 0 {
            return bad("num_keypoints must be >= 1".into());
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.importance_channels == 0 || self.feedforward_dim == 0 {
            return bad("importance_channels and feedforward_dim must be >= 1".into());
        }
        Ok(())
    }
}

fn tokens_of<F: Real>(embs: &[&BevEmbedding<F>]) -> Vec<Array2<F>> {
    embs.iter().map(|e| e.to_tokens()).collect()
}

/// Importance-fused query over the current embedding and every history entry.
pub fn initial_query<F: Real>(
    current: &BevEmbedding<F>,
    history: &HistoryBuffer<F>,
    est: &ImportanceEstimator<F>,
) -> Result<BevEmbedding<F>> {
    if history.is_empty() {
        return Err(Error::Argument(
            "initial query needs at least one history entry".into(),
        ));
    }
    let mut members = vec![current];
    members.extend(history.entries());
    check_same_shape(&members)?;
    if est.channels() != current.channels() {
        return Err(Error::Config(format!(
            "importance estimator expects {} channels, embedding has {}",
            est.channels(),
            current.channels()
        )));
    }
    let (_, h, w) = current.shape();
    let tokens = tokens_of(&members);
    let refs: Vec<&Array2<F>> = tokens.iter().collect();
    let (q, _) = est.fuse_tokens(&refs);
    Ok(BevEmbedding::from_tokens(
        &q,
        h,
        w,
        current.frame_index,
        EmbeddingSource::TemporalRefined,
    ))
}

/// `frames` are ordered oldest to newest and must number `params.frames`.
pub fn deformable_cross_attention<F: Real>(
    query: &BevEmbedding<F>,
    frames: &[&BevEmbedding<F>],
    params: &DeformableAttention<F>,
) -> Result<BevEmbedding<F>> {
    let mut all = vec![query];
    all.extend(frames.iter().copied());
    check_same_shape(&all)?;
    let (_, h, w) = query.shape();
    let tokens = tokens_of(frames);
    let refs: Vec<&Array2<F>> = tokens.iter().collect();
    let (out, _) = params.forward(&query.to_tokens(), &refs, h, w)?;
    Ok(BevEmbedding::from_tokens(
        &out,
        h,
        w,
        query.frame_index,
        EmbeddingSource::TemporalRefined,
    ))
}

pub fn attention_block<F: Real>(
    query: &BevEmbedding<F>,
    frames: &[&BevEmbedding<F>],
    params: &AttentionBlock<F>,
) -> Result<BevEmbedding<F>> {
    let mut all = vec![query];
    all.extend(frames.iter().copied());
    check_same_shape(&all)?;
    let (_, h, w) = query.shape();
    let tokens = tokens_of(frames);
    let refs: Vec<&Array2<F>> = tokens.iter().collect();
    let (out, _) = params.forward(&query.to_tokens(), &refs, h, w)?;
    Ok(BevEmbedding::from_tokens(
        &out,
        h,
        w,
        query.frame_index,
        EmbeddingSource::TemporalRefined,
    ))
}

/// Blend of the current embedding and the temporal stack output by relative importance.
pub fn feature_aggregate<F: Real>(
    current: &BevEmbedding<F>,
    temporal_out: &BevEmbedding<F>,
    est: &ImportanceEstimator<F>,
) -> Result<BevEmbedding<F>> {
    check_same_shape(&[current, temporal_out])?;
    let mut fused = crate::bev::importance_fuse(&[current, temporal_out], est)?;
    fused.frame_index = current.frame_index;
    Ok(fused)
}

/// Runs the full module; an empty history returns `current` unchanged.
pub fn temporal_forward<F: Real>(
    current: &BevEmbedding<F>,
    history: &HistoryBuffer<F>,
    model: &TemporalFusion<F>,
) -> Result<BevEmbedding<F>> {
    model.forward(current, history)
}
