//! Temporal-module training on cached embeddings.
//!
//! Each training unit is a short sequence: all but the last frame run without
//! gradients and only fill the history buffer; the last frame is decoded by
//! the frozen decoder and carries the loss.

mod augment;

pub use augment::{
    apply_transform, comm_augment, draw_transform, spatial_augment, transform_embedding, transform_map,
    AugFlags, SpatialTransform,
};

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{fuse_agents, BaseModel, Decoder, EpochLog};
use crate::bev::{to_tokens, BevEmbedding, EmbeddingSource};
use crate::error::{Error, Result};
use crate::evaluator::{eval_current, Predictor};
use crate::nn::{accumulate, cosine_lr, zeroed, Adam};
use crate::objectives::{loss_with_grad, GroundTruthMap, LossKind};
use crate::store::{EmbeddingStore, FrameSequence, FrameSource, SequenceFrame};
use crate::temporal::{HistoryBuffer, TemporalFusion};
use crate::world::{agent_observation, comm_schedule, ground_truth_map, Scenario, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Per non-final frame probability of dropping to ego-only.
    pub comm_aug_prob: f64,
    /// Probability that a sequence ends in a scheduled communication failure
    /// covering its last one to `seq_len - 1` frames.
    pub failure_prob: f64,
    pub aug: AugFlags,
    pub loss: LossKind,
    pub pos_weight: f64,
    /// Start-frame step between consecutive training sequences.
    pub sequence_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 4,
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            lr_min: 1e-5,
            comm_aug_prob: 0.3,
            failure_prob: 0.5,
            aug: AugFlags::default(),
            loss: LossKind::Iou,
            pos_weight: 2.0,
            sequence_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.sequence_stride == 0 {
            return Err(Error::Config("epochs, batch_size and sequence_stride must be positive".into()));
        }
        for (name, p) in [("comm_aug_prob", self.comm_aug_prob), ("failure_prob", self.failure_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if self.pos_weight <= 0.0 {
            return Err(Error::Config("pos_weight must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that can produce training sequences.
pub trait SequenceProvider {
    fn scenario_ids(&self) -> Vec<u64>;
    fn n_frames(&self, scenario_id: u64) -> Result<usize>;
    fn sequence(&self, scenario_id: u64, start: usize, mask: &[FrameSource]) -> Result<FrameSequence>;
}

impl SequenceProvider for EmbeddingStore {
    fn scenario_ids(&self) -> Vec<u64> {
        EmbeddingStore::scenario_ids(self)
    }
    fn n_frames(&self, scenario_id: u64) -> Result<usize> {
        EmbeddingStore::n_frames(self, scenario_id)
    }
    fn sequence(&self, scenario_id: u64, start: usize, mask: &[FrameSource]) -> Result<FrameSequence> {
        self.read_sequence(scenario_id, start, mask)
    }
}

/// Sequences built from raw scenarios: every frame is rasterized and
/// re-encoded by the base model on request, as training without a cache would.
pub struct EndToEndProvider<'a> {
    pub scenarios: BTreeMap<u64, Scenario>,
    pub world: &'a WorldConfig,
    pub base: &'a BaseModel<f32>,
}

impl SequenceProvider for EndToEndProvider<'_> {
    fn scenario_ids(&self) -> Vec<u64> {
        self.scenarios.keys().copied().collect()
    }

    fn n_frames(&self, scenario_id: u64) -> Result<usize> {
        self.scenarios
            .get(&scenario_id)
            .map(|s| s.n_frames())
            .ok_or_else(|| Error::Lookup(format!("scenario {scenario_id} unknown")))
    }

    fn sequence(&self, scenario_id: u64, start: usize, mask: &[FrameSource]) -> Result<FrameSequence> {
        let scn = self
            .scenarios
            .get(&scenario_id)
            .ok_or_else(|| Error::Lookup(format!("scenario {scenario_id} unknown")))?;
        let sched = comm_schedule(scn, self.world, &[])?;
        let frames = mask
            .iter()
            .enumerate()
            .map(|(k, &source)| {
                let frame = start + k;
                if frame >= scn.n_frames() {
                    return Err(Error::Lookup(format!("frame {frame} of scenario {scenario_id}")));
                }
                let agents = &sched.available[frame];
                let used: &[u32] = match source {
                    FrameSource::Fused => agents,
                    FrameSource::EgoOnly => std::slice::from_ref(&scn.ego_id),
                };
                let embs = used
                    .iter()
                    .map(|&a| self.base.encode(&agent_observation(scn, self.world, frame, a)?, frame as i64))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SequenceFrame {
                    frame_index: frame as i64,
                    n_cavs_available: agents.len() as u32,
                    source,
                    embedding: fuse_agents(&embs, self.base.config.fusion)?.data,
                    gt: GroundTruthMap(ground_truth_map(scn, self.world, frame)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSequence {
            scenario_id,
            ego_id: scn.ego_id,
            frames,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Buffer pushes before the final, gradient-carrying frame.
    pub history_pushes: usize,
    pub loss_evaluations: usize,
}

/// Warm-up frames without gradients, then the loss on the final frame.
/// Gradients are accumulated into `grads` scaled by `grad_scale`; the decoder
/// runs in evaluation mode and is never updated.
pub fn train_step(
    model: &TemporalFusion<f32>,
    decoder: &Decoder<f32>,
    seq: &FrameSequence,
    cfg: &TrainConfig,
    grads: &mut TemporalFusion<f32>,
    grad_scale: f32,
) -> Result<StepOutcome> {
    let (last, warmup) = seq
        .frames
        .split_last()
        .ok_or_else(|| Error::Argument("empty training sequence".into()))?;
    let mut history = HistoryBuffer::new(model.config.history_len);
    for f in warmup {
        let source = match f.source {
            FrameSource::Fused => EmbeddingSource::FusedMultiCav,
            FrameSource::EgoOnly => EmbeddingSource::EgoOnly,
        };
        let emb = BevEmbedding::new(f.embedding.clone(), f.frame_index, source)?;
        model.step(&emb, &mut history)?;
    }
    let history_pushes = history.pushes();
    let (_, h, w) = last.embedding.dim();
    let cur = to_tokens(&last.embedding);
    let hist: Vec<Array2<f32>> = history.entries().map(|e| e.to_tokens()).collect();
    let refs: Vec<&Array2<f32>> = hist.iter().collect();
    let (out, cache) = model.forward_tokens(&cur, &refs, h, w, true)?;
    let emb = crate::bev::from_tokens(&out, h, w);
    let (mut logits, dcache, _) = decoder.forward(std::slice::from_ref(&emb), false);
    let logits = logits.pop().expect("one output");
    let (loss, dlogits) = loss_with_grad(cfg.loss, &logits, &last.gt, cfg.pos_weight)?;
    // ReLU in the decoder would mask a non-finite embedding, so check both.
    if !loss.is_finite() || !emb.iter().all(|v| v.is_finite()) {
        return Err(Error::Training {
            at: format!("scenario {} frame {}", seq.scenario_id, last.frame_index),
            reason: format!("loss is {loss}, embedding finite: {}", emb.iter().all(|v| v.is_finite())),
        });
    }
    if let Some(cache) = cache {
        let dlogits = dlogits.mapv(|v| v * grad_scale);
        let demb = decoder
            .backward(&dcache, std::slice::from_ref(&dlogits), None)
            .pop()
            .expect("one input grad");
        model.backward(&cache, &to_tokens(&demb), grads);
    }
    Ok(StepOutcome {
        loss: loss as f64,
        history_pushes,
        loss_evaluations: 1,
    })
}

/// Scheduled sources for one training sequence: all fused, or (with
/// `failure_prob`) a failure window covering the last `k` frames, `1 <= k < len`.
pub fn scheduled_mask<R: Rng + ?Sized>(len: usize, failure_prob: f64, rng: &mut R) -> Vec<FrameSource> {
    let mut mask = vec![FrameSource::Fused; len];
    if len >= 2 && failure_prob > 0.0 && rng.random_bool(failure_prob) {
        let k = rng.random_range(1..len);
        for m in &mut mask[len - k..] {
            *m = FrameSource::EgoOnly;
        }
    }
    mask
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: TemporalFusion<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub sequences_per_epoch: usize,
}

/// All `(scenario, start)` pairs with stride `cfg.sequence_stride`.
pub fn sequence_index(provider: &dyn SequenceProvider, cfg: &TrainConfig) -> Result<Vec<(u64, usize)>> {
    let mut out = Vec::new();
    for id in provider.scenario_ids() {
        let n = provider.n_frames(id)?;
        if n >= cfg.seq_len {
            out.extend((0..=n - cfg.seq_len).step_by(cfg.sequence_stride).map(|s| (id, s)));
        }
    }
    Ok(out)
}

/// One pass over `sequences` in the given order; returns the mean loss.
pub fn run_epoch(
    model: &mut TemporalFusion<f32>,
    adam: &mut Adam<f32>,
    decoder: &Decoder<f32>,
    provider: &dyn SequenceProvider,
    sequences: &[(u64, usize)],
    cfg: &TrainConfig,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in sequences.chunks(cfg.batch_size) {
        let mut grads = zeroed(model);
        let scale = 1.0 / chunk.len() as f32;
        for &(id, start) in chunk {
            let mask = scheduled_mask(cfg.seq_len, cfg.failure_prob, rng);
            let mask = comm_augment(&mask, cfg.comm_aug_prob, rng);
            let seq = provider.sequence(id, start, &mask)?;
            let seq = spatial_augment(&seq, cfg.aug, rng);
            let mut g = zeroed(model);
            sum += train_step(model, decoder, &seq, cfg, &mut g, scale)?.loss;
            accumulate(&mut grads, &g);
        }
        adam.step(model, &grads, lr);
    }
    Ok(sum / sequences.len().max(1) as f64)
}

/// Trains for `cfg.epochs`, evaluating current-frame IoU on `eval` after each
/// epoch, and returns the best epoch's parameters.
pub fn fit(
    mut model: TemporalFusion<f32>,
    decoder: &Decoder<f32>,
    train: &dyn SequenceProvider,
    eval: &EmbeddingStore,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut sequences = sequence_index(train, cfg)?;
    if sequences.is_empty() {
        return Err(Error::Argument(format!(
            "no training sequences of length {}",
            cfg.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::default();
    let mut best: Option<(f64, usize, TemporalFusion<f32>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min) as f32;
        sequences.shuffle(&mut rng);
        let train_loss = run_epoch(&mut model, &mut adam, decoder, train, &sequences, cfg, lr, &mut rng)?;
        let eval_iou = eval_current(eval, Predictor::Temporal(&model), decoder)?.mean_iou;
        let entry = EpochLog {
            epoch,
            train_loss,
            eval_iou,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "train epoch {epoch}: lr {lr:.2e} loss {train_loss:.4} eval IoU {eval_iou:.4} ({:.1}s)",
            entry.seconds
        );
        on_epoch(&entry)?;
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| eval_iou > *b) {
            best = Some((eval_iou, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(FitOutcome {
        model,
        log,
        best_epoch,
        sequences_per_epoch: sequences.len(),
    })
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_iou,seconds";

pub fn metrics_row(e: &EpochLog) -> String {
    format!("{},{:.6},{:.6},{:.3}", e.epoch, e.train_loss, e.eval_iou, e.seconds)
}
