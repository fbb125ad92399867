use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fusion::{fuse_backward, fuse_forward};
use super::model::{observation_tensor, BaseModel};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, zeroed, Adam};
use crate::objectives::{iou_metric, loss_with_grad, GroundTruthMap, LossKind};
use crate::real::Real;
use crate::world::{agent_observation, comm_schedule, ground_truth_map, Scenario, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub loss: LossKind,
    pub pos_weight: f64,
    /// Use every `frame_stride`-th frame of each scenario.
    pub frame_stride: usize,
    /// Share of training samples that see only the ego observation.
    pub ego_only_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            lr: 1e-3,
            lr_min: 1e-5,
            loss: LossKind::Iou,
            pos_weight: 2.0,
            frame_stride: 2,
            ego_only_fraction: 0.25,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.frame_stride == 0 {
            return Err(Error::Config("pretrain epochs, batch_size and frame_stride must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ego_only_fraction) {
            return Err(Error::Config("ego_only_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One single-frame example: ego-frame observations of the contributing agents.
#[derive(Clone, Debug)]
pub struct BaseSample {
    pub observations: Vec<Array2<bool>>,
    pub gt: GroundTruthMap,
}

/// Single-frame samples from the range-gated schedule; with probability
/// `ego_only_fraction` a sample keeps only the ego observation.
pub fn build_samples(
    scenarios: &[Scenario],
    world: &WorldConfig,
    frame_stride: usize,
    ego_only_fraction: f64,
    seed: u64,
) -> Result<Vec<BaseSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for scn in scenarios {
        let sched = comm_schedule(scn, world, &[])?;
        for frame in (0..scn.n_frames()).step_by(frame_stride.max(1)) {
            let ego_only = ego_only_fraction > 0.0 && rng.random_bool(ego_only_fraction);
            let agents: &[u32] = if ego_only {
                std::slice::from_ref(&scn.ego_id)
            } else {
                &sched.available[frame]
            };
            let observations = agents
                .iter()
                .map(|&a| agent_observation(scn, world, frame, a))
                .collect::<Result<Vec<_>>>()?;
            out.push(BaseSample {
                observations,
                gt: GroundTruthMap(ground_truth_map(scn, world, frame)?),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_iou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<F: Real> {
    pub model: BaseModel<F>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Fused logits for one sample with the decoder in evaluation mode.
pub fn predict_sample<F: Real>(model: &BaseModel<F>, sample: &BaseSample) -> Array2<F> {
    let embs: Vec<Array3<F>> = sample
        .observations
        .iter()
        .map(|o| model.encoder.forward(&observation_tensor(o)).0)
        .collect();
    let refs: Vec<&Array3<F>> = embs.iter().collect();
    let (fused, _) = fuse_forward(&refs, model.config.fusion).expect("non-empty sample");
    let (mut out, _, _) = model.decoder.forward(&[fused], false);
    out.pop().expect("one output")
}

pub fn evaluate_base<F: Real>(model: &BaseModel<F>, samples: &[BaseSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no evaluation samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += iou_metric(&predict_sample(model, s), &s.gt, 0.5)?;
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step's forward and backward pass; returns the mean loss.
fn batch_gradients<F: Real>(
    model: &mut BaseModel<F>,
    grads: &mut BaseModel<F>,
    batch: &[&BaseSample],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut enc = Vec::with_capacity(batch.len());
    let mut fused = Vec::with_capacity(batch.len());
    for s in batch {
        if s.observations.is_empty() {
            return Err(Error::Data("sample without observations".into()));
        }
        let per_agent: Vec<_> = s
            .observations
            .iter()
            .map(|o| model.encoder.forward(&observation_tensor(o)))
            .collect();
        let refs: Vec<&Array3<F>> = per_agent.iter().map(|(y, _)| y).collect();
        let (f, cache) = fuse_forward(&refs, model.config.fusion)?;
        fused.push(f);
        enc.push((per_agent, cache));
    }
    let (logits, dcache, stats) = model.decoder.forward(&fused, true);
    let n = F::lit(batch.len() as f64);
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len());
    for (l, s) in logits.iter().zip(batch) {
        let (loss, g) = loss_with_grad(cfg.loss, l, &s.gt, cfg.pos_weight)?;
        total += loss.as_f64();
        dlogits.push(g.mapv(|v| v / n));
    }
    let dfused = model.decoder.backward(&dcache, &dlogits, Some(&mut grads.decoder));
    for ((per_agent, cache), d) in enc.iter().zip(&dfused) {
        let refs: Vec<&Array3<F>> = per_agent.iter().map(|(y, _)| y).collect();
        for ((_, ec), da) in per_agent.iter().zip(fuse_backward(&refs, cache, d)) {
            model.encoder.backward(ec, &da, &mut grads.encoder);
        }
    }
    model.decoder.update_running(&stats);
    Ok(total / batch.len() as f64)
}

/// Single-frame pretraining with Adam and cosine annealing; returns the
/// epoch with the best evaluation IoU.
pub fn pretrain_base<F: Real>(
    mut model: BaseModel<F>,
    train: &[BaseSample],
    eval: &[BaseSample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty pretraining set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, BaseModel<F>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = F::lit(cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&BaseSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = zeroed(&model);
            let loss = batch_gradients(&mut model, &mut grads, &batch, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    at: format!("pretrain epoch {epoch} step {step}"),
                    reason: format!("loss is {loss}"),
                });
            }
            adam.step(&mut model, &grads, lr);
            sum += loss;
            steps += 1;
        }
        let eval_iou = evaluate_base(&model, eval)?;
        let entry = EpochLog {
            epoch,
            train_loss: sum / steps as f64,
            eval_iou,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} eval IoU {:.4} ({:.1}s)",
            entry.train_loss,
            entry.eval_iou,
            entry.seconds
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| eval_iou > *b) {
            best = Some((eval_iou, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        model,
        log,
        best_epoch,
    })
}
