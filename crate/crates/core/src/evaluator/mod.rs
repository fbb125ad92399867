//! Evaluation protocols: current-frame IoU, communication-failure curves,
//! the mean-of-history baseline and report output.

mod ablation;
mod report;

pub use ablation::{ablation_csv, cell_spec, run_ablations, AblationRow, CellModel, CellSpec, ALL_CELLS, COMPONENT_CELLS};
pub use report::{plot_svg, EvalReport, ReportRow, REPORT_HEADER};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::base::Decoder;
use crate::bev::{BevEmbedding, EmbeddingSource};
use crate::error::{Error, Result};
use crate::objectives::{iou_metric, GroundTruthMap};
use crate::store::{EmbeddingRecord, EmbeddingStore, FrameSource};
use crate::temporal::{HistoryBuffer, HistorySource, TemporalFusion};

/// Maps the current embedding and the stream's buffer to the decoder input.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Temporal(&'a TemporalFusion<f32>),
    /// Elementwise mean of the current embedding and the buffer; the mean re-enters the buffer.
    MeanHistory { history_len: usize },
    /// The base model alone: no history.
    NoHistory,
}

impl Predictor<'_> {
    fn history_len(&self) -> usize {
        match self {
            Predictor::Temporal(m) => m.config.history_len,
            Predictor::MeanHistory { history_len } => *history_len,
            Predictor::NoHistory => 0,
        }
    }

    pub fn new_buffer(&self) -> HistoryBuffer<f32> {
        HistoryBuffer::new(self.history_len())
    }

    /// One streaming step: output for `current`, then the buffer update.
    pub fn step(&self, current: &BevEmbedding<f32>, buffer: &mut HistoryBuffer<f32>) -> Result<BevEmbedding<f32>> {
        match self {
            Predictor::Temporal(m) => m.step(current, buffer),
            Predictor::MeanHistory { .. } => {
                let out = mean_with_history(current, buffer)?;
                buffer.push(out.clone())?;
                Ok(out)
            }
            Predictor::NoHistory => Ok(current.clone()),
        }
    }

    pub fn history_source(&self) -> HistorySource {
        match self {
            Predictor::Temporal(m) => m.config.history_source,
            _ => HistorySource::Refined,
        }
    }
}

/// Mean of `current` and every buffered embedding; `current` itself when the buffer is empty.
pub fn mean_with_history(current: &BevEmbedding<f32>, buffer: &HistoryBuffer<f32>) -> Result<BevEmbedding<f32>> {
    if buffer.is_empty() {
        return Ok(current.clone());
    }
    let mut sum = current.data.clone();
    for e in buffer.entries() {
        if e.shape() != current.shape() {
            return Err(Error::shape(format!("{:?}", current.shape()), format!("{:?}", e.shape())));
        }
        sum += &e.data;
    }
    let n = (buffer.len() + 1) as f32;
    sum.mapv_inplace(|v| v / n);
    BevEmbedding::new(sum, current.frame_index, EmbeddingSource::TemporalRefined)
}

pub fn decode_logits(decoder: &Decoder<f32>, emb: &Array3<f32>) -> Array2<f32> {
    let (mut out, _, _) = decoder.forward(std::slice::from_ref(emb), false);
    out.pop().expect("one output")
}

fn frame_iou(decoder: &Decoder<f32>, emb: &BevEmbedding<f32>, gt: &GroundTruthMap) -> Result<f64> {
    iou_metric(&decode_logits(decoder, &emb.data), gt, 0.5)
}

fn embedding(r: &EmbeddingRecord, src: FrameSource) -> Result<BevEmbedding<f32>> {
    let source = match src {
        FrameSource::Fused => EmbeddingSource::FusedMultiCav,
        FrameSource::EgoOnly => EmbeddingSource::EgoOnly,
    };
    BevEmbedding::new(r.embedding(src).clone(), r.frame_index, source)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameIou {
    pub scenario_id: u64,
    pub frame: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurrentEval {
    pub mean_iou: f64,
    pub frames: Vec<FrameIou>,
}

fn require_scenarios(store: &EmbeddingStore) -> Result<Vec<u64>> {
    let ids = store.scenario_ids();
    if ids.is_empty() {
        return Err(Error::Argument(format!("evaluation split {} is empty", store.root().display())));
    }
    Ok(ids)
}

/// Full-comms streams with a buffer that persists across each scenario;
/// IoU averaged over every frame past the first.
pub fn eval_current(store: &EmbeddingStore, predictor: Predictor<'_>, decoder: &Decoder<f32>) -> Result<CurrentEval> {
    let mut frames = Vec::new();
    for id in require_scenarios(store)? {
        let records = store.read_scenario(id)?;
        let mut buffer = predictor.new_buffer();
        for (t, r) in records.iter().enumerate() {
            let out = predictor.step(&embedding(r, FrameSource::Fused)?, &mut buffer)?;
            if t > 0 {
                frames.push(FrameIou {
                    scenario_id: id,
                    frame: t,
                    iou: frame_iou(decoder, &out, &r.gt)?,
                });
            }
        }
    }
    let mean_iou = frames.iter().map(|f| f.iou).sum::<f64>() / frames.len().max(1) as f64;
    Ok(CurrentEval { mean_iou, frames })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureProtocol {
    /// Contiguous frames before the anchor that must each hear another CAV.
    pub warmup_frames: usize,
    /// Ego-only frames after the anchor.
    pub horizon: usize,
}

impl Default for FailureProtocol {
    fn default() -> Self {
        Self {
            warmup_frames: 2,
            horizon: 4,
        }
    }
}

impl FailureProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_frames < 2 || self.horizon == 0 {
            return Err(Error::Config("need warmup_frames >= 2 and horizon >= 1".into()));
        }
        Ok(())
    }

    /// Anchor frames of a scenario given per-frame available-agent counts.
    pub fn anchors(&self, n_available: &[u32]) -> Vec<usize> {
        let n = n_available.len();
        (self.warmup_frames..n.saturating_sub(self.horizon))
            .filter(|&t| n_available[t - self.warmup_frames..t].iter().all(|&c| c >= 2))
            .collect()
    }
}

/// Per-offset IoU sums of one predictor under the failure protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct FailureCurve {
    /// Mean IoU at offsets `0..=horizon`.
    pub iou: Vec<f64>,
    pub n_anchors: usize,
    /// `(scenario_id, anchor, iou at t)` for every anchor.
    pub anchor_ious: Vec<(u64, usize, f64)>,
}

/// For every anchor: stream fused frames up to and including `t`, then feed
/// ego-only embeddings for `t+1..=t+horizon` while history carries forward.
pub fn eval_failure(
    store: &EmbeddingStore,
    predictor: Predictor<'_>,
    decoder: &Decoder<f32>,
    protocol: &FailureProtocol,
) -> Result<FailureCurve> {
    protocol.validate()?;
    let mut sums = vec![0.0; protocol.horizon + 1];
    let mut anchor_ious = Vec::new();
    for id in require_scenarios(store)? {
        let records = store.read_scenario(id)?;
        let avail: Vec<u32> = records.iter().map(|r| r.n_cavs_available).collect();
        let anchors = protocol.anchors(&avail);
        let Some(&last_anchor) = anchors.last() else {
            continue;
        };
        let mut buffer = predictor.new_buffer();
        for (t, r) in records.iter().enumerate().take(last_anchor + 1) {
            let out = predictor.step(&embedding(r, FrameSource::Fused)?, &mut buffer)?;
            if anchors.binary_search(&t).is_err() {
                continue;
            }
            let at_t = frame_iou(decoder, &out, &r.gt)?;
            sums[0] += at_t;
            anchor_ious.push((id, t, at_t));
            let mut branch = buffer.clone();
            for k in 1..=protocol.horizon {
                let rk = &records[t + k];
                let out = predictor.step(&embedding(rk, FrameSource::EgoOnly)?, &mut branch)?;
                sums[k] += frame_iou(decoder, &out, &rk.gt)?;
            }
        }
    }
    let n = anchor_ious.len();
    if n == 0 {
        return Err(Error::Report(format!(
            "no qualifying anchors in split {}",
            store.root().display()
        )));
    }
    Ok(FailureCurve {
        iou: sums.iter().map(|s| s / n as f64).collect(),
        n_anchors: n,
        anchor_ious,
    })
}

/// The base model without history: offset 0 decodes the fused anchor frame,
/// later offsets the pooled ego-only IoU over `t+1..=t+horizon` (flat).
/// Also returns the unpooled per-offset ego-only means.
pub fn eval_no_history(
    store: &EmbeddingStore,
    decoder: &Decoder<f32>,
    protocol: &FailureProtocol,
) -> Result<(FailureCurve, Vec<f64>)> {
    protocol.validate()?;
    let mut fused_sum = 0.0;
    let mut per_offset = vec![0.0; protocol.horizon + 1];
    let mut anchor_ious = Vec::new();
    for id in require_scenarios(store)? {
        let records = store.read_scenario(id)?;
        let avail: Vec<u32> = records.iter().map(|r| r.n_cavs_available).collect();
        let ego: Vec<f64> = records
            .iter()
            .map(|r| frame_iou(decoder, &embedding(r, FrameSource::EgoOnly)?, &r.gt))
            .collect::<Result<_>>()?;
        for t in protocol.anchors(&avail) {
            let r = &records[t];
            let at_t = frame_iou(decoder, &embedding(r, FrameSource::Fused)?, &r.gt)?;
            fused_sum += at_t;
            anchor_ious.push((id, t, at_t));
            for k in 1..=protocol.horizon {
                per_offset[k] += ego[t + k];
            }
        }
    }
    let n = anchor_ious.len();
    if n == 0 {
        return Err(Error::Report(format!(
            "no qualifying anchors in split {}",
            store.root().display()
        )));
    }
    let per_offset: Vec<f64> = per_offset.iter().map(|s| s / n as f64).collect();
    let pooled = per_offset[1..].iter().sum::<f64>() / protocol.horizon as f64;
    let mut iou = vec![fused_sum / n as f64];
    iou.extend(std::iter::repeat_n(pooled, protocol.horizon));
    Ok((
        FailureCurve {
            iou,
            n_anchors: n,
            anchor_ious,
        },
        per_offset,
    ))
}

/// The failure protocol with [`Predictor::MeanHistory`].
pub fn mean_history_baseline(
    store: &EmbeddingStore,
    decoder: &Decoder<f32>,
    history_len: usize,
    protocol: &FailureProtocol,
) -> Result<FailureCurve> {
    eval_failure(store, Predictor::MeanHistory { history_len }, decoder, protocol)
}
