//! The ablation matrix: each cell is one toggle applied to the run's
//! temporal and training configuration.

use std::fmt::Write as _;

use super::{eval_failure, mean_history_baseline, FailureProtocol, Predictor};
use crate::base::Decoder;
use crate::error::{Error, Result};
use crate::objectives::LossKind;
use crate::store::EmbeddingStore;
use crate::temporal::{TemporalConfig, TemporalFusion};
use crate::trainer::{AugFlags, TrainConfig};

pub const ALL_CELLS: &[&str] = &[
    "fa_qi",
    "fa_only",
    "qi_only",
    "neither",
    "hist_1",
    "hist_2",
    "hist_3",
    "hist_4",
    "aug_none",
    "aug_comm",
    "aug_comm_flip",
    "aug_comm_flip_rot",
    "loss_iou",
    "loss_weighted_ce",
    "temporal_tempcobev",
    "temporal_mean",
];

/// The four cells of the component grid.
pub const COMPONENT_CELLS: &[&str] = &["fa_qi", "fa_only", "qi_only", "neither"];

#[derive(Clone, Debug, PartialEq)]
pub enum CellSpec {
    Trained { temporal: TemporalConfig, train: TrainConfig },
    Mean { history_len: usize },
}

/// Resolves `name` against the run's configuration.
pub fn cell_spec(name: &str, temporal: &TemporalConfig, train: &TrainConfig) -> Result<CellSpec> {
    let mut t = temporal.clone();
    let mut r = train.clone();
    match name {
        "fa_qi" | "hist_1" | "aug_comm" | "loss_iou" | "temporal_tempcobev" => {}
        "fa_only" => t.query_importance = false,
        "qi_only" => t.feature_aggregation = false,
        "neither" => {
            t.feature_aggregation = false;
            t.query_importance = false;
        }
        "hist_2" | "hist_3" | "hist_4" => t.history_len = name[5..].parse().expect("digit"),
        "aug_none" => {
            r.comm_aug_prob = 0.0;
            r.failure_prob = 0.0;
            r.aug = AugFlags::default();
        }
        "aug_comm_flip" => r.aug = AugFlags { flip: true, rot90: false },
        "aug_comm_flip_rot" => r.aug = AugFlags { flip: true, rot90: true },
        "loss_weighted_ce" => r.loss = LossKind::WeightedCe,
        "temporal_mean" => {
            return Ok(CellSpec::Mean {
                history_len: temporal.history_len,
            })
        }
        other => return Err(Error::Config(format!("unknown ablation cell `{other}`"))),
    }
    // Cells pin the toggle they name; everything else follows the run.
    match name {
        "fa_qi" => {
            t.feature_aggregation = true;
            t.query_importance = true;
        }
        "hist_1" => t.history_len = 1,
        "aug_comm" => r.aug = AugFlags::default(),
        "loss_iou" => r.loss = LossKind::Iou,
        _ => {}
    }
    Ok(CellSpec::Trained { temporal: t, train: r })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    /// IoU at offsets `0..=horizon`.
    pub iou: Vec<f64>,
    pub n_anchors: usize,
    pub config_fingerprint: String,
}

pub enum CellModel {
    Trained(TemporalFusion<f32>),
    Mean { history_len: usize },
}

/// Runs the failure protocol for every cell.
pub fn run_ablations(
    store: &EmbeddingStore,
    decoder: &Decoder<f32>,
    protocol: &FailureProtocol,
    cells: &[(String, CellModel, String)],
) -> Result<Vec<AblationRow>> {
    cells
        .iter()
        .map(|(name, model, fingerprint)| {
            let curve = match model {
                CellModel::Trained(m) => eval_failure(store, Predictor::Temporal(m), decoder, protocol)?,
                CellModel::Mean { history_len } => mean_history_baseline(store, decoder, *history_len, protocol)?,
            };
            Ok(AblationRow {
                cell: name.clone(),
                iou: curve.iou,
                n_anchors: curve.n_anchors,
                config_fingerprint: fingerprint.clone(),
            })
        })
        .collect()
}

/// `cell,t,t+1,..,n_anchors,config_fingerprint`
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let horizon = rows.first().map_or(0, |r| r.iou.len().saturating_sub(1));
    let mut out = String::from("cell,t");
    for k in 1..=horizon {
        write!(out, ",t+{k}").unwrap();
    }
    out.push_str(",n_anchors,config_fingerprint\n");
    for r in rows {
        out.push_str(&r.cell);
        for v in &r.iou {
            write!(out, ",{v:.6}").unwrap();
        }
        writeln!(out, ",{},{}", r.n_anchors, r.config_fingerprint).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_cell_resolves() {
        let t = TemporalConfig::default();
        let r = TrainConfig::default();
        for name in ALL_CELLS {
            cell_spec(name, &t, &r).unwrap();
        }
        assert!(cell_spec("bogus", &t, &r).is_err());
        assert_eq!(
            cell_spec("fa_qi", &t, &r).unwrap(),
            CellSpec::Trained { temporal: t.clone(), train: r.clone() }
        );
        let CellSpec::Trained { temporal, .. } = cell_spec("neither", &t, &r).unwrap() else {
            panic!()
        };
        assert!(!temporal.feature_aggregation && !temporal.query_importance);
    }
}
