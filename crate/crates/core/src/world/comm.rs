use serde::{Deserialize, Serialize};

use super::{Scenario, WorldConfig};
use crate::error::{Error, Result};

/// Inclusive frame interval during which the ego hears no other CAV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureWindow {
    pub start: usize,
    pub end: usize,
}

impl FailureWindow {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommSchedule {
    /// Per frame, sorted ids whose embeddings reach the ego (always includes it).
    pub available: Vec<Vec<u32>>,
    pub failure_windows: Vec<FailureWindow>,
}

impl CommSchedule {
    pub fn n_frames(&self) -> usize {
        self.available.len()
    }

    pub fn in_failure(&self, frame: usize) -> bool {
        self.failure_windows.iter().any(|w| w.contains(frame))
    }
}

pub fn comm_schedule(
    scn: &Scenario,
    cfg: &WorldConfig,
    failures: &[FailureWindow],
) -> Result<CommSchedule> {
    let n = scn.n_frames();
    for w in failures {
        if w.start > w.end || w.end >= n {
            return Err(Error::Argument(format!(
                "failure window [{}, {}] invalid for {n} frames",
                w.start, w.end
            )));
        }
    }
    let ego = scn
        .vehicle(scn.ego_id)
        .ok_or_else(|| Error::Argument(format!("ego {} not in scenario", scn.ego_id)))?;
    let available = (0..n)
        .map(|f| {
            if failures.iter().any(|w| w.contains(f)) {
                return vec![scn.ego_id];
            }
            let e = ego.poses[f];
            let mut ids: Vec<u32> = scn
                .cav_ids
                .iter()
                .copied()
                .filter(|&id| {
                    id == scn.ego_id
                        || scn.pose(id, f).is_some_and(|p| {
                            let d = (p.x as f64 - e.x as f64).hypot(p.y as f64 - e.y as f64);
                            d <= cfg.comm_range_m
                        })
                })
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    Ok(CommSchedule {
        available,
        failure_windows: failures.to_vec(),
    })
}
