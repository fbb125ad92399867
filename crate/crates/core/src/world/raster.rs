use ndarray::Array2;

use super::{Pose, Scenario, VehicleTrack, WorldConfig};
use crate::error::{Error, Result};

/// Binary occupancy grid in the ego frame; row 0 is the far-forward edge and
/// column 0 the far-left edge. The ego sits at the center of cell
/// `(cells / 2, cells / 2)`.
pub type Occupancy = Array2<bool>;

/// Ego-centered grid geometry for one frame.
#[derive(Clone, Copy, Debug)]
pub struct EgoGrid {
    pub ego: Pose,
    pub cells: usize,
    pub resolution: f64,
}

impl EgoGrid {
    pub fn new(cfg: &WorldConfig, ego: Pose) -> Self {
        Self {
            ego,
            cells: cfg.grid_cells,
            resolution: cfg.resolution(),
        }
    }

    /// World-axis offset from the ego to the center of cell `(row, col)`.
    ///
    /// Geometry is kept relative to the ego so that a global translation of
    /// the scene leaves every computation bit-identical.
    pub fn cell_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let center = (self.cells / 2) as f64;
        let fwd = (center - row as f64) * self.resolution;
        let left = (center - col as f64) * self.resolution;
        let (s, c) = (self.ego.heading as f64).sin_cos();
        (fwd * c - left * s, fwd * s + left * c)
    }

    /// World coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_offset(row, col);
        (self.ego.x as f64 + dx, self.ego.y as f64 + dy)
    }

    /// Fractional `(row, col)` of a world point.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        self.offset_to_grid(x - self.ego.x as f64, y - self.ego.y as f64)
    }

    pub fn offset_to_grid(&self, dx: f64, dy: f64) -> (f64, f64) {
        let (s, c) = (self.ego.heading as f64).sin_cos();
        let fwd = dx * c + dy * s;
        let left = -dx * s + dy * c;
        let center = (self.cells / 2) as f64;
        (center - fwd / self.resolution, center - left / self.resolution)
    }
}

#[derive(Clone, Copy, Debug)]
struct Footprint {
    x: f64,
    y: f64,
    cos: f64,
    sin: f64,
    half_len: f64,
    half_wid: f64,
}

impl Footprint {
    /// Footprint relative to `origin`.
    fn new(v: &VehicleTrack, p: Pose, origin: Pose) -> Self {
        let (sin, cos) = (p.heading as f64).sin_cos();
        Self {
            x: p.x as f64 - origin.x as f64,
            y: p.y as f64 - origin.y as f64,
            cos,
            sin,
            half_len: v.length as f64 / 2.0,
            half_wid: v.width as f64 / 2.0,
        }
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.x, y - self.y);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u.abs() <= self.half_len && v.abs() <= self.half_wid
    }

    fn bounding_radius(&self) -> f64 {
        self.half_len.hypot(self.half_wid)
    }

    /// Slab test of the closed segment `a -> b` against the rectangle.
    fn hits_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let p = self.local(a.0, a.1);
        let q = self.local(b.0, b.1);
        let d = (q.0 - p.0, q.1 - p.1);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (start, delta, half) in [(p.0, d.0, self.half_len), (p.1, d.1, self.half_wid)] {
            if delta.abs() < 1e-12 {
                if start.abs() > half {
                    return false;
                }
            } else {
                let ta = (-half - start) / delta;
                let tb = (half - start) / delta;
                let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

fn frame_footprints(scn: &Scenario, frame: usize, origin: Pose) -> Result<Vec<(u32, Footprint)>> {
    if frame >= scn.n_frames() {
        return Err(Error::Argument(format!(
            "frame {frame} out of range (scenario has {} frames)",
            scn.n_frames()
        )));
    }
    Ok(scn
        .vehicles
        .iter()
        .map(|v| (v.id, Footprint::new(v, v.poses[frame], origin)))
        .collect())
}

fn ego_grid(scn: &Scenario, cfg: &WorldConfig, frame: usize) -> Result<EgoGrid> {
    if frame >= scn.n_frames() {
        return Err(Error::Argument(format!(
            "frame {frame} out of range (scenario has {} frames)",
            scn.n_frames()
        )));
    }
    let ego = scn
        .pose(scn.ego_id, frame)
        .ok_or_else(|| Error::Argument(format!("ego {} missing at frame {frame}", scn.ego_id)))?;
    Ok(EgoGrid::new(cfg, ego))
}

/// Calls `f(row, col, dx, dy)` for every cell whose center lies in `fp`,
/// with the center given relative to the ego.
fn for_cells_in(grid: &EgoGrid, fp: &Footprint, mut f: impl FnMut(usize, usize, f64, f64)) {
    let r = fp.bounding_radius() / grid.resolution + 1.0;
    let (row, col) = grid.offset_to_grid(fp.x, fp.y);
    let n = grid.cells as f64;
    let lo = |v: f64| (v - r).floor().clamp(0.0, n) as usize;
    let hi = |v: f64| (v + r).ceil().clamp(0.0, n) as usize;
    for i in lo(row)..hi(row) {
        for j in lo(col)..hi(col) {
            let (x, y) = grid.cell_offset(i, j);
            if fp.contains(x, y) {
                f(i, j, x, y);
            }
        }
    }
}

/// Occupancy of every vehicle footprint in the ego window, ignoring visibility.
pub fn ground_truth_map(scn: &Scenario, cfg: &WorldConfig, frame: usize) -> Result<Occupancy> {
    let grid = ego_grid(scn, cfg, frame)?;
    let mut out = Occupancy::from_elem((grid.cells, grid.cells), false);
    for (_, fp) in frame_footprints(scn, frame, grid.ego)? {
        for_cells_in(&grid, &fp, |i, j, _, _| out[[i, j]] = true);
    }
    Ok(out)
}

/// Cells of vehicles that `agent_id` can see at `frame`, in the ego frame.
///
/// A cell counts when its center is within sensor range of the agent and the
/// segment from the agent to the center crosses no third vehicle.
pub fn agent_observation(
    scn: &Scenario,
    cfg: &WorldConfig,
    frame: usize,
    agent_id: u32,
) -> Result<Occupancy> {
    if !scn.is_cav(agent_id) {
        return Err(Error::Argument(format!("vehicle {agent_id} is not a CAV")));
    }
    let grid = ego_grid(scn, cfg, frame)?;
    let fps = frame_footprints(scn, frame, grid.ego)?;
    let agent = fps
        .iter()
        .find(|(id, _)| *id == agent_id)
        .map(|(_, fp)| *fp)
        .ok_or_else(|| Error::Argument(format!("unknown agent {agent_id}")))?;
    let origin = (agent.x, agent.y);
    let range2 = cfg.sensor_range_m * cfg.sensor_range_m;
    let mut out = Occupancy::from_elem((grid.cells, grid.cells), false);
    for (id, fp) in &fps {
        let own = *id == agent_id;
        for_cells_in(&grid, fp, |i, j, x, y| {
            if own {
                out[[i, j]] = true;
                return;
            }
            let (dx, dy) = (x - origin.0, y - origin.1);
            if dx * dx + dy * dy > range2 {
                return;
            }
            let blocked = fps
                .iter()
                .filter(|(o, _)| *o != agent_id && o != id)
                .any(|(_, other)| other.hits_segment(origin, (x, y)));
            if !blocked {
                out[[i, j]] = true;
            }
        });
    }
    Ok(out)
}

/// Union of the observations of `agents`.
pub fn fused_observation(
    scn: &Scenario,
    cfg: &WorldConfig,
    frame: usize,
    agents: &[u32],
) -> Result<Occupancy> {
    let mut out = Occupancy::from_elem((cfg.grid_cells, cfg.grid_cells), false);
    for &a in agents {
        let obs = agent_observation(scn, cfg, frame, a)?;
        out.zip_mut_with(&obs, |o, &b| *o |= b);
    }
    Ok(out)
}
