//! Synthetic multi-agent driving world.
//!
//! Vehicles drive lane-aligned tracks with piecewise-constant velocity; a
//! subset are connected agents (CAVs). Each agent observes vehicle cells within
//! its sensor range that are not occluded by another vehicle, rasterized in the
//! ego frame. The ego receives embeddings from CAVs within communication range
//! unless a failure window blanks the link.

mod comm;
mod generate;
mod io;
mod raster;

pub use comm::{comm_schedule, CommSchedule, FailureWindow};
pub use generate::{generate_scenario, generate_scenario_with, EgoSelection};
pub use io::{decode_scenario, encode_scenario, read_scenario, write_scenario, SCENARIO_MAGIC};
pub use raster::{agent_observation, fused_observation, ground_truth_map, EgoGrid, Occupancy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Side of the square, ego-centered BEV window in meters.
    pub world_size_m: f64,
    /// Map cells per side (`H_out = W_out`).
    pub grid_cells: usize,
    pub n_frames: usize,
    /// Seconds per frame.
    pub dt: f64,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    pub min_cavs: usize,
    pub max_cavs: usize,
    pub comm_range_m: f64,
    pub sensor_range_m: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Probability that a vehicle follows the turning template.
    pub turn_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            world_size_m: 140.0,
            grid_cells: 64,
            n_frames: 60,
            dt: 0.1,
            min_vehicles: 6,
            max_vehicles: 14,
            min_cavs: 2,
            max_cavs: 7,
            comm_range_m: 70.0,
            sensor_range_m: 50.0,
            min_speed: 3.0,
            max_speed: 12.0,
            turn_prob: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn resolution(&self) -> f64 {
        self.world_size_m / self.grid_cells as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.comm_range_m > 0.0) {
            return bad("comm_range_m must be positive");
        }
        if !(self.sensor_range_m > 0.0) {
            return bad("sensor_range_m must be positive");
        }
        if self.grid_cells == 0 || !(self.world_size_m > 0.0) {
            return bad("grid_cells and world_size_m must be positive");
        }
        if self.min_cavs < 1 || self.min_cavs > self.max_cavs {
            return bad("need 1 <= min_cavs <= max_cavs");
        }
        if self.min_vehicles > self.max_vehicles || self.max_cavs > self.min_vehicles.max(1) * 100 {
            return bad("need min_vehicles <= max_vehicles");
        }
        if self.min_vehicles < self.min_cavs {
            return bad("min_vehicles must be at least min_cavs");
        }
        if self.n_frames == 0 || !(self.dt > 0.0) {
            return bad("n_frames and dt must be positive");
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed) {
            return bad("need 0 < min_speed <= max_speed");
        }
        if !(0.0..=1.0).contains(&self.turn_prob) {
            return bad("turn_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f32,
    pub y: f32,
    pub heading: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleTrack {
    pub id: u32,
    pub length: f32,
    pub width: f32,
    pub poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub dt: f32,
    pub vehicles: Vec<VehicleTrack>,
    pub cav_ids: Vec<u32>,
    pub ego_id: u32,
}

impl Scenario {
    pub fn n_frames(&self) -> usize {
        self.vehicles.first().map_or(0, |v| v.poses.len())
    }

    pub fn vehicle(&self, id: u32) -> Option<&VehicleTrack> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn is_cav(&self, id: u32) -> bool {
        self.cav_ids.contains(&id)
    }

    pub fn pose(&self, id: u32, frame: usize) -> Option<Pose> {
        self.vehicle(id).and_then(|v| v.poses.get(frame).copied())
    }

    /// Copy with a different ego; the new ego must be a CAV.
    pub fn with_ego(&self, ego_id: u32) -> Result<Self> {
        if !self.is_cav(ego_id) {
            return Err(Error::Argument(format!("vehicle {ego_id} is not a CAV")));
        }
        Ok(Self {
            ego_id,
            ..self.clone()
        })
    }
}
