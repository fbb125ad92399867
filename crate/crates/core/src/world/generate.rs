use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Pose, Scenario, VehicleTrack, WorldConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EgoSelection {
    /// Lowest CAV id (evaluation).
    Lowest,
    /// Uniform among CAVs, drawn from the scenario seed (training).
    Random,
}

const PLACEMENT_RETRIES: usize = 200;
const TURN_RADIUS_M: f64 = 10.0;
const SPAWN_MARGIN_M: f64 = 0.5;

/// Deterministic scenario for `(cfg, seed)` with the fixed (lowest-id) ego.
pub fn generate_scenario(cfg: &WorldConfig, seed: u64) -> Result<Scenario> {
    generate_scenario_with(cfg, seed, EgoSelection::Lowest)
}

struct Spawn {
    x: f64,
    y: f64,
    heading: f64,
    length: f64,
    width: f64,
}

pub fn generate_scenario_with(cfg: &WorldConfig, seed: u64, ego: EgoSelection) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vehicles = rng.random_range(cfg.min_vehicles..=cfg.max_vehicles);
    let scale = cfg.world_size_m / 140.0;
    let roads = [-30.0 * scale, 0.0, 30.0 * scale];
    let extent = 0.36 * cfg.world_size_m;

    let mut spawns: Vec<Spawn> = Vec::with_capacity(n_vehicles);
    for _ in 0..n_vehicles {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let road = roads[rng.random_range(0..roads.len())];
            let forward = rng.random_bool(0.5);
            let along = rng.random_range(-extent..extent);
            let lane = if forward { -1.75 } else { 1.75 };
            let (x, y, heading) = if rng.random_bool(0.5) {
                // east-west road: drive on the right
                (along, road + lane, if forward { 0.0 } else { PI })
            } else {
                (road - lane, along, if forward { FRAC_PI_2 } else { -FRAC_PI_2 })
            };
            let cand = Spawn {
                x,
                y,
                heading,
                length: rng.random_range(4.0..5.0),
                width: rng.random_range(1.8..2.2),
            };
            if spawns.iter().all(|s| !boxes_overlap(s, &cand, SPAWN_MARGIN_M)) {
                spawns.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation {
                seed,
                reason: format!(
                    "could not place vehicle {} of {n_vehicles} without overlap",
                    spawns.len()
                ),
            });
        }
    }

    let vehicles = spawns
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            let turn = rng.random_bool(cfg.turn_prob).then(|| {
                let start = rng.random_range(0..cfg.n_frames.max(1));
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (start, dir)
            });
            VehicleTrack {
                id: id as u32,
                length: s.length as f32,
                width: s.width as f32,
                poses: integrate(s, speed, turn, cfg),
            }
        })
        .collect::<Vec<_>>();

    let n_cavs = rng.random_range(cfg.min_cavs..=cfg.max_cavs.min(n_vehicles));
    let mut cav_ids: Vec<u32> = sample(&mut rng, n_vehicles, n_cavs)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    cav_ids.sort_unstable();
    let ego_id = match ego {
        EgoSelection::Lowest => cav_ids[0],
        EgoSelection::Random => cav_ids[rng.random_range(0..cav_ids.len())],
    };
    Ok(Scenario {
        seed,
        dt: cfg.dt as f32,
        vehicles,
        cav_ids,
        ego_id,
    })
}

/// Constant speed along the heading; a turning vehicle sweeps 90 degrees on a
/// fixed-radius arc starting at `turn.0`.
fn integrate(s: &Spawn, speed: f64, turn: Option<(usize, f64)>, cfg: &WorldConfig) -> Vec<Pose> {
    let step = speed * cfg.dt;
    let rate = step / TURN_RADIUS_M;
    let (mut x, mut y, mut h) = (s.x, s.y, s.heading);
    let mut turned = 0.0;
    let mut poses = Vec::with_capacity(cfg.n_frames);
    for frame in 0..cfg.n_frames {
        poses.push(Pose {
            x: x as f32,
            y: y as f32,
            heading: wrap_angle(h) as f32,
        });
        x += step * h.cos();
        y += step * h.sin();
        if let Some((start, dir)) = turn {
            if frame >= start && turned < FRAC_PI_2 {
                let d = rate.min(FRAC_PI_2 - turned);
                h += dir * d;
                turned += d;
            }
        }
    }
    poses
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Separating-axis test between two oriented rectangles grown by `margin`.
fn boxes_overlap(a: &Spawn, b: &Spawn, margin: f64) -> bool {
    let axes = |h: f64| [(h.cos(), h.sin()), (-h.sin(), h.cos())];
    let half = |s: &Spawn| (s.length / 2.0 + margin, s.width / 2.0 + margin);
    let (ax, bx) = (axes(a.heading), axes(b.heading));
    let (ha, hb) = (half(a), half(b));
    let d = (b.x - a.x, b.y - a.y);
    for axis in ax.iter().chain(bx.iter()) {
        let proj = |ex: &[(f64, f64); 2], h: (f64, f64)| {
            h.0 * (ex[0].0 * axis.0 + ex[0].1 * axis.1).abs() + h.1 * (ex[1].0 * axis.0 + ex[1].1 * axis.1).abs()
        };
        let dist = (d.0 * axis.0 + d.1 * axis.1).abs();
        if dist > proj(&ax, ha) + proj(&bx, hb) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let cfg = WorldConfig::default();
        let a = generate_scenario(&cfg, 11).unwrap();
        let b = generate_scenario(&cfg, 11).unwrap();
        assert_eq!(a, b);
        for seed in 0..20 {
            let s = generate_scenario(&cfg, seed).unwrap();
            assert!((6..=14).contains(&s.vehicles.len()));
            assert!((2..=7).contains(&s.cav_ids.len()));
            assert!(s.is_cav(s.ego_id));
            assert_eq!(s.ego_id, s.cav_ids[0]);
            assert_eq!(s.n_frames(), 60);
        }
    }

    #[test]
    fn random_ego_is_a_cav() {
        let cfg = WorldConfig::default();
        let egos: std::collections::HashSet<u32> = (0..30)
            .map(|seed| {
                let s = generate_scenario_with(&cfg, seed, EgoSelection::Random).unwrap();
                assert!(s.is_cav(s.ego_id));
                s.ego_id
            })
            .collect();
        assert!(egos.len() > 1);
    }

    #[test]
    fn overlap_test() {
        let a = Spawn { x: 0.0, y: 0.0, heading: 0.0, length: 4.0, width: 2.0 };
        let b = Spawn { x: 4.2, y: 0.0, heading: 0.0, length: 4.0, width: 2.0 };
        assert!(!boxes_overlap(&a, &b, 0.0));
        assert!(boxes_overlap(&a, &b, 0.5));
        let c = Spawn { x: 0.0, y: 1.5, heading: FRAC_PI_2, length: 4.0, width: 2.0 };
        assert!(boxes_overlap(&a, &c, 0.0));
    }

    #[test]
    fn crowded_world_reports_seed() {
        let cfg = WorldConfig {
            world_size_m: 10.0,
            min_vehicles: 40,
            max_vehicles: 40,
            ..WorldConfig::default()
        };
        match generate_scenario(&cfg, 77) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("expected generation error, got {other:?}"),
        }
    }
}
