use ndarray::Array2;
use tempcobev::world::{
    agent_observation, comm_schedule, decode_scenario, encode_scenario, fused_observation,
    generate_scenario, ground_truth_map, read_scenario, write_scenario, EgoGrid, FailureWindow,
    Pose, Scenario, VehicleTrack, WorldConfig,
};
use tempcobev::Error;

fn still(id: u32, x: f32, y: f32, heading: f32, length: f32, width: f32) -> VehicleTrack {
    VehicleTrack {
        id,
        length,
        width,
        poses: vec![Pose { x, y, heading }; 3],
    }
}

fn count(m: &Array2<bool>) -> usize {
    m.iter().filter(|&&v| v).count()
}

fn subset(a: &Array2<bool>, b: &Array2<bool>) -> bool {
    a.iter().zip(b.iter()).all(|(&x, &y)| !x || y)
}

#[test]
fn per_frame_displacement_bounded_by_max_speed() {
    let cfg = WorldConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let s = generate_scenario(&cfg, seed).unwrap();
        for v in &s.vehicles {
            for w in v.poses.windows(2) {
                let d = ((w[1].x - w[0].x) as f64).hypot((w[1].y - w[0].y) as f64);
                worst = worst.max(d);
            }
        }
    }
    assert!(worst <= 12.0 * 0.1 + 1e-4, "max displacement {worst}");
    assert!(worst > 0.5);
}

#[test]
fn generation_is_bit_identical() {
    let cfg = WorldConfig::default();
    let a = encode_scenario(&generate_scenario(&cfg, 5).unwrap());
    let b = encode_scenario(&generate_scenario(&cfg, 5).unwrap());
    assert_eq!(a, b);
    let c = encode_scenario(&generate_scenario(&cfg, 6).unwrap());
    assert_ne!(a, c);
}

#[test]
fn no_overlap_at_first_frame() {
    let cfg = WorldConfig::default();
    for seed in 0..20 {
        let s = generate_scenario(&cfg, seed).unwrap();
        let ego = s.vehicle(s.ego_id).unwrap().clone();
        let mut per_vehicle = 0;
        for v in s.vehicles.iter().filter(|v| v.id != s.ego_id) {
            let alone = Scenario {
                vehicles: vec![ego.clone(), v.clone()],
                ..s.clone()
            };
            per_vehicle += count(&ground_truth_map(&alone, &cfg, 0).unwrap());
        }
        let ego_cells = count(
            &ground_truth_map(
                &Scenario {
                    vehicles: vec![ego.clone()],
                    ..s.clone()
                },
                &cfg,
                0,
            )
            .unwrap(),
        );
        let others = s.vehicles.len() - 1;
        // disjoint footprints rasterize to disjoint cell sets
        let total = count(&ground_truth_map(&s, &cfg, 0).unwrap());
        assert_eq!(per_vehicle - (others - 1) * ego_cells, total, "seed {seed}");
    }
}

/// Observer at the origin, a large blocker ahead, a smaller car behind it.
fn collinear(hidden_y: f32) -> Scenario {
    Scenario {
        seed: 0,
        dt: 0.1,
        vehicles: vec![
            still(0, 0.0, 0.0, 0.0, 4.5, 2.0),
            still(1, 8.0, 0.0, 0.0, 4.0, 2.0),
            still(2, 20.0, hidden_y, 0.0, 4.5, 1.8),
        ],
        cav_ids: vec![0],
        ego_id: 0,
    }
}

/// Dense-sampling oracle: is any point of the segment inside the rectangle?
fn segment_blocked(a: (f64, f64), b: (f64, f64), v: &VehicleTrack) -> bool {
    let p = v.poses[0];
    let (s, c) = (p.heading as f64).sin_cos();
    (0..=4000).any(|k| {
        let t = k as f64 / 4000.0;
        let (x, y) = (a.0 + t * (b.0 - a.0) - p.x as f64, a.1 + t * (b.1 - a.1) - p.y as f64);
        let u = x * c + y * s;
        let w = -x * s + y * c;
        u.abs() <= v.length as f64 / 2.0 && w.abs() <= v.width as f64 / 2.0
    })
}

fn oracle_observation(s: &Scenario, cfg: &WorldConfig, observer: u32) -> Array2<bool> {
    let ego = s.pose(s.ego_id, 0).unwrap();
    let grid = EgoGrid::new(cfg, ego);
    let obs = s.pose(observer, 0).unwrap();
    let origin = (obs.x as f64, obs.y as f64);
    Array2::from_shape_fn((cfg.grid_cells, cfg.grid_cells), |(i, j)| {
        let (x, y) = grid.cell_center(i, j);
        s.vehicles.iter().any(|v| {
            let p = v.poses[0];
            let (sn, cs) = (p.heading as f64).sin_cos();
            let (dx, dy) = (x - p.x as f64, y - p.y as f64);
            let inside = (dx * cs + dy * sn).abs() <= v.length as f64 / 2.0
                && (-dx * sn + dy * cs).abs() <= v.width as f64 / 2.0;
            if !inside {
                return false;
            }
            if v.id == observer {
                return true;
            }
            if (x - origin.0).hypot(y - origin.1) > cfg.sensor_range_m {
                return false;
            }
            !s.vehicles
                .iter()
                .filter(|o| o.id != observer && o.id != v.id)
                .any(|o| segment_blocked(origin, (x, y), o))
        })
    })
}

#[test]
fn vehicle_fully_behind_another_is_invisible() {
    let cfg = WorldConfig::default();
    let s = collinear(0.0);
    let obs = agent_observation(&s, &cfg, 0, 0).unwrap();
    let gt = ground_truth_map(&s, &cfg, 0).unwrap();
    assert_eq!(obs, oracle_observation(&s, &cfg, 0));

    let without_hidden = Scenario {
        vehicles: s.vehicles[..2].to_vec(),
        ..s.clone()
    };
    let gt_without = ground_truth_map(&without_hidden, &cfg, 0).unwrap();
    assert!(count(&gt) > count(&gt_without));
    assert_eq!(obs, gt_without, "hidden vehicle contributed cells");

    // moved aside it becomes visible, in agreement with the oracle
    let s = collinear(9.0);
    let obs = agent_observation(&s, &cfg, 0, 0).unwrap();
    assert_eq!(obs, oracle_observation(&s, &cfg, 0));
    assert_eq!(obs, ground_truth_map(&s, &cfg, 0).unwrap());
}

#[test]
fn random_scenes_match_occlusion_oracle() {
    let cfg = WorldConfig::default();
    for seed in 0..3 {
        let s = generate_scenario(&cfg, seed).unwrap();
        for &a in &s.cav_ids {
            let obs = agent_observation(&s, &cfg, 0, a).unwrap();
            let oracle = oracle_observation(&s, &cfg, a);
            let diff = obs.iter().zip(oracle.iter()).filter(|(x, y)| x != y).count();
            // sampling can only miss grazing hits
            assert!(diff <= 2, "seed {seed} agent {a}: {diff} cells differ");
        }
    }
}

#[test]
fn own_footprint_always_visible() {
    let cfg = WorldConfig {
        sensor_range_m: 0.1,
        ..WorldConfig::default()
    };
    let s = generate_scenario(&cfg, 2).unwrap();
    for &a in &s.cav_ids {
        let only = Scenario {
            vehicles: vec![s.vehicle(a).unwrap().clone(), s.vehicle(s.ego_id).unwrap().clone()],
            ..s.clone()
        };
        let mut own = ground_truth_map(&only, &cfg, 0).unwrap();
        if a != s.ego_id {
            let ego = ground_truth_map(
                &Scenario {
                    vehicles: vec![s.vehicle(s.ego_id).unwrap().clone()],
                    ..s.clone()
                },
                &cfg,
                0,
            )
            .unwrap();
            own.zip_mut_with(&ego, |o, &e| *o &= !e);
        }
        let obs = agent_observation(&s, &cfg, 0, a).unwrap();
        assert!(subset(&own, &obs));
    }
}

#[test]
fn union_and_ground_truth_containment() {
    let cfg = WorldConfig::default();
    for seed in 0..5 {
        let s = generate_scenario(&cfg, seed).unwrap();
        for frame in [0, 30, 59] {
            let gt = ground_truth_map(&s, &cfg, frame).unwrap();
            let fused = fused_observation(&s, &cfg, frame, &s.cav_ids).unwrap();
            assert!(subset(&fused, &gt));
            for &a in &s.cav_ids {
                let obs = agent_observation(&s, &cfg, frame, a).unwrap();
                assert!(subset(&obs, &fused));
                assert!(subset(&obs, &gt));
            }
        }
    }
}

#[test]
fn empty_world_map_is_ego_footprint() {
    let cfg = WorldConfig::default();
    let s = Scenario {
        seed: 0,
        dt: 0.1,
        vehicles: vec![still(4, 12.0, -3.0, 0.4, 4.6, 2.0)],
        cav_ids: vec![4],
        ego_id: 4,
    };
    let gt = ground_truth_map(&s, &cfg, 0).unwrap();
    let grid = EgoGrid::new(&cfg, s.pose(4, 0).unwrap());
    let expected = Array2::from_shape_fn(gt.dim(), |(i, j)| {
        let (dx, dy) = grid.cell_offset(i, j);
        let (sn, cs) = 0.4f32.sin_cos();
        let (sn, cs) = (sn as f64, cs as f64);
        (dx * cs + dy * sn).abs() <= 2.3 && (-dx * sn + dy * cs).abs() <= 1.0
    });
    assert_eq!(gt, expected);
    // heading-aligned and centered: a 4.6 x 2.0 m car spans three cells
    // along the forward axis of the middle column
    let c = cfg.grid_cells / 2;
    assert_eq!(count(&gt), 3);
    assert!(gt[[c - 1, c]] && gt[[c, c]] && gt[[c + 1, c]]);
}

fn quantize(v: f32) -> f32 {
    (v * 256.0).round() / 256.0
}

#[test]
fn translation_leaves_map_unchanged() {
    let cfg = WorldConfig::default();
    for seed in 0..5 {
        let mut s = generate_scenario(&cfg, seed).unwrap();
        for v in &mut s.vehicles {
            for p in &mut v.poses {
                p.x = quantize(p.x);
                p.y = quantize(p.y);
            }
        }
        let mut shifted = s.clone();
        for v in &mut shifted.vehicles {
            for p in &mut v.poses {
                p.x += 5.0;
                p.y += 5.0;
            }
        }
        for frame in [0, 20, 59] {
            assert_eq!(
                ground_truth_map(&s, &cfg, frame).unwrap(),
                ground_truth_map(&shifted, &cfg, frame).unwrap()
            );
            assert_eq!(
                fused_observation(&s, &cfg, frame, &s.cav_ids).unwrap(),
                fused_observation(&shifted, &cfg, frame, &s.cav_ids).unwrap()
            );
        }
    }
}

#[test]
fn larger_sensor_range_never_removes_cells() {
    let small = WorldConfig {
        sensor_range_m: 20.0,
        ..WorldConfig::default()
    };
    let large = WorldConfig::default();
    for seed in 0..5 {
        let s = generate_scenario(&large, seed).unwrap();
        for &a in &s.cav_ids {
            let lo = agent_observation(&s, &small, 10, a).unwrap();
            let hi = agent_observation(&s, &large, 10, a).unwrap();
            assert!(subset(&lo, &hi));
        }
    }
}

#[test]
fn cooperation_adds_visible_cells() {
    let cfg = WorldConfig::default();
    let (mut fused, mut ego) = (0usize, 0usize);
    for seed in 0..20 {
        let s = generate_scenario(&cfg, seed).unwrap();
        let sched = comm_schedule(&s, &cfg, &[]).unwrap();
        for frame in (0..s.n_frames()).step_by(10) {
            fused += count(&fused_observation(&s, &cfg, frame, &sched.available[frame]).unwrap());
            ego += count(&agent_observation(&s, &cfg, frame, s.ego_id).unwrap());
        }
    }
    assert!(fused > ego, "fused {fused} vs ego {ego}");
}

#[test]
fn observation_rejects_non_cav() {
    let cfg = WorldConfig::default();
    let s = collinear(0.0);
    assert!(matches!(agent_observation(&s, &cfg, 0, 1), Err(Error::Argument(_))));
    assert!(matches!(agent_observation(&s, &cfg, 0, 99), Err(Error::Argument(_))));
    assert!(ground_truth_map(&s, &cfg, 3).is_err());
}

fn pair(distance: f32) -> Scenario {
    Scenario {
        seed: 0,
        dt: 0.1,
        vehicles: vec![
            VehicleTrack {
                id: 0,
                length: 4.5,
                width: 2.0,
                poses: vec![Pose { x: 0.0, y: 0.0, heading: 0.0 }; 40],
            },
            VehicleTrack {
                id: 1,
                length: 4.5,
                width: 2.0,
                poses: vec![Pose { x: distance, y: 0.0, heading: 0.0 }; 40],
            },
        ],
        cav_ids: vec![0, 1],
        ego_id: 0,
    }
}

#[test]
fn comm_range_gate_and_failures() {
    let cfg = WorldConfig::default();
    let far = comm_schedule(&pair(71.0), &cfg, &[]).unwrap();
    assert!(far.available.iter().all(|a| a == &[0]));

    let near = pair(40.0);
    let all = comm_schedule(&near, &cfg, &[]).unwrap();
    assert!(all.available.iter().all(|a| a == &[0, 1]));

    let w = FailureWindow { start: 30, end: 33 };
    let failed = comm_schedule(&near, &cfg, &[w]).unwrap();
    for (f, a) in failed.available.iter().enumerate() {
        if (30..=33).contains(&f) {
            assert_eq!(a, &[0]);
        } else {
            assert_eq!(a, &[0, 1]);
        }
    }
    assert!(failed.in_failure(31) && !failed.in_failure(34));

    for bad in [FailureWindow { start: 5, end: 4 }, FailureWindow { start: 38, end: 40 }] {
        assert!(matches!(comm_schedule(&near, &cfg, &[bad]), Err(Error::Argument(_))));
    }
}

#[test]
fn generated_schedules_respect_range() {
    let cfg = WorldConfig::default();
    for seed in 0..10 {
        let s = generate_scenario(&cfg, seed).unwrap();
        let sched = comm_schedule(&s, &cfg, &[]).unwrap();
        for (f, ids) in sched.available.iter().enumerate() {
            assert!(ids.contains(&s.ego_id));
            let e = s.pose(s.ego_id, f).unwrap();
            for &id in ids {
                let p = s.pose(id, f).unwrap();
                assert!(s.is_cav(id));
                assert!(((p.x - e.x) as f64).hypot((p.y - e.y) as f64) <= cfg.comm_range_m);
            }
        }
    }
}

#[test]
fn scenario_file_roundtrip() {
    let cfg = WorldConfig::default();
    let s = generate_scenario(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.tbw");
    write_scenario(&path, &s).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"TBW1");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 9);
    assert_eq!(read_scenario(&path).unwrap(), s);

    assert!(matches!(decode_scenario(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_scenario(&bad), Err(Error::Data(_))));
}
