#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempcobev::nn::{flatten, set_flat, Parameters};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences on `count` randomly chosen parameters (or all of
/// them when `count` is `None`). Returns `(analytic, numeric)` pairs.
pub fn finite_difference<M, L>(
    model: &M,
    grads: &M,
    loss: L,
    eps: f64,
    count: Option<usize>,
    seed: u64,
) -> Vec<(f64, f64)>
where
    M: Parameters<f64> + Clone,
    L: Fn(&M) -> f64,
{
    let base = flatten(model);
    let analytic = flatten(grads);
    let indices: Vec<usize> = match count {
        None => (0..base.len()).collect(),
        Some(k) => {
            let mut r = rng(seed);
            (0..k).map(|_| r.random_range(0..base.len())).collect()
        }
    };
    indices
        .into_iter()
        .map(|i| {
            let mut probe = model.clone();
            let mut v = base.clone();
            v[i] = base[i] + eps;
            set_flat(&mut probe, &v);
            let up = loss(&probe);
            v[i] = base[i] - eps;
            set_flat(&mut probe, &v);
            let down = loss(&probe);
            (analytic[i], (up - down) / (2.0 * eps))
        })
        .collect()
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

pub fn random_array3(shape: (usize, usize, usize), seed: u64) -> ndarray::Array3<f64> {
    let mut r = rng(seed);
    ndarray::Array3::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
}

pub fn random_array2(shape: (usize, usize), seed: u64) -> ndarray::Array2<f64> {
    let mut r = rng(seed);
    ndarray::Array2::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
}

pub mod oracle;

pub mod fixture {
    use std::path::Path;

    use tempcobev::base::{BaseConfig, BaseModel};
    use tempcobev::store::{cache_embeddings, EmbeddingStore};
    use tempcobev::temporal::TemporalConfig;
    use tempcobev::world::{generate_scenario_with, EgoSelection, Scenario, WorldConfig};

    pub fn world() -> WorldConfig {
        WorldConfig {
            world_size_m: 40.0,
            grid_cells: 16,
            n_frames: 12,
            min_vehicles: 4,
            max_vehicles: 6,
            min_cavs: 2,
            max_cavs: 3,
            comm_range_m: 20.0,
            sensor_range_m: 15.0,
            ..WorldConfig::default()
        }
    }

    pub fn base_config() -> BaseConfig {
        BaseConfig {
            channels: 8,
            downsample: 4,
            encoder_widths: [4, 8],
            decoder_widths: [8, 4, 4],
            ..BaseConfig::default()
        }
    }

    pub fn temporal_config() -> TemporalConfig {
        TemporalConfig {
            history_len: 1,
            num_blocks: 1,
            num_heads: 2,
            num_keypoints: 2,
            channels: 8,
            feedforward_dim: 16,
            importance_channels: 4,
            ..TemporalConfig::default()
        }
    }

    pub fn scenarios(first_id: u64, n: usize) -> Vec<(u64, Scenario)> {
        let w = world();
        (first_id..first_id + n as u64)
            .map(|id| (id, generate_scenario_with(&w, 1000 + id, EgoSelection::Lowest).unwrap()))
            .collect()
    }

    pub struct Setup {
        pub world: WorldConfig,
        pub base: BaseModel<f32>,
        pub train_scenarios: Vec<(u64, Scenario)>,
        pub train: EmbeddingStore,
        pub eval: EmbeddingStore,
    }

    /// Untrained tiny base model with train (3 scenarios) and eval (2) stores under `dir`.
    pub fn setup(dir: &Path) -> Setup {
        let world = world();
        let base = BaseModel::<f32>::new(base_config(), &mut super::rng(5)).unwrap();
        let train_scenarios = scenarios(0, 3);
        cache_embeddings(&dir.join("train"), &train_scenarios, &world, &base).unwrap();
        cache_embeddings(&dir.join("eval"), &scenarios(3, 2), &world, &base).unwrap();
        Setup {
            train: EmbeddingStore::open(&dir.join("train")).unwrap(),
            eval: EmbeddingStore::open(&dir.join("eval")).unwrap(),
            world,
            base,
            train_scenarios,
        }
    }
}
