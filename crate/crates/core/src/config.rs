//! Run configuration: one TOML document with a section per component.
//!
//! ```toml
//! seed = 0
//! [split]     train_scenarios, eval_scenarios
//! [world]     world_size_m, grid_cells, n_frames, dt, min/max_vehicles, ...
//! [base]      channels, downsample, encoder_widths, decoder_widths, fusion
//! [pretrain]  epochs, batch_size, lr, lr_min, loss, ...
//! [temporal]  history_len, num_blocks, num_heads, num_keypoints, ...
//! [train]     seq_len, epochs, batch_size, lr, lr_min, comm_aug_prob, ...
//! [failure]   warmup_frames, horizon
//! [ablation]  cells, train_missing
//! ```
//!
//! Unknown keys are rejected. Overrides use dotted keys, e.g. `train.epochs=5`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base::{BaseConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::evaluator::FailureProtocol;
use crate::temporal::TemporalConfig;
use crate::trainer::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_scenarios: 40,
            eval_scenarios: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub cells: Vec<String>,
    /// Train cells whose checkpoint is missing.
    pub train_missing: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            cells: crate::evaluator::ALL_CELLS.iter().map(|s| s.to_string()).collect(),
            train_missing: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub split: SplitConfig,
    pub world: WorldConfig,
    pub base: BaseConfig,
    pub pretrain: PretrainConfig,
    pub temporal: TemporalConfig,
    pub train: TrainConfig,
    pub failure: FailureProtocol,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Small profile for smoke runs and the acceptance suite.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.split = SplitConfig {
            train_scenarios: 8,
            eval_scenarios: 2,
        };
        c.world.world_size_m = 70.0;
        c.world.grid_cells = 32;
        c.world.n_frames = 40;
        c.world.sensor_range_m = 25.0;
        c.world.comm_range_m = 35.0;
        c.world.min_vehicles = 5;
        c.world.max_vehicles = 9;
        c.world.min_cavs = 2;
        c.world.max_cavs = 4;
        c.pretrain.epochs = 16;
        c.pretrain.frame_stride = 1;
        c.pretrain.lr = 3e-3;
        c.train.epochs = 8;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::default().merged(text)
    }

    /// This configuration with the keys in `text` overlaid.
    pub fn merged(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = self.to_table();
        merge(&mut base, overlay);
        Self::from_table(base, text)
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    fn from_table(table: toml::Table, source: &str) -> Result<Self> {
        let text = toml::to_string(&table).expect("table serializes");
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(locate(&e, source)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key=value` override; `value` is TOML
    /// (bare words are taken as strings).
    pub fn set(&self, assignment: &str) -> Result<Self> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = self.to_table();
        let mut cur = &mut table;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        let last = parts[parts.len() - 1];
        if !cur.contains_key(last) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        cur.insert(last.to_string(), parsed);
        Self::from_table(table, assignment)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.base.validate()?;
        self.pretrain.validate()?;
        self.temporal.validate()?;
        self.train.validate()?;
        self.failure.validate()?;
        if self.temporal.channels != self.base.channels {
            return Err(Error::Config(format!(
                "temporal.channels ({}) must equal base.channels ({})",
                self.temporal.channels, self.base.channels
            )));
        }
        if !self.world.grid_cells.is_multiple_of(self.base.downsample) {
            return Err(Error::Config(format!(
                "world.grid_cells ({}) must be divisible by base.downsample ({})",
                self.world.grid_cells, self.base.downsample
            )));
        }
        if self.split.train_scenarios == 0 || self.split.eval_scenarios == 0 {
            return Err(Error::Config("both splits need at least one scenario".into()));
        }
        if self.train.seq_len > self.world.n_frames {
            return Err(Error::Config("train.seq_len exceeds world.n_frames".into()));
        }
        for c in &self.ablation.cells {
            if !crate::evaluator::ALL_CELLS.contains(&c.as_str()) {
                return Err(Error::Config(format!("unknown ablation cell `{c}`")));
            }
        }
        Ok(())
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Names the offending key and, when it can be found in `source`, its line.
fn locate(err: &toml::de::Error, source: &str) -> String {
    let msg = err.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_default();
    let line = (!key.is_empty())
        .then(|| {
            source.lines().position(|l| {
                let l = l.trim_start();
                l.starts_with(&key) && l[key.len()..].trim_start().starts_with('=')
            })
        })
        .flatten();
    match line {
        Some(n) => format!("{msg} (key `{key}` at line {})", n + 1),
        None => msg,
    }
}
