//! The command pipeline. Every stage reads its upstream directories under the
//! output root and writes its own directory through a staging sibling that is
//! promoted only once complete.
//!
//! ```text
//! <root>/scenarios/{train,eval}/scenario_NNNNNN.tbw
//! <root>/base/base.ckpt, metrics.csv
//! <root>/cache/{train,eval}/            embedding stores
//! <root>/train/temporal.ckpt, temporal_config.toml, metrics.csv, frozen.toml
//! <root>/eval/report.csv, current.csv, curves.svg
//! <root>/ablate/ablation.csv, models/<key>/temporal.ckpt
//! ```
//!
//! Each directory carries `fingerprint.toml`: the resolved configuration, its
//! SHA-256, and a digest of the sections the stage depends on.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::base::{build_samples, pretrain_base, BaseModel, EpochLog};
use crate::checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{
    ablation_csv, cell_spec, eval_current, eval_failure, eval_no_history, mean_history_baseline, plot_svg,
    run_ablations, AblationRow, CellModel, CellSpec, EvalReport, Predictor, ReportRow,
};
use crate::fsutil::{promote_dir, staging_dir, write_atomic};
use crate::nn::{digest, Adam};
use crate::store::{cache_embeddings, verify_store, EmbeddingStore, VerifyReport};
use crate::temporal::{TemporalConfig, TemporalFusion};
use crate::trainer::{fit, metrics_row, run_epoch, sequence_index, EndToEndProvider, TrainConfig, METRICS_HEADER};
use crate::world::{generate_scenario_with, read_scenario, write_scenario, EgoSelection, Scenario};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TEMPCOBEV_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Pretrain,
    Cache,
    Train,
    Eval,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Cache => "cache",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Stage::Gen => "scenarios",
            Stage::Pretrain => "base",
            other => other.name(),
        }
    }

    /// Top-level config keys the stage's outputs depend on.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Gen => &["seed", "split", "world"],
            Stage::Pretrain | Stage::Cache => &["seed", "split", "world", "base", "pretrain"],
            Stage::Train => &["seed", "split", "world", "base", "pretrain", "temporal", "train"],
            Stage::Eval => &["seed", "split", "world", "base", "pretrain", "temporal", "train", "failure"],
            Stage::Ablate => &["seed", "split", "world", "base", "pretrain", "temporal", "train", "failure", "ablation"],
        }
    }

    /// SHA-256 over the sections this stage depends on.
    pub fn inputs_digest(self, cfg: &RunConfig) -> String {
        let full = toml::Table::try_from(cfg).expect("config serializes");
        let picked: toml::Table = full
            .into_iter()
            .filter(|(k, _)| self.sections().contains(&k.as_str()))
            .collect();
        sha_hex(toml::to_string(&picked).expect("table serializes").as_bytes())
    }
}

/// Output directory layout below one root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `explicit`, else `$TEMPCOBEV_OUT`, else `./runs`.
    pub fn resolve(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(root)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn scenarios(&self, split: Split) -> PathBuf {
        self.stage_dir(Stage::Gen).join(split.name())
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.stage_dir(Stage::Pretrain).join("base.ckpt")
    }

    pub fn store(&self, split: Split) -> PathBuf {
        self.stage_dir(Stage::Cache).join(split.name())
    }

    pub fn temporal_checkpoint(&self) -> PathBuf {
        self.stage_dir(Stage::Train).join("temporal.ckpt")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A 64-bit seed for `purpose`, derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn fingerprint_text(stage: Stage, cfg: &RunConfig) -> String {
    let mut t = toml::Table::new();
    t.insert("stage".into(), stage.name().into());
    t.insert("fingerprint".into(), cfg.fingerprint().into());
    t.insert("inputs".into(), stage.inputs_digest(cfg).into());
    t.insert("config".into(), toml::Table::try_from(cfg).expect("config serializes").into());
    toml::to_string(&t).expect("table serializes")
}

fn write_fingerprint(dir: &Path, stage: Stage, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("fingerprint.toml"), fingerprint_text(stage, cfg).as_bytes())
}

/// The `inputs` digest recorded in a stage directory, if any.
pub fn recorded_inputs(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join("fingerprint.toml")).ok()?;
    let t: toml::Table = text.parse().ok()?;
    t.get("inputs")?.as_str().map(str::to_string)
}

/// Whether `stage` already holds outputs for this configuration.
pub fn stage_is_current(layout: &Layout, stage: Stage, cfg: &RunConfig) -> bool {
    recorded_inputs(&layout.stage_dir(stage)).as_deref() == Some(stage.inputs_digest(cfg).as_str())
}

/// Fails unless `stage` has produced `artifact` for this configuration.
fn require(layout: &Layout, stage: Stage, cfg: &RunConfig, artifact: &Path, what: &str) -> Result<()> {
    if !artifact.exists() {
        return Err(Error::MissingDependency {
            what: what.to_string(),
            path: artifact.to_path_buf(),
            step: stage.name(),
        });
    }
    if !stage_is_current(layout, stage, cfg) {
        return Err(Error::MissingDependency {
            what: format!("{what} matching the current configuration"),
            path: layout.stage_dir(stage),
            step: stage.name(),
        });
    }
    Ok(())
}

/// Writes into a staging directory, then promotes it to the stage directory.
fn staged<T>(layout: &Layout, stage: Stage, cfg: &RunConfig, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let dst = layout.stage_dir(stage);
    let tmp = staging_dir(&dst)?;
    let out = match body(&tmp) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
    };
    write_fingerprint(&tmp, stage, cfg)?;
    promote_dir(&tmp, &dst)?;
    Ok(out)
}

fn scenario_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("scenario_{id:06}.tbw"))
}

fn split_ids(cfg: &RunConfig, split: Split) -> std::ops::Range<u64> {
    let n_train = cfg.split.train_scenarios as u64;
    match split {
        Split::Train => 0..n_train,
        Split::Eval => n_train..n_train + cfg.split.eval_scenarios as u64,
    }
}

/// Generates a split's scenarios in memory. Training scenarios draw a random
/// ego; evaluation scenarios use the lowest-id CAV.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<(u64, Scenario)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "scenarios"));
    let seeds: Vec<u64> = (0..cfg.split.train_scenarios + cfg.split.eval_scenarios)
        .map(|_| rng.random())
        .collect();
    let ego = match split {
        Split::Train => EgoSelection::Random,
        Split::Eval => EgoSelection::Lowest,
    };
    split_ids(cfg, split)
        .map(|id| Ok((id, generate_scenario_with(&cfg.world, seeds[id as usize], ego)?)))
        .collect()
}

pub fn load_split(layout: &Layout, cfg: &RunConfig, split: Split) -> Result<Vec<(u64, Scenario)>> {
    let dir = layout.scenarios(split);
    require(layout, Stage::Gen, cfg, &dir, &format!("{} scenarios", split.name()))?;
    split_ids(cfg, split)
        .map(|id| Ok((id, read_scenario(&scenario_file(&dir, id))?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSummary {
    pub train: usize,
    pub eval: usize,
    pub frames: usize,
}

pub fn cmd_gen(cfg: &RunConfig, layout: &Layout) -> Result<GenSummary> {
    cfg.validate()?;
    staged(layout, Stage::Gen, cfg, |tmp| {
        let mut frames = 0;
        for split in [Split::Train, Split::Eval] {
            let dir = tmp.join(split.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (id, scn) in generate_split(cfg, split)? {
                frames += scn.n_frames();
                write_scenario(&scenario_file(&dir, id), &scn)?;
            }
        }
        Ok(GenSummary {
            train: cfg.split.train_scenarios,
            eval: cfg.split.eval_scenarios,
            frames,
        })
    })
}

fn base_meta(cfg: &RunConfig) -> String {
    toml::to_string(&cfg.base).expect("base config serializes")
}

/// Loads the pretrained base model of this configuration.
pub fn load_base(layout: &Layout, cfg: &RunConfig) -> Result<BaseModel<f32>> {
    let path = layout.base_checkpoint();
    require(layout, Stage::Pretrain, cfg, &path, "base checkpoint")?;
    let mut model = BaseModel::new(cfg.base.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let meta = load_checkpoint(&path, &mut model)?;
    if meta != base_meta(cfg) {
        return Err(Error::Data(format!(
            "{} was written for a different base configuration",
            path.display()
        )));
    }
    Ok(model)
}

fn epoch_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for e in log {
        s.push_str(&metrics_row(e));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub digest: String,
}

pub fn cmd_pretrain(cfg: &RunConfig, layout: &Layout) -> Result<PretrainSummary> {
    cfg.validate()?;
    let scenarios = |split| -> Result<Vec<Scenario>> {
        Ok(load_split(layout, cfg, split)?.into_iter().map(|(_, s)| s).collect())
    };
    let (train_scn, eval_scn) = (scenarios(Split::Train)?, scenarios(Split::Eval)?);
    let p = &cfg.pretrain;
    let train = build_samples(
        &train_scn,
        &cfg.world,
        p.frame_stride,
        p.ego_only_fraction,
        derive_seed(cfg.seed, "pretrain-samples"),
    )?;
    let eval = build_samples(&eval_scn, &cfg.world, p.frame_stride, 0.0, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "base-init"));
    let model = BaseModel::<f32>::new(cfg.base.clone(), &mut rng)?;
    let out = pretrain_base(model, &train, &eval, p, derive_seed(cfg.seed, "pretrain"))?;
    staged(layout, Stage::Pretrain, cfg, |tmp| {
        save_checkpoint(&tmp.join("base.ckpt"), &out.model, &base_meta(cfg))?;
        write_atomic(&tmp.join("metrics.csv"), epoch_csv(&out.log).as_bytes())?;
        Ok(PretrainSummary {
            digest: digest(&out.model),
            log: out.log.clone(),
            best_epoch: out.best_epoch,
        })
    })
}

pub fn cmd_cache(cfg: &RunConfig, layout: &Layout) -> Result<Vec<VerifyReport>> {
    cfg.validate()?;
    let base = load_base(layout, cfg)?;
    let splits = [Split::Train, Split::Eval]
        .into_iter()
        .map(|s| Ok((s, load_split(layout, cfg, s)?)))
        .collect::<Result<Vec<_>>>()?;
    staged(layout, Stage::Cache, cfg, |tmp| {
        splits
            .iter()
            .map(|(split, scns)| {
                let dst = tmp.join(split.name());
                cache_embeddings(&dst, scns, &cfg.world, &base)?;
                verify_store(&dst)
            })
            .collect()
    })
}

pub fn open_store(layout: &Layout, cfg: &RunConfig, split: Split) -> Result<EmbeddingStore> {
    let root = layout.store(split);
    require(
        layout,
        Stage::Cache,
        cfg,
        &root.join("manifest.tbe"),
        &format!("{} embedding store", split.name()),
    )?;
    EmbeddingStore::open(&root)?.preload()
}

fn temporal_meta(t: &TemporalConfig) -> String {
    toml::to_string(t).expect("temporal config serializes")
}

/// Restores a temporal checkpoint; its architecture comes from the embedded config.
pub fn load_temporal(path: &Path) -> Result<TemporalFusion<f32>> {
    let meta = read_checkpoint_meta(path)?;
    let config: TemporalConfig =
        toml::from_str(&meta).map_err(|e| Error::Data(format!("{}: bad config metadata: {e}", path.display())))?;
    let mut model = TemporalFusion::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(path, &mut model)?;
    Ok(model)
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Trains one temporal model against the frozen decoder of `base`.
pub fn train_temporal(
    base: &BaseModel<f32>,
    train: &EmbeddingStore,
    eval: &EmbeddingStore,
    temporal: &TemporalConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<crate::trainer::FitOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "temporal-init"));
    let model = TemporalFusion::new(temporal.clone(), &mut rng)?;
    fit(
        model,
        &base.decoder,
        train,
        eval,
        train_cfg,
        derive_seed(seed, "temporal-train"),
        |_| Ok(()),
    )
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub sequences_per_epoch: usize,
    pub decoder_digest_before: String,
    pub decoder_digest_after: String,
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<TrainSummary> {
    cfg.validate()?;
    let base = load_base(layout, cfg)?;
    let train = open_store(layout, cfg, Split::Train)?;
    let eval = open_store(layout, cfg, Split::Eval)?;
    let base_sha = file_sha(&layout.base_checkpoint())?;
    let before = digest(&base.decoder);
    let out = train_temporal(&base, &train, &eval, &cfg.temporal, &cfg.train, cfg.seed)?;
    let after = digest(&base.decoder);
    let base_sha_after = file_sha(&layout.base_checkpoint())?;
    staged(layout, Stage::Train, cfg, |tmp| {
        let meta = temporal_meta(&cfg.temporal);
        save_checkpoint(&tmp.join("temporal.ckpt"), &out.model, &meta)?;
        write_atomic(&tmp.join("temporal_config.toml"), meta.as_bytes())?;
        write_atomic(&tmp.join("metrics.csv"), epoch_csv(&out.log).as_bytes())?;
        let frozen = format!(
            "decoder_digest_before = \"{before}\"\ndecoder_digest_after = \"{after}\"\n\
             base_checkpoint_sha256_before = \"{base_sha}\"\nbase_checkpoint_sha256_after = \"{base_sha_after}\"\n\
             best_epoch = {}\nsequences_per_epoch = {}\n",
            out.best_epoch, out.sequences_per_epoch
        );
        write_atomic(&tmp.join("frozen.toml"), frozen.as_bytes())?;
        Ok(TrainSummary {
            log: out.log.clone(),
            best_epoch: out.best_epoch,
            sequences_per_epoch: out.sequences_per_epoch,
            decoder_digest_before: before.clone(),
            decoder_digest_after: after.clone(),
        })
    })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub report: EvalReport,
    /// Current-frame IoU with the temporal module and with the base model alone.
    pub current_temporal: f64,
    pub current_base: f64,
}

pub const CURRENT_HEADER: &str = "variant,iou,n_frames,config_fingerprint";

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalSummary> {
    cfg.validate()?;
    let ckpt = layout.temporal_checkpoint();
    require(layout, Stage::Train, cfg, &ckpt, "temporal checkpoint")?;
    let base = load_base(layout, cfg)?;
    let store = open_store(layout, cfg, Split::Eval)?;
    let model = load_temporal(&ckpt)?;
    let decoder = &base.decoder;
    let fp = cfg.fingerprint();

    let temporal = eval_failure(&store, Predictor::Temporal(&model), decoder, &cfg.failure)?;
    let (no_history, per_offset) = eval_no_history(&store, decoder, &cfg.failure)?;
    let mean = mean_history_baseline(&store, decoder, model.config.history_len, &cfg.failure)?;
    let mut report = EvalReport::default();
    report.push_curve("tempcobev", &temporal.iou, temporal.n_anchors, &fp);
    report.push_curve("base", &no_history.iou, no_history.n_anchors, &fp);
    report.push_curve("mean_history", &mean.iou, mean.n_anchors, &fp);
    for (offset, &iou) in per_offset.iter().enumerate().skip(1) {
        report.rows.push(ReportRow {
            variant: "base_ego_only_per_offset".into(),
            offset,
            iou,
            n_anchors: no_history.n_anchors,
            config_fingerprint: fp.clone(),
        });
    }
    let cur_t = eval_current(&store, Predictor::Temporal(&model), decoder)?;
    let cur_b = eval_current(&store, Predictor::NoHistory, decoder)?;
    let current = format!(
        "{CURRENT_HEADER}\ntempcobev,{:.6},{},{fp}\nbase,{:.6},{},{fp}\n",
        cur_t.mean_iou,
        cur_t.frames.len(),
        cur_b.mean_iou,
        cur_b.frames.len()
    );
    staged(layout, Stage::Eval, cfg, |tmp| {
        report.write_csv(&tmp.join("report.csv"))?;
        write_atomic(&tmp.join("current.csv"), current.as_bytes())?;
        write_atomic(
            &tmp.join("curves.svg"),
            plot_svg(&report, "IoU under communication failure").as_bytes(),
        )?;
        Ok(())
    })?;
    Ok(EvalSummary {
        report,
        current_temporal: cur_t.mean_iou,
        current_base: cur_b.mean_iou,
    })
}

/// Key of a trained ablation model: its upstream inputs plus its own settings.
fn cell_model_key(cfg: &RunConfig, temporal: &TemporalConfig, train: &TrainConfig) -> String {
    let text = format!(
        "{}\n{}\n{}",
        Stage::Cache.inputs_digest(cfg),
        temporal_meta(temporal),
        toml::to_string(train).expect("train config serializes")
    );
    sha_hex(text.as_bytes())[..16].to_string()
}

/// Evaluates every configured cell; cells without a stored model are trained
/// first unless `ablation.train_missing` is off.
pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let base = load_base(layout, cfg)?;
    let train = open_store(layout, cfg, Split::Train)?;
    let eval = open_store(layout, cfg, Split::Eval)?;
    let dir = layout.stage_dir(Stage::Ablate);
    let models_dir = dir.join("models");
    let mut cells = Vec::new();
    for name in &cfg.ablation.cells {
        let spec = cell_spec(name, &cfg.temporal, &cfg.train)?;
        let (model, cell_fp) = match spec {
            CellSpec::Mean { history_len } => (CellModel::Mean { history_len }, cfg.fingerprint()),
            CellSpec::Trained { temporal, train: tc } => {
                let mut cell_cfg = cfg.clone();
                cell_cfg.temporal = temporal.clone();
                cell_cfg.train = tc.clone();
                let path = models_dir
                    .join(cell_model_key(cfg, &temporal, &tc))
                    .join("temporal.ckpt");
                let from_train = stage_is_current(layout, Stage::Train, &cell_cfg)
                    .then(|| layout.temporal_checkpoint())
                    .filter(|p| p.exists());
                let model = if path.exists() {
                    load_temporal(&path)?
                } else if let Some(p) = from_train {
                    load_temporal(&p)?
                } else if cfg.ablation.train_missing {
                    log::info!("ablation cell {name}: training");
                    let out = train_temporal(&base, &train, &eval, &temporal, &tc, cfg.seed)?;
                    save_checkpoint(&path, &out.model, &temporal_meta(&temporal))?;
                    out.model
                } else {
                    return Err(Error::Argument(format!(
                        "ablation cell `{name}` has no trained model at {} and training is disabled",
                        path.display()
                    )));
                };
                (CellModel::Trained(model), cell_cfg.fingerprint())
            }
        };
        cells.push((name.clone(), model, cell_fp));
    }
    let rows = run_ablations(&eval, &base.decoder, &cfg.failure, &cells)?;
    write_atomic(&dir.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    write_fingerprint(&dir, Stage::Ablate, cfg)?;
    Ok(rows)
}

/// Integrity check of a store directory, or of both cached splits when
/// `path` is the cache root.
pub fn cmd_verify(path: &Path) -> Result<Vec<(PathBuf, VerifyReport)>> {
    if path.join("manifest.tbe").exists() {
        return Ok(vec![(path.to_path_buf(), verify_store(path)?)]);
    }
    let mut out = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let p = path.join(split.name());
        if p.join("manifest.tbe").exists() {
            out.push((p.clone(), verify_store(&p)?));
        }
    }
    if out.is_empty() {
        return Err(Error::MissingDependency {
            what: "embedding store".into(),
            path: path.to_path_buf(),
            step: "cache",
        });
    }
    Ok(out)
}

/// Re-renders `curves.svg` from an existing `report.csv`.
pub fn cmd_plot(layout: &Layout) -> Result<PathBuf> {
    let dir = layout.stage_dir(Stage::Eval);
    let csv = dir.join("report.csv");
    if !csv.exists() {
        return Err(Error::MissingDependency {
            what: "evaluation report".into(),
            path: csv,
            step: "eval",
        });
    }
    let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
    let report = EvalReport::from_csv(&text)?;
    let out = dir.join("curves.svg");
    write_atomic(&out, plot_svg(&report, "IoU under communication failure").as_bytes())?;
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct EpochTiming {
    pub cached_seconds: f64,
    pub end_to_end_seconds: f64,
    pub sequences: usize,
}

impl EpochTiming {
    pub fn speedup(&self) -> f64 {
        self.end_to_end_seconds / self.cached_seconds
    }
}

/// Wall-clock seconds of one training epoch over the first `n_scenarios`
/// training scenarios: from the cache, and re-encoding every frame.
pub fn time_training_epoch(cfg: &RunConfig, layout: &Layout, n_scenarios: usize) -> Result<EpochTiming> {
    cfg.validate()?;
    let base = load_base(layout, cfg)?;
    let store = open_store(layout, cfg, Split::Train)?;
    let scenarios = load_split(layout, cfg, Split::Train)?
        .into_iter()
        .take(n_scenarios)
        .collect();
    let e2e = EndToEndProvider {
        scenarios,
        world: &cfg.world,
        base: &base,
    };
    let ids: Vec<u64> = crate::trainer::SequenceProvider::scenario_ids(&e2e);
    let sequences: Vec<(u64, usize)> = sequence_index(&store, &cfg.train)?
        .into_iter()
        .filter(|(id, _)| ids.contains(id))
        .collect();
    let seed = derive_seed(cfg.seed, "timing");
    let timed = |provider: &dyn crate::trainer::SequenceProvider| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let mut model = TemporalFusion::new(cfg.temporal.clone(), &mut rng)?;
        let mut adam = Adam::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Instant::now();
        run_epoch(
            &mut model,
            &mut adam,
            &base.decoder,
            provider,
            &sequences,
            &cfg.train,
            cfg.train.lr as f32,
            &mut rng,
        )?;
        Ok(start.elapsed().as_secs_f64())
    };
    let cached_seconds = timed(&store)?;
    let end_to_end_seconds = timed(&e2e)?;
    Ok(EpochTiming {
        cached_seconds,
        end_to_end_seconds,
        sequences: sequences.len(),
    })
}
