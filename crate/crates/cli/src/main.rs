use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempcobev::config::RunConfig;
use tempcobev::pipeline::{self, Layout, Stage, OUT_ENV};
use tempcobev::{Error, Result};

#[derive(Parser)]
#[command(name = "tempcobev", version, about = "Temporal fusion for cooperative BEV segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file, overlaid on the defaults (or the quick profile).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small profile instead of the defaults.
    #[arg(long, global = true)]
    quick: bool,
    /// Run seed; overrides the file value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Dotted-key override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Skip the command when its outputs already match the configuration.
    #[arg(long, global = true)]
    reuse: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval scenarios.
    Gen,
    /// Pretrain the single-frame base model.
    Pretrain,
    /// Encode every frame into the embedding stores.
    Cache,
    /// Train the temporal module on cached embeddings.
    Train,
    /// Current-frame and communication-failure evaluation.
    Eval,
    /// Run the ablation matrix.
    Ablate {
        /// Comma-separated cell names (default: the configured list).
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        /// Fail on cells without a trained model instead of training them.
        #[arg(long)]
        no_train: bool,
    },
    /// Check the integrity of an embedding store (default: the run's cache).
    Verify { path: Option<PathBuf> },
    /// Re-render the curve plot from the evaluation CSV.
    Plot,
    /// gen, pretrain, cache, train and eval in sequence.
    Run,
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = if c.quick { RunConfig::quick() } else { RunConfig::default() };
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg = cfg
            .merged(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(&e))))?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    for o in &c.overrides {
        cfg = cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn stage(layout: &Layout, cfg: &RunConfig, reuse: bool, stage: Stage, f: impl FnOnce() -> Result<()>) -> Result<()> {
    if reuse && pipeline::stage_is_current(layout, stage, cfg) {
        log::info!("{}: outputs current, skipping", stage.name());
        println!("{}: up to date", stage.name());
        return Ok(());
    }
    f()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let layout = Layout::resolve(cli.common.out.clone());
    let reuse = cli.common.reuse;
    log::info!("output root {}, config {}", layout.root.display(), &cfg.fingerprint()[..12]);
    let gen = || {
        let s = pipeline::cmd_gen(&cfg, &layout)?;
        println!("gen: {} train + {} eval scenarios, {} frames", s.train, s.eval, s.frames);
        Ok(())
    };
    let pretrain = || {
        let s = pipeline::cmd_pretrain(&cfg, &layout)?;
        let best = &s.log[s.best_epoch];
        println!("pretrain: best epoch {} eval IoU {:.4}", best.epoch, best.eval_iou);
        Ok(())
    };
    let cache = || {
        for r in pipeline::cmd_cache(&cfg, &layout)? {
            println!("cache: {} scenarios, {} records, {} bytes", r.scenarios, r.records, r.bytes);
        }
        Ok(())
    };
    let train = || {
        let s = pipeline::cmd_train(&cfg, &layout)?;
        let best = &s.log[s.best_epoch];
        println!(
            "train: {} sequences/epoch, best epoch {} eval IoU {:.4}",
            s.sequences_per_epoch, best.epoch, best.eval_iou
        );
        Ok(())
    };
    let eval = || {
        let s = pipeline::cmd_eval(&cfg, &layout)?;
        for v in s.report.variants() {
            let row: Vec<String> = s
                .report
                .rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| format!("{:.4}", r.iou))
                .collect();
            println!("eval: {v:<26} {}", row.join(" "));
        }
        println!(
            "eval: current-frame IoU tempcobev {:.4} base {:.4}",
            s.current_temporal, s.current_base
        );
        Ok(())
    };
    match cli.command {
        Command::Gen => stage(&layout, &cfg, reuse, Stage::Gen, gen),
        Command::Pretrain => stage(&layout, &cfg, reuse, Stage::Pretrain, pretrain),
        Command::Cache => stage(&layout, &cfg, reuse, Stage::Cache, cache),
        Command::Train => stage(&layout, &cfg, reuse, Stage::Train, train),
        Command::Eval => stage(&layout, &cfg, reuse, Stage::Eval, eval),
        Command::Run => {
            stage(&layout, &cfg, reuse, Stage::Gen, gen)?;
            stage(&layout, &cfg, reuse, Stage::Pretrain, pretrain)?;
            stage(&layout, &cfg, reuse, Stage::Cache, cache)?;
            stage(&layout, &cfg, reuse, Stage::Train, train)?;
            stage(&layout, &cfg, reuse, Stage::Eval, eval)
        }
        Command::Ablate { cells, no_train } => {
            let mut cfg = cfg.clone();
            if !cells.is_empty() {
                cfg.ablation.cells = cells;
            }
            if no_train {
                cfg.ablation.train_missing = false;
            }
            cfg.validate()?;
            for r in pipeline::cmd_ablate(&cfg, &layout)? {
                let ious: Vec<String> = r.iou.iter().map(|v| format!("{v:.4}")).collect();
                println!("ablate: {:<20} {}", r.cell, ious.join(" "));
            }
            Ok(())
        }
        Command::Verify { path } => {
            let path = path.unwrap_or_else(|| layout.stage_dir(Stage::Cache));
            for (p, r) in pipeline::cmd_verify(&path)? {
                println!(
                    "verify: {} ok: {} scenarios, {} records, {} single-CAV frames, {} bytes",
                    p.display(),
                    r.scenarios,
                    r.records,
                    r.single_cav_frames,
                    r.bytes
                );
            }
            Ok(())
        }
        Command::Plot => {
            let p = pipeline::cmd_plot(&layout)?;
            println!("plot: {}", p.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
