use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sparselif::commands::{self, require_path, EvalOptions};
use sparselif::config::{RunConfig, ScenarioConfig};
use sparselif::error::{Error, Result};
use sparselif::scenesim::ScenarioSpec;
use sparselif::uaf::FusionMode;

#[derive(Parser, Debug)]
#[command(name = "sparselif", version, about = "Sparse LiDAR-camera fusion detector on simulated scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for the dataset, training and scenario selections.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Scenario preset: clean, fov120, fov180, object_failure, front_occlusion, stuck.
    #[arg(long, global = true)]
    scenario: Option<String>,

    #[arg(long, global = true, value_enum)]
    fusion: Option<Fusion>,

    /// Fuse with ground-truth distances instead of predicted ones.
    #[arg(long, global = true)]
    oracle_uncertainty: bool,

    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    /// Override a config leaf, e.g. `--set train.steps=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fusion {
    Uaf,
    Equal,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and write a dataset.
    Generate,
    /// Train the decoder heads.
    Train {
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write final-layer detections.
    Infer,
    /// Evaluate under the configured scenario.
    Eval,
    /// Clean baseline plus every corruption scenario.
    Robustness,
    /// Finite-difference checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Time the sampling, mixing and layer kernels.
    Bench {
        #[arg(long, default_value_t = 50)]
        repetitions: usize,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.scenario.seed = seed;
    }
    if let Some(name) = &cli.scenario {
        let spec = ScenarioSpec::named(name, cfg.scenario.seed).map_err(|e| Error::config("scenario", e.to_string()))?;
        cfg.scenario = ScenarioConfig {
            kind: spec.kind,
            seed: spec.seed,
        };
    }
    if let Some(f) = cli.fusion {
        cfg.model.fusion = fusion(f);
    }
    for (slot, flag) in [
        (&mut cfg.io.out, &cli.out),
        (&mut cfg.io.dataset, &cli.dataset),
        (&mut cfg.io.checkpoint, &cli.checkpoint),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Command::Train { resume: Some(r) } = &cli.command {
        cfg.io.resume = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fusion(f: Fusion) -> FusionMode {
    match f {
        Fusion::Uaf => FusionMode::Uaf,
        Fusion::Equal => FusionMode::Equal,
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve(cli)?;
    let out = || require_path(cfg.io.out.as_deref(), "io.out");
    let opts = EvalOptions {
        fusion: cli.fusion.map(fusion),
        oracle_uncertainty: cli.oracle_uncertainty,
    };
    let dataset = || require_path(cfg.io.dataset.as_deref(), "io.dataset");
    let checkpoint = cfg.io.checkpoint.as_deref();
    match &cli.command {
        Command::Generate => {
            let m = commands::cmd_generate(&cfg, out()?, cli.force)?;
            println!("wrote {} scenes to {}", m.scenes.len(), out()?.display());
        }
        Command::Train { .. } => {
            let s = commands::cmd_train(&cfg, dataset()?, out()?, cfg.io.resume.as_deref())?;
            print(&s)?;
        }
        Command::Infer => {
            let r = commands::cmd_infer(&cfg, checkpoint, dataset()?, out()?, &opts)?;
            println!("wrote detections for {} scenes", r.scenes.len());
        }
        Command::Eval => print(&commands::cmd_eval(&cfg, checkpoint, dataset()?, out()?, &opts)?)?,
        Command::Robustness => print(&commands::cmd_robustness(&cfg, checkpoint, dataset()?, out()?, &opts)?)?,
        Command::Gradcheck { seeds } => {
            let r = commands::cmd_gradcheck(&cfg, *seeds, out()?)?;
            for op in &r.ops {
                println!(
                    "{:<20} max_rel_error {:.3e} worst_seed {:>4} {}",
                    op.op,
                    op.max_rel_error,
                    op.worst_seed,
                    if op.passed { "ok" } else { "FAIL" }
                );
            }
            return Ok(r.passed);
        }
        Command::Bench { repetitions } => print(&commands::cmd_bench(&cfg, *repetitions, out()?)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
