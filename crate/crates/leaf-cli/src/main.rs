//! `leaf <command> --config <path> [--seed N] [--out DIR]`
//!
//! Stage commands write artifacts into per-seed directories under the output
//! root; `evaluate` and `pilot-prune-eval` additionally write cross-seed
//! aggregates when run over the full seed list; `sweep --axis <axis>` emits
//! one CSV per axis. Every command is deterministic in (config, seed).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use leaf_cli::config::ExperimentConfig;
use leaf_cli::pipeline::{
    cmd_build_cf, cmd_detect, cmd_distill, cmd_evaluate_seed, cmd_generate, cmd_pilot_seed,
    cmd_sweep, cmd_train_student, cmd_train_teacher, write_aggregate, write_pilot_aggregate,
    SeedCtx, SweepAxis,
};

#[derive(Parser)]
#[command(name = "leaf", version, about = "Confounder-aware distillation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Operate on this seed only instead of the config's full list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Tau,
    Lambda,
    Strategy,
    Splitting,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Tau => SweepAxis::Tau,
            Axis::Lambda => SweepAxis::Lambda,
            Axis::Strategy => SweepAxis::Strategy,
            Axis::Splitting => SweepAxis::Splitting,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus splits.
    Generate(Common),
    /// Train the teacher on its split.
    TrainTeacher(Common),
    /// Train the student on the confounded split.
    TrainStudent(Common),
    /// Locate confounding tokens and write the detection report.
    Detect(Common),
    /// Build the counterfactual sample set from detected spans.
    BuildCf(Common),
    /// Distill the blended-objective student and the pure-KD reference.
    Distill(Common),
    /// Score all model variants and write metric reports.
    Evaluate(Common),
    /// Prune detected spans at inference time and re-score the student.
    PilotPruneEval(Common),
    /// Rerun the pipeline across one axis's value grid and emit CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Which setting to vary.
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

fn per_seed(common: &Common, f: impl Fn(&SeedCtx) -> Result<()>) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    for seed in cfg.run_seeds(common.seed) {
        let ctx = SeedCtx::new(&cfg, &out, seed)?;
        f(&ctx)?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Generate(c) => per_seed(c, cmd_generate),
        Cmd::TrainTeacher(c) => per_seed(c, cmd_train_teacher),
        Cmd::TrainStudent(c) => per_seed(c, cmd_train_student),
        Cmd::Detect(c) => per_seed(c, cmd_detect),
        Cmd::BuildCf(c) => per_seed(c, cmd_build_cf),
        Cmd::Distill(c) => per_seed(c, cmd_distill),
        Cmd::Evaluate(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let mut reports = Vec::new();
            for seed in cfg.run_seeds(c.seed) {
                let ctx = SeedCtx::new(&cfg, &out, seed)?;
                reports.push(cmd_evaluate_seed(&ctx)?);
            }
            // The aggregate pairs leaf against kd, so it needs every seed.
            if c.seed.is_none() {
                write_aggregate(&out, &reports)?;
            }
            Ok(())
        }
        Cmd::PilotPruneEval(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let mut outcomes = Vec::new();
            for seed in cfg.run_seeds(c.seed) {
                let ctx = SeedCtx::new(&cfg, &out, seed)?;
                outcomes.push(cmd_pilot_seed(&ctx)?);
            }
            if c.seed.is_none() {
                write_pilot_aggregate(&out, outcomes)?;
            }
            Ok(())
        }
        Cmd::Sweep { common, axis } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let seeds = cfg.run_seeds(common.seed);
            cmd_sweep(&cfg, &out, &seeds, (*axis).into())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
