//! `lodprune`: outlier-weighed layerwise sparsity pruning from the shell.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
//! 4 numerical failure.

mod config;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lodprune::allocation::allocate_scoped;
use lodprune::calibration::{collect_norms, load_calibration, CalibrationSet};
use lodprune::eval::{calibration_defaults, Harness, SweepGrid, ToyTask, SCOPE_SPARSITIES};
use lodprune::fixture;
use lodprune::graph::{load_model, save_model, ModelGraph};
use lodprune::outlier::{compute_lod, lod_to_text, LodSource};
use lodprune::prune::prune_model;
use lodprune::Error;

use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lodprune", version, about = "One-shot outlier-weighed layerwise sparsity pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute and export per-layer outlier ratios.
    Lod,
    /// Allocate per-layer sparsity, prune, and write the pruned model.
    Prune,
    /// Run one of the canned experiments.
    Experiment {
        #[arg(value_enum)]
        name: Experiment,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Experiment {
    /// Method x sparsity sweep.
    Sweep,
    /// Allocation-scope ablation at equal pruned-parameter budget.
    Scope,
    /// Calibration sample-count ablation.
    Calib,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Precondition(_) | Error::Structural(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Csv(_) => 3,
        Error::Numerical { .. } => 4,
    }
}

fn load_graph(cfg: &RunConfig) -> Result<ModelGraph, Error> {
    match &cfg.model {
        Some(p) => load_model(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
            other => other,
        }),
        None => fixture::default_graph(),
    }
}

fn calibration(cfg: &RunConfig) -> Result<CalibrationSet, Error> {
    match &cfg.calibration {
        Some(p) => load_calibration(p),
        None => CalibrationSet::generate(cfg.regime, cfg.samples, cfg.pruning.seed),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn cmd_lod(cfg: &RunConfig) -> Result<(), Error> {
    let g = load_graph(cfg)?;
    let calib = calibration(cfg)?;
    let trace = collect_norms(&g, &calib)?;
    let profile = compute_lod(&g, &trace, cfg.pruning.threshold, None)?;
    let text = lod_to_text(
        &profile,
        &LodSource {
            regime: calib.regime,
            seed: calib.seed,
            samples: calib.len(),
        },
    );
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out, "lod.txt", &text)?;
    for e in &profile.entries {
        println!("{}\t{}", e.layer_id, e.ratio);
    }
    Ok(())
}

fn cmd_prune(cfg: &RunConfig) -> Result<(), Error> {
    let g = load_graph(cfg)?;
    let calib = calibration(cfg)?;
    let trace = collect_norms(&g, &calib)?;
    let p = &cfg.pruning;
    let plan = allocate_scoped(&g, &trace, p)?;
    let (pruned, report) = prune_model(&g, &plan, p.metric, p.group, Some(&trace))?;
    fs::create_dir_all(&cfg.out)?;
    save_model(&pruned, cfg.out.join("pruned.lodt"))?;
    write(&cfg.out, "plan.txt", &plan.to_text())?;
    write(&cfg.out, "report.txt", &report.to_text())?;
    write(&cfg.out, "report.kv", &report.to_key_values())?;
    println!(
        "pruned {} of {} weights, global sparsity {:.6}",
        report.total_pruned(),
        report.total_params(),
        report.global_sparsity()
    );
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, name: Experiment) -> Result<(), Error> {
    let g = load_graph(cfg)?;
    let task = ToyTask::default_for(&g)?;
    let harness = Harness::new(&g, &task);
    let grid = SweepGrid {
        sparsities: cfg.sparsities.clone(),
        seeds: cfg.seeds.clone(),
        regime: cfg.regime,
        samples: cfg.samples,
        lambda: cfg.pruning.lambda,
        threshold: cfg.pruning.threshold,
        group: cfg.pruning.group,
        ..SweepGrid::default()
    };
    let result = match name {
        Experiment::Sweep => harness.run_sweep(&grid)?,
        Experiment::Scope => {
            let levels = if cfg.sparsity_given {
                vec![cfg.pruning.sparsity]
            } else {
                SCOPE_SPARSITIES.to_vec()
            };
            harness.run_scope_ablation(&levels, &cfg.seeds, &grid)?
        }
        Experiment::Calib => {
            let (counts, default_s) = calibration_defaults();
            let s = if cfg.sparsity_given { cfg.pruning.sparsity } else { default_s };
            harness.run_calibration_ablation(counts, s, &cfg.seeds, &grid)?
        }
    };
    let (cells, table, summary) = (result.cells_csv()?, result.table_csv()?, result.summary());
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out, &format!("{}_cells.csv", result.name), &cells)?;
    write(&cfg.out, &format!("{}_table.csv", result.name), &table)?;
    write(&cfg.out, &format!("{}_summary.txt", result.name), &summary)?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = RunConfig::resolve(&cli.flags).and_then(|cfg| match cli.command {
        Command::Lod => cmd_lod(&cfg),
        Command::Prune => cmd_prune(&cfg),
        Command::Experiment { name } => cmd_experiment(&cfg, name),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lodprune: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
