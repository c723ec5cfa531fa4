use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use modprec::checkpoint::Checkpoint;
use modprec::record::smoothed_loss;
use modprec::sweep::parse_grid;
use modprec::{grid_search, report, verify, RunConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "modprec",
    version,
    about = "Preconditioned optimizers under modality competition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its CSV and manifest.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set task.mixing=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Write a checkpoint here when training stops.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many optimizer steps (requires --checkpoint to resume later).
        #[arg(long)]
        stop_after: Option<u64>,
        /// Continue from a checkpoint; the config embedded in it is used.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Grid-search the base learning rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `default` or a comma-separated list.
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the dense-oracle identity suite.
    Verify {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge saved runs into loss curves and efficiency ratios.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            set,
            out,
            checkpoint,
            stop_after,
            resume,
        } => {
            let mut trainer = match resume {
                Some(path) => Trainer::from_checkpoint(Checkpoint::load(&path)?)?,
                None => {
                    let path = config.context("--config is required")?;
                    Trainer::new(RunConfig::load(&path, &set)?)?
                }
            };
            if let Some(limit) = stop_after {
                if checkpoint.is_none() {
                    bail!("--stop-after needs --checkpoint");
                }
                trainer.run_until(limit)?;
            } else {
                trainer.run_until(u64::MAX)?;
            }
            if let Some(path) = &checkpoint {
                if !trainer.diverged() {
                    trainer.checkpoint()?.save(path)?;
                }
            }
            let finished = trainer.is_finished();
            let record = trainer.into_record();
            let (csv, _) = record.save(&out)?;
            let loss = smoothed_loss(&record.rows).unwrap_or(f64::NAN);
            println!(
                "{}: {} steps, smoothed loss {loss:.6}{}{} -> {}",
                record.config.run_name(),
                record.rows.last().map_or(0, |r| r.step),
                if record.diverged { ", DIVERGED" } else { "" },
                if finished { "" } else { ", paused" },
                csv.display()
            );
            Ok(if record.diverged {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Sweep { config, grid, set, out } => {
            let cfg = RunConfig::load(&config, &set)?;
            let grid = parse_grid(&grid)?;
            let result = grid_search(&cfg, &grid)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let summary = out.join(format!("sweep-{}-s{}.csv", cfg.optimizer.name(), cfg.seed));
            let mut w = csv::Writer::from_path(&summary)?;
            w.write_record(["base_lr", "smoothed_loss", "diverged", "best"])?;
            for entry in &result.entries {
                entry.record.save(&out)?;
                w.write_record([
                    entry.lr.to_string(),
                    entry.smoothed_loss.map_or(String::new(), |l| l.to_string()),
                    entry.record.diverged.to_string(),
                    (entry.lr == result.best_lr).to_string(),
                ])?;
                println!(
                    "lr {:<10} {}",
                    entry.lr,
                    entry
                        .smoothed_loss
                        .map_or("diverged".to_string(), |l| format!("smoothed loss {l:.6}"))
                );
            }
            w.flush()?;
            println!("best lr {} -> {}", result.best_lr, summary.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { report, seed } => {
            let rep = verify::run_suite(seed)?;
            for c in &rep.checks {
                println!(
                    "{} {:<40} max error {:.3e} (tolerance {:.0e}, {} instances)",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance,
                    c.instances
                );
            }
            let u = &rep.universal_claim;
            println!(
                "INFO universal-β claim: per-modality surrogate not reduced in {}/{} (instance, β) pairs, averaged surrogate in {}/{}",
                u.per_modality_violations, u.pairs, u.averaged_violations, u.pairs
            );
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&rep)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(if rep.all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Report { runs, out } => {
            let (curves, eff) = report::write_report(&runs, &out)?;
            println!("curves -> {}\nefficiency -> {}", curves.display(), eff.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
