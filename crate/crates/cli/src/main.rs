//! `dfloc` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfloc::harness::{self, ExperimentConfig, HarnessError, KindSelection, SweepAxis};
use dfloc::protocol::System;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("chain audit failed: {0}")]
    Audit(String),
}

#[derive(Parser, Debug)]
#[command(name = "dfloc", version, about = "Decentralized federated localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Sweep the malicious or faulty device count, for one or both systems.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "malicious")]
        axis: AxisArg,
        /// Comma-separated counts.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        values: Vec<usize>,
    },
    /// Faulty devices in training only versus training and inference.
    InferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        faulty_counts: Vec<usize>,
        /// Repetitions with fresh faulty draws (overrides `inference.trials`).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Verify hashes, signatures, links and stake totals of a chain dump.
    Audit {
        /// Path to a chain dump (`chain.txt`).
        #[arg(value_name = "CHAIN")]
        chain: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `output_dir` from the config, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one system (sweeps run both otherwise).
    #[arg(long, value_enum)]
    system: Option<SystemArg>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SystemArg {
    Dfl,
    Cfl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Bfc,
    Llr,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Malicious,
    Faulty,
}

impl Common {
    fn config(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds.master = seed;
        }
        if let Some(s) = self.system {
            cfg.system = system(s);
        }
        if let Some(k) = self.kind {
            cfg.kind = match k {
                KindArg::Bfc => KindSelection::Bfc,
                KindArg::Llr => KindSelection::Llr,
                KindArg::ThreeD => KindSelection::Both3d,
            };
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }

    fn systems(&self) -> Vec<System> {
        match self.system {
            Some(s) => vec![system(s)],
            None => vec![System::Dfl, System::Cfl],
        }
    }
}

fn system(s: SystemArg) -> System {
    match s {
        SystemArg::Dfl => System::Dfl,
        SystemArg::Cfl => System::Cfl,
    }
}

fn report(out: &Path, written: &[PathBuf]) {
    println!("wrote {} files to {}", written.len(), out.display());
    for p in written {
        println!("  {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = common.config()?;
            let result = harness::run_experiment(&cfg)?;
            let s = &result.summary;
            println!(
                "{} {}: accuracy={} error_m={} error_3d_m={} ({:.1}s)",
                s.system,
                s.kind,
                fmt_opt(s.accuracy),
                fmt_opt(s.error_distance_m),
                fmt_opt(s.error_3d_m),
                s.wall_time_s
            );
            let written = harness::write_outputs(&out, "run", &[result], false)?;
            report(&out, &written);
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, out) = common.config()?;
            let axis = match axis {
                AxisArg::Malicious => SweepAxis::Malicious,
                AxisArg::Faulty => SweepAxis::Faulty,
            };
            let results = harness::run_sweep(&cfg, axis, &values, &common.systems())?;
            for r in &results {
                let s = &r.summary;
                println!(
                    "{} {} {}={:<2} accuracy={} error_m={}",
                    s.system,
                    s.kind,
                    axis.as_str(),
                    match axis {
                        SweepAxis::Malicious => s.malicious_count,
                        SweepAxis::Faulty => s.faulty_count,
                    },
                    fmt_opt(s.accuracy),
                    fmt_opt(s.error_distance_m)
                );
            }
            let written = harness::write_outputs(&out, "sweep", &results, false)?;
            report(&out, &written);
        }
        Command::InferEval {
            common,
            faulty_counts,
            trials,
        } => {
            let (mut cfg, out) = common.config()?;
            if let Some(t) = trials {
                cfg.inference.trials = t;
                cfg.validate()?;
            }
            let results = harness::run_inference_study(&cfg, &faulty_counts, &common.systems())?;
            for r in &results {
                let s = &r.summary;
                println!(
                    "{} {} faulty={} training: acc={} err={} | training+inference: acc={} err={}",
                    s.system,
                    s.kind,
                    s.faulty_count,
                    fmt_opt(s.accuracy),
                    fmt_opt(s.error_distance_m),
                    fmt_opt(s.inference_accuracy),
                    fmt_opt(s.inference_error_distance_m)
                );
            }
            let written = harness::write_outputs(&out, "infer-eval", &results, true)?;
            report(&out, &written);
        }
        Command::Audit { chain } => match harness::audit_file(&chain) {
            Ok(report) => {
                for (label, blocks, stake) in report.chains {
                    println!("chain {label}: {blocks} blocks, total stake {stake}: ok");
                }
            }
            Err(HarnessError::Ledger(e)) => return Err(CliError::Audit(e.to_string())),
            Err(e) => return Err(e.into()),
        },
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
