//! `mdil`: runs incremental-learning experiments and reports on them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdil_core::data::{save_dataset, SyntheticSpec};
use mdil_core::experiment::{report, run_experiment, ExperimentConfig, Report};
use mdil_core::gradcheck::run_grad_check;
use mdil_core::protocol::derive_seed;
use mdil_core::Error;

/// Exit status for each failure class.
mod exit {
    pub const CONFIG: u8 = 3;
    pub const RUN: u8 = 4;
    pub const REPORT: u8 = 5;
    pub const GRAD_CHECK: u8 = 6;
}

/// Used when neither `--out`, the config, nor the environment names one.
const DEFAULT_OUT_ROOT: &str = "mdil-out";
const OUT_ENV: &str = "MDIL_OUT";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mdil", version, about = "Class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (tau, seed, arm) point of an experiment config.
    Run {
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel runs (0 = one per core).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory. Defaults to the config's `output`, then
        /// `$MDIL_OUT/<config name>`, then `./mdil-out/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the aggregate tables of an output directory from its run logs.
    Report { dir: PathBuf },
    /// Generate a synthetic dataset from a TOML spec and save it as CSV.
    GenData {
        spec: PathBuf,
        out: PathBuf,
        /// Re-seed every domain from this base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic loss and network gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Run { .. } | Error::Numeric(_) | Error::State(_) | Error::Shape(_) => exit::RUN,
        Error::Report(_) => exit::REPORT,
        _ => exit::CONFIG,
    }
}

fn output_dir(flag: Option<PathBuf>, config: &ExperimentConfig, config_path: &Path) -> PathBuf {
    if let Some(out) = flag.or_else(|| config.output.clone()) {
        return out;
    }
    let root = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
    let name = config_path.file_stem().unwrap_or("experiment".as_ref());
    root.join(name)
}

fn print_arms(report: &Report) {
    println!(
        "{:<18} {:>6} {:>5} {:>10} {:>10}",
        "arm", "tau", "runs", "accuracy", "forgetting"
    );
    for a in &report.arms {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
        let tau = a.tau.map_or_else(|| "plan".into(), |t| t.to_string());
        println!(
            "{:<18} {:>6} {:>5} {:>10} {:>10}",
            a.arm.name(),
            tau,
            a.runs,
            f(a.median_accuracy),
            f(a.median_forgetting)
        );
    }
    let flagged = report.flagged();
    if !flagged.is_empty() {
        println!("{} run(s) flagged for inconsistent L_IL bookkeeping", flagged.len());
    }
}

fn cmd_run(config_path: &Path, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> Result<(), Error> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        config.sweep.seeds = vec![s];
    }
    if let Some(w) = workers {
        config.workers = w;
    }
    let out = output_dir(out, &config, config_path);
    let data = config.load_data()?;
    let report = run_experiment(&config, &data, &out)?;
    print_arms(&report);
    println!("wrote {} run(s) to {}", report.runs.len(), out.display());
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Error> {
    let report = report(dir)?;
    print_arms(&report);
    println!("rewrote tables in {}", dir.display());
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut spec = SyntheticSpec::load(spec_path)?;
    if let Some(base) = seed {
        for (i, d) in spec.domains.iter_mut().enumerate() {
            d.seed = derive_seed(base, &[i as u64]);
        }
    }
    let data = spec.generate()?;
    save_dataset(&data, out)?;
    println!(
        "wrote {} samples ({} features, {} classes, {} domains) to {}",
        data.len(),
        data.dim(),
        data.classes().len(),
        spec.domains.len(),
        out.display()
    );
    Ok(())
}

fn cmd_grad_check(cases: usize, seed: u64) -> Result<bool, Error> {
    let r = run_grad_check(cases, seed)?;
    println!("cases {}", r.cases);
    for (name, e) in [
        ("L_D", r.distillation),
        ("L_C", r.classification),
        ("L_MD", r.mutual),
        ("L_IL", r.combined),
        ("network", r.network),
    ] {
        println!("{name:<8} max relative error {e:.3e}");
    }
    let ok = r.max_error() < GRAD_TOLERANCE;
    println!("{} (tolerance {GRAD_TOLERANCE:e})", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => cmd_run(&config, seed, workers, out).map(|_| true),
        Command::Report { dir } => cmd_report(&dir).map(|_| true),
        Command::GenData { spec, out, seed } => cmd_gen_data(&spec, &out, seed).map(|_| true),
        Command::GradCheck { cases, seed } => cmd_grad_check(cases, seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(exit::GRAD_CHECK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
