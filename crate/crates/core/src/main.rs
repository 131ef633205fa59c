use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use geoground::bank_io::inspect_geobank;
use geoground::experiment::{run_ablation, run_experiment, AblationAxis, ExperimentConfig, RunCache};
use geoground::suite::{gradient_suite, selftest};
use geoground::{Error, Result};

#[derive(Parser)]
#[command(name = "geoground", version, about = "Geometry-bank grounding experiments")]
struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Write outputs here instead of the config's `out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a config; write metrics and heatmaps.
    Run { config: PathBuf },
    /// Sweep one ablation axis over a base config.
    Ablate {
        /// bank_construction, bank_size, compactness, allocation or position
        axis: String,
        config: PathBuf,
    },
    /// Print a `.geobank` header and per-layer statistics.
    Inspect { path: PathBuf },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Fast invariant checks.
    Selftest,
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        config.seeds = vec![seed];
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write_runtime(dir: &Path, name: &str, started: Instant) -> Result<()> {
    let path = dir.join(name);
    let text = format!("wall_seconds = {:.3}\n", started.elapsed().as_secs_f64());
    fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })
}

fn run(cli: &Cli) -> Result<i32> {
    let started = Instant::now();
    match &cli.command {
        Command::Run { config } => {
            let config = load(cli, config)?;
            let result = run_experiment(&config, &RunCache::default())?;
            let written = result.write(&config.out_dir)?;
            write_runtime(&config.out_dir, "runtime.txt", started)?;
            println!(
                "test_accuracy {:.4}  agreement {:.4}  seeds {:?}",
                result.mean_test_accuracy(),
                result.mean_agreement(),
                config.seeds
            );
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Ablate { axis, config } => {
            let axis: AblationAxis = axis.parse()?;
            let config = load(cli, config)?;
            let report = run_ablation(axis, &config, &RunCache::default())?;
            let written = report.write(&config.out_dir)?;
            write_runtime(&config.out_dir, &format!("runtime_{axis}.txt"), started)?;
            print!("{}", report.to_csv());
            for p in written {
                println!("wrote {}", p.display());
            }
            match report.first_error() {
                Some(e) => {
                    eprintln!("error: ablation incomplete: {}", e.message);
                    Ok(e.exit_code)
                }
                None => Ok(0),
            }
        }
        Command::Inspect { path } => {
            print!("{}", inspect_geobank(path)?);
            Ok(0)
        }
        Command::Gradcheck { seeds, h, tol } => {
            let seeds: Vec<u64> = (0..*seeds).collect();
            let mut failed = 0;
            for (label, r) in gradient_suite(&seeds, *h, *tol)? {
                let verdict = if r.pass { "ok  " } else { "FAIL" };
                println!("{verdict} {label} max_rel_error {:.3e}", r.max_rel_error());
                for p in r.params.iter().filter(|p| p.max_rel_error >= *tol) {
                    println!("       {} {:.3e} at {}", p.name, p.max_rel_error, p.worst_index);
                }
                failed += usize::from(!r.pass);
            }
            println!("{failed} failing configurations");
            Ok(if failed == 0 { 0 } else { 3 })
        }
        Command::Selftest => {
            let checks = selftest()?;
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(if checks.iter().all(|c| c.pass) { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
