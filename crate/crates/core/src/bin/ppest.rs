use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppest::harness::{
    self, check_approach, check_benchmark, report_checks, suite_checks, ExperimentConfig, CONFIG_KEYS_HELP, THREADS_ENV,
};
use ppest::Result;

#[derive(Parser)]
#[command(
    name = "ppest",
    version,
    about = "Probabilistic runway-relative pose estimation experiments",
    after_help = format!("{CONFIG_KEYS_HELP}\n\nENVIRONMENT:\n  {THREADS_ENV}  worker thread count (default: all cores)\n\nEXIT CODES:\n  0 success, 1 error, 2 a reported check failed")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with configuration keys (see below)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Override `out`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `trials` (the number of approaches for `approach`)
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibration and sharpness over random poses; writes trials.csv,
    /// calibration.csv and sharpness.csv
    Suite(Common),
    /// The suite under long-tail mixture noise
    Longtail(Common),
    /// Median runtime per estimator and sample count; writes bench.csv
    Bench(Common),
    /// Kalman filtering of synthetic approaches; writes approach.csv and
    /// calibration.csv
    Approach(Common),
    /// Fast internal consistency checks
    Selftest(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Suite(c) => {
            let cfg = c.load()?;
            let report = harness::run_suite(&cfg)?;
            harness::write_suite_outputs(&report, &cfg.out)?;
            for kind in &cfg.estimators {
                println!("{}: mean {:.2} ms per trial", kind.name(), report.mean_wall_ms(*kind));
            }
            Ok(report_checks(&suite_checks(&cfg, &report)))
        }
        Command::Longtail(c) => {
            let cfg = harness::longtail_config(&c.load()?);
            let report = harness::run_suite(&cfg)?;
            harness::write_suite_outputs(&report, &cfg.out)?;
            Ok(report_checks(&harness::check_longtail(&report)))
        }
        Command::Bench(c) => {
            let cfg = c.load()?;
            let rows = harness::run_benchmark(&cfg)?;
            harness::write_bench_csv(&rows, &cfg.out)?;
            for r in &rows {
                println!(
                    "{:>6} K={:<4} {:>10.4} ms  ±{:.0}%",
                    r.estimator.name(),
                    r.k,
                    r.median_ms,
                    100.0 * r.rel_sigma
                );
            }
            Ok(report_checks(&check_benchmark(&rows)))
        }
        Command::Approach(c) => {
            let mut cfg = c.load()?;
            if let Some(t) = c.trials {
                cfg.approach_runs = t;
            }
            let report = harness::run_approach(&cfg)?;
            harness::write_approach_outputs(&report, &cfg.out)?;
            println!(
                "joint calibration (filtered) max deviation {:.3}, not asserted",
                report.filtered_joint.max_deviation()
            );
            let still = harness::run_approach_with(&cfg, 0.0)?;
            let marg = still
                .filtered_marginals
                .iter()
                .map(|c| c.max_deviation())
                .fold(0.0, f64::max);
            println!(
                "without process noise: joint max deviation {:.3}, worst marginal {:.3}, not asserted",
                still.filtered_joint.max_deviation(),
                marg
            );
            Ok(report_checks(&check_approach(&report)))
        }
        Command::Selftest(c) => {
            let cfg = c.load()?;
            Ok(report_checks(&harness::selftest(cfg.seed)?))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
