//! Command-line entry point: `run` executes a configured experiment, `verify`
//! runs the check suites, `slope` fits a power law to an emitted trace.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use zo_bandit::harness::{self, OUT_DIR_ENV};
use zo_bandit::verify::{run_verify, VerifyLevel};

#[derive(Parser)]
#[command(
    name = "zo-bandit",
    version,
    about = "Gaussian-search zeroth-order convex optimizer: experiment runner and verification suite"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configured experiment and emit trace.csv, summary.json, and a
    /// config echo.
    Run {
        /// Path to the TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the environment variable and the
        /// config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suites and write a machine-readable report.
    Verify {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a power law to the median cumulative regret of an emitted trace.
    Slope {
        #[arg(long)]
        csv: PathBuf,
        /// Smallest round index included in the fit window.
        #[arg(long)]
        from: usize,
        /// Largest round index included in the fit window.
        #[arg(long)]
        to: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

fn main() -> ExitCode {
    match run_cmd(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_cmd(cmd: Cmd) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cmd {
        Cmd::Run { config, out } => {
            let env_out = std::env::var(OUT_DIR_ENV).ok();
            let (dir, doc) =
                harness::run_from_config(&config, out.as_deref(), env_out.as_deref())?;
            println!("wrote {}", dir.join("trace.csv").display());
            println!("wrote {}", dir.join("summary.json").display());
            println!(
                "final regret: median {}, mean {}",
                doc.final_regret.median, doc.final_regret.mean
            );
            println!(
                "average-iterate error: median {}",
                doc.avg_iterate_error.median
            );
            match (&doc.slope, &doc.slope_error) {
                (Some(fit), _) => println!(
                    "regret slope over t in [{}, {}]: exponent {:.4}, r_squared {:.4}",
                    doc.slope_window.0, doc.slope_window.1, fit.exponent, fit.r_squared
                ),
                (None, Some(err)) => println!("regret slope unavailable: {err}"),
                (None, None) => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { level, seed } => {
            let level = match level {
                LevelArg::Fast => VerifyLevel::Fast,
                LevelArg::Full => VerifyLevel::Full,
            };
            let report = run_verify(level, seed);
            for l in &report.lines {
                println!("{} {} :: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            let dir = std::env::var(OUT_DIR_ENV)
                .ok()
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"));
            std::fs::create_dir_all(&dir)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            let path = dir.join("verify_report.json");
            std::fs::write(&path, json)?;
            println!("report: {}", path.display());
            if report.all_pass {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("some checks FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Slope { csv, from, to } => {
            let points = harness::read_median_regret_csv(&csv, from, to)?;
            let fit = harness::fit_power_law(&points)?;
            println!("exponent {}", fit.exponent);
            println!("intercept {}", fit.intercept);
            println!("r_squared {}", fit.r_squared);
            println!("points {}", fit.points);
            Ok(ExitCode::SUCCESS)
        }
    }
}
