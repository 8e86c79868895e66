use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vipaint::harness::{self, RunOptions};
use vipaint::Error;

#[derive(Parser)]
#[command(
    name = "vipaint",
    version,
    about = "Posterior inference for linear inverse problems under diffusion priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method over seeds; write samples, metrics, plots.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Seeds as a comma list (0,1,2) or inclusive range (0..9);
        /// defaults to the config's seed list.
        #[arg(long)]
        seeds: Option<String>,
        /// Output root (default: $VIPAINT_OUT, else ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the per-seed jobs.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run summaries into one CSV table.
    Compare {
        /// Run directories produced by `run`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate even when the runs come from different configs.
        #[arg(long)]
        force: bool,
    },
    /// Train the network denoiser on draws from the config's mixture prior.
    #[command(name = "train-denoiser")]
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
        /// Weights output path (default: <out root>/denoiser-<hash>.bin).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed; with a list or range, the first entry is used.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write exact-posterior samples and moments for the configured problem.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <out root>/oracle-<hash>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of posterior draws.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Seed for the draws; with a list or range, the first entry is used.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Verify core invariants quickly; nonzero exit on any failure.
    Selfcheck,
}

/// Parse "0,1,2" or "0..9" (inclusive) into a seed list.
fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let lo: u64 = a
            .trim()
            .parse()
            .map_err(|_| format!("bad range start {a:?}"))?;
        let hi: u64 = b
            .trim()
            .parse()
            .map_err(|_| format!("bad range end {b:?}"))?;
        if lo > hi {
            return Err(format!("empty seed range {text:?}"));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad seed {s:?}"))
        })
        .collect()
}

fn first_seed(seeds: &Option<String>) -> Result<u64, String> {
    match seeds {
        None => Ok(0),
        Some(text) => Ok(parse_seeds(text)?[0]),
    }
}

fn real_main() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Run {
            config,
            seeds,
            out,
            threads,
            force,
        } => {
            let opts = RunOptions {
                seeds: seeds
                    .as_deref()
                    .map(parse_seeds)
                    .transpose()
                    .map_err(Error::InvalidArgument)?,
                out,
                threads,
                force,
            };
            let run_dir = harness::run(&config, &opts)?;
            println!("run complete: {}", run_dir.display());
            println!("summary: {}", run_dir.join("summary.json").display());
        }
        Command::Compare { dirs, out, force } => {
            let (csv, skipped) = harness::compare(&dirs, force)?;
            for s in &skipped {
                eprintln!("skipped: {s}");
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("table written: {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::TrainDenoiser { config, out, seeds } => {
            let seed = first_seed(&seeds).map_err(Error::InvalidArgument)?;
            let (path, trace) = harness::train_denoiser(&config, out, seed)?;
            let first = trace.first().copied().unwrap_or(f64::NAN);
            let last = trace.last().copied().unwrap_or(f64::NAN);
            println!("weights written: {}", path.display());
            println!(
                "loss: {first:.6} -> {last:.6} over {} steps",
                trace.len()
            );
        }
        Command::Oracle {
            config,
            out,
            samples,
            seeds,
        } => {
            let seed = first_seed(&seeds).map_err(Error::InvalidArgument)?;
            let dir = harness::oracle(&config, out, samples, seed)?;
            println!("oracle written: {}", dir.display());
        }
        Command::Selfcheck => {
            let lines = harness::selfcheck();
            let mut failures = 0;
            for line in &lines {
                if line.pass {
                    println!("ok   {}: {}", line.name, line.detail);
                } else {
                    println!("FAIL {}: {}", line.name, line.detail);
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(Error::InvalidArgument(format!(
                    "{failures} self-check(s) failed"
                )));
            }
            println!("all {} checks passed", lines.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_seeds;

    #[test]
    fn seed_lists_and_ranges_parse() {
        assert_eq!(parse_seeds("0,1,2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("0..9").unwrap(), (0..=9).collect::<Vec<_>>());
        assert_eq!(parse_seeds(" 7 ").unwrap(), vec![7]);
        assert!(parse_seeds("9..0").is_err());
        assert!(parse_seeds("a,b").is_err());
        assert!(parse_seeds("").is_err());
    }
}
