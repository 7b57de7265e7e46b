use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p2pfaas::config::RunConfig;
use p2pfaas::cost::{PaperTables, RateOverrides};
use p2pfaas::experiment::{run_experiment, sweep, SweepAxis};
use p2pfaas::Error;

#[derive(Parser)]
#[command(name = "p2pfaas", version, about = "Peer-to-peer SGD with serverless gradient computation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per value of an axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// batch_size, peers, encoding or mode
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `2,4,8` or `raw,qsgd:16`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the published cost tables and check them.
    PaperTables {
        #[arg(long)]
        lambda_rate: Option<f64>,
        #[arg(long)]
        ec2_rate: Option<f64>,
    },
}

fn load(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> p2pfaas::Result<RunConfig> {
    let mut c = RunConfig::load(config)?;
    if let Some(seed) = seed {
        c = c.with_override("seed", &seed.to_string())?;
    }
    if let Some(out) = out {
        c = c.with_override("out", &out.display().to_string())?;
    }
    Ok(c)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Validation(_) | Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("P2PFAAS_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed } => {
            let report = load(&config, out, seed).and_then(|c| run_experiment(&c));
            match report {
                Ok(r) => {
                    println!(
                        "run {} ok: {} peers, final checksum {}, accuracy {:.4}, output in {}",
                        r.run_id,
                        r.outcomes.len(),
                        r.final_checksum(),
                        r.final_accuracy(),
                        r.out_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
        } => {
            let result = (|| {
                let axis: SweepAxis = axis.parse()?;
                let base = load(&config, None, seed)?;
                let out = out.unwrap_or_else(|| base.out.clone());
                let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
                sweep(&base, axis, &values, &out).map(|rows| (rows, out))
            })();
            match result {
                Ok((rows, out)) => {
                    println!("value,compute_time,comm_time,cost,accuracy,bytes");
                    for r in rows {
                        println!(
                            "{},{:.6},{:.6},{:.6},{:.4},{:.0}",
                            r.value, r.compute_time, r.comm_time, r.cost, r.accuracy, r.bytes
                        );
                    }
                    println!("written to {}", out.join("sweep.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::PaperTables { lambda_rate, ec2_rate } => {
            let overrides = RateOverrides {
                lambda_rate_usd_per_s: lambda_rate,
                ec2_rate_usd_per_s: ec2_rate,
            };
            match PaperTables::reproduce(overrides) {
                Ok(t) => {
                    print!("{}", t.render());
                    if let Ok(c) = t.comparison(1024) {
                        println!(
                            "\nbatch 1024: serverless/instance cost ratio {:.4}, time reduction {:.2}%",
                            c.cost_ratio, c.time_reduction_pct
                        );
                    }
                    if !overrides.is_empty() {
                        return ExitCode::SUCCESS;
                    }
                    let bad = t.mismatches();
                    if bad.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("{} cell(s) differ from the published tables by more than the tolerance", bad.len());
                        ExitCode::from(1)
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
    }
}
