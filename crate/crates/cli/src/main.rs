use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use pilotstream::experiment::bench::{bench_process, bench_produce, bench_startup, ProcessOptions};
use pilotstream::experiment::{run_experiment, ExperimentConfig, ExperimentError};
use pilotstream::mass::SCENARIOS;

#[derive(Parser)]
#[command(name = "pilotstream", version, about = "Run streaming experiments and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its report bundle.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure pilot startup, producer or processing throughput.
    Bench {
        kind: BenchKind,
        /// One of the MASS scenarios; all four when omitted.
        #[arg(long)]
        scenario: Option<String>,
        /// kmeans, gridrec or mlem; all three when omitted.
        #[arg(long)]
        operator: Option<String>,
        /// Comma-separated worker (or producer) counts.
        #[arg(long, value_delimiter = ',')]
        workers: Option<Vec<usize>>,
        /// Seconds per produce or process measurement.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// ML-EM iterations.
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        /// Write the CSV here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Startup,
    Produce,
    Process,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PILOTSTREAM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output, seed } => run(config, output, seed),
        Command::Bench { kind, scenario, operator, workers, duration, iterations, output } => {
            bench(kind, scenario, operator, workers, duration, iterations, output)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ExperimentError>() {
                Some(x) => ExitCode::from(x.exit_code() as u8),
                None => ExitCode::from(2),
            }
        }
    }
}

fn run(config: PathBuf, output: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&config)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let outcome = run_experiment(&cfg, output.as_deref())?;
    print!("{}", outcome.summary);
    println!("report: {}", outcome.output_dir.display());
    Ok(())
}

fn bench(
    kind: BenchKind,
    scenario: Option<String>,
    operator: Option<String>,
    workers: Option<Vec<usize>>,
    duration: f64,
    iterations: usize,
    output: Option<PathBuf>,
) -> anyhow::Result<()> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(ExperimentError::Config { field: "--duration".into(), message: "must be positive".into() }.into());
    }
    let mut csv = String::new();
    match kind {
        BenchKind::Startup => {
            csv.push_str("service_type,workers,startup_ms\n");
            for r in bench_startup(&workers.unwrap_or_else(|| vec![1, 2, 4, 8]))? {
                csv.push_str(&format!("{},{},{:.3}\n", r.service_type, r.workers, r.startup_ms));
            }
        }
        BenchKind::Produce => {
            let scenarios: Vec<String> = match scenario {
                Some(s) => vec![s],
                None => SCENARIOS.iter().map(|s| s.to_string()).collect(),
            };
            csv.push_str("scenario,producers,messages,seconds,msgs_per_s,mb_per_s,median_msgs_per_s\n");
            for s in scenarios {
                for r in bench_produce(&s, &workers.clone().unwrap_or_else(|| vec![1, 2, 4, 8]), duration)? {
                    csv.push_str(&format!(
                        "{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
                        r.scenario, r.producers, r.messages, r.seconds, r.msgs_per_s, r.mb_per_s, r.median_msgs_per_s
                    ));
                }
            }
        }
        BenchKind::Process => {
            let operators: Vec<String> = match operator {
                Some(o) => vec![o],
                None => ["kmeans", "gridrec", "mlem"].iter().map(|s| s.to_string()).collect(),
            };
            let opts = ProcessOptions { iterations, ..Default::default() };
            csv.push_str("operator,workers,windows,messages,seconds,msgs_per_s,median_window_msgs_per_s\n");
            for o in operators {
                for r in bench_process(&o, &workers.clone().unwrap_or_else(|| vec![1, 2, 4]), duration, &opts)? {
                    csv.push_str(&format!(
                        "{},{},{},{},{:.3},{:.3},{:.3}\n",
                        r.operator, r.workers, r.windows, r.messages, r.seconds, r.msgs_per_s, r.median_window_msgs_per_s
                    ));
                }
            }
        }
    }
    match output {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}
