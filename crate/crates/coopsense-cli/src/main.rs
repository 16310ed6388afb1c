//! Command-line front end: run scenarios, sweep parameter grids, detect
//! vehicles in a point-cloud file, and re-evaluate run logs.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime
//! failure. The output directory comes from `--out`, falling back to the
//! `COOPSENSE_OUT` environment variable and then `./coopsense_out`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coopsense::detection::DetectorConfig;
use coopsense::harness;
use coopsense::scenario::ScenarioConfig;

#[derive(Parser)]
#[command(name = "coopsense", version, about = "Cooperative perception and signal control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (default: $COOPSENSE_OUT or ./coopsense_out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutputArgs {
    fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("COOPSENSE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("coopsense_out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its logs and metric reports.
    Run {
        /// Scenario config file (flat `key = value` text).
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the cross product of a parameter grid over a base scenario.
    Sweep {
        config: PathBuf,
        /// Grid spec: `key=v1,v2,...` pairs separated by `;`.
        #[arg(long)]
        grid: String,
        /// Seeds per cell (base seed, base seed + 1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Detect vehicles in a single point-cloud file and print the
    /// detection records.
    Detect {
        /// Point-cloud file (`# frame=<id> n=<count>` header).
        cloud: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Recompute metrics from a run directory's logs and print the
    /// report.
    Eval {
        /// A directory previously written by `run`.
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err.downcast_ref::<coopsense::Error>().is_some_and(|e| {
                matches!(
                    e,
                    coopsense::Error::Config(_)
                        | coopsense::Error::Parse { .. }
                        | coopsense::Error::InvalidArgument(_)
                )
            });
            if config_error {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
        } => {
            let mut cfg = ScenarioConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stem = config
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".to_string());
            let dir = output.resolve().join(format!("{stem}-seed{}", cfg.seed));
            let summary = harness::run(&cfg, &dir)?;
            print!("{}", harness::metrics_report_text(&summary));
            println!("# outputs: {}", dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            grid,
            seeds,
            seed,
            output,
        } => {
            let mut cfg = ScenarioConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let grid = parse_grid(&grid)?;
            let stem = config
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "sweep".to_string());
            let root = output.resolve().join(format!("{stem}-sweep"));
            let cells = harness::sweep(&cfg, &grid, seeds, &root)?;
            print!("{}", harness::sweep_report_text(&cells));
            println!("# outputs: {}", root.display());
            Ok(())
        }
        Command::Detect { cloud, seed } => {
            let dets = harness::detect_cloud_file(&cloud, &DetectorConfig::default(), seed)?;
            println!("# frame sensor cx cy cz ex ey ez score");
            for d in &dets {
                println!("{}", d.to_record(0));
            }
            Ok(())
        }
        Command::Eval { run_dir } => {
            let summary = harness::evaluate_run_dir(&run_dir)?;
            print!("{}", harness::metrics_report_text(&summary));
            Ok(())
        }
    }
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<(String, Vec<String>)>> {
    let mut grid = Vec::new();
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("grid entry '{part}' is not key=v1,v2,..."))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            anyhow::bail!("grid entry '{part}' has no values");
        }
        grid.push((key.trim().to_string(), values));
    }
    Ok(grid)
}
