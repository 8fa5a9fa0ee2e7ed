use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mmot_cli::audit::twist_audit;
use mmot_cli::config::ExperimentConfig;
use mmot_cli::converse::{converse_search, ConverseSpec};
use mmot_cli::pipeline::{run, write_outputs, RunReport};
use mmot_cli::{tensor_cap, DEMO_CONFIG};
use mmot_core::costs::spec::CostSpec;

#[derive(Parser)]
#[command(name = "mmot", version, about = "Exact multi-marginal transport with splitting, monotonicity and twist audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one experiment config and run its checks.
    Solve { config: PathBuf },
    /// Sample the differential twist conditions of a cost.
    TwistAudit {
        cost: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Look for monotone sets that fail splitting (m ≥ 4).
    ConverseSearch {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the bundled three-marginal example.
    Demo {
        /// Directory for report.json and coupling.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn summarize(report: &RunReport) {
    let s = &report.solve;
    println!("solve ({}): objective {:.12}, support {}", s.solver, s.objective, s.support_size);
    for c in &report.checks {
        println!("{:<12} {:?}", c.check, c.verdict);
    }
}

fn run_config(mut config: ExperimentConfig, base: Option<&Path>) -> Result<i32> {
    config.validate()?;
    let (report, coupling) = run(&config, base, tensor_cap()?)?;
    write_outputs(&config, &report, &coupling)?;
    summarize(&report);
    Ok(report.exit_code())
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Solve { config } => {
            let parsed = ExperimentConfig::from_path(&config)?;
            run_config(parsed, config.parent())
        }
        Command::TwistAudit { cost, samples, seed, out } => {
            let spec: CostSpec = read_json(&cost)?;
            let audit = twist_audit(&spec, samples, seed)?;
            emit(&audit, out.as_deref())?;
            Ok(audit.exit_code())
        }
        Command::ConverseSearch { spec, out } => {
            let parsed: ConverseSpec = read_json(&spec)?;
            let report = converse_search(&parsed, tensor_cap()?)?;
            emit(&report, out.as_deref())?;
            Ok(0)
        }
        Command::Demo { out_dir } => {
            let mut config: ExperimentConfig = serde_json::from_str(DEMO_CONFIG)?;
            if let Some(dir) = &out_dir {
                fs::create_dir_all(dir)?;
                config.output.report = Some(dir.join("report.json"));
                config.output.coupling = Some(dir.join("coupling.csv"));
            }
            run_config(config, None)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
