//! Command-line entry points: simulate, run, eval, export.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::dataset::{evaluate, read_dataset, read_run, write_run, write_simulation, EvalConfig};
use crate::error::{Error, Result};
use crate::pipeline::{run, PipelineConfig};
use crate::scene_graph::SceneGraphDocument;
use crate::sim::{simulate, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "urbangraph", version, about = "Collaborative LiDAR mapping with urban scene graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a world and record a multi-agent dataset.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        /// Recording length in seconds.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        /// One of town, staircase, mixed, convoy.
        #[arg(long, default_value = "town")]
        world_preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the multi-agent pipeline on a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML pipeline configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Single-threaded, timestamp-ordered processing.
        #[arg(long)]
        deterministic: bool,
    },
    /// Compute the metrics report of a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report path; defaults to metrics.json in the run directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-serialize the scene graph of a run.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { seed, agents, duration, world_preset, out } => {
            let cfg = ScenarioConfig::preset(&world_preset, seed, agents, duration)?;
            let sim = simulate(&cfg)?;
            write_simulation(&sim, &world_preset, &out)?;
            info!("wrote {} agents to {}", sim.agents.len(), out.display());
        }
        Command::Run { dataset, config, out, deterministic } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_dataset(&dataset)?;
            let result = run(&data.agents, &cfg, deterministic)?;
            write_run(&result, &out)?;
            info!(
                "{} keyframes, {} components, loops {:?}",
                result.keyframes, result.components, result.loop_stats
            );
        }
        Command::Eval { run: run_dir, dataset, report } => {
            let artifacts = read_run(&run_dir)?;
            let data = read_dataset(&dataset)?;
            let metrics = evaluate(&artifacts, &data, &EvalConfig::default())?;
            let json = metrics.to_json()?;
            fs::write(report.unwrap_or_else(|| run_dir.join("metrics.json")), &json)?;
            print!("{json}");
        }
        Command::Export { run: run_dir, format: ExportFormat::Json, out } => {
            let path = run_dir.join("scenegraph.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            fs::write(out, SceneGraphDocument::from_json(&text)?.to_json())?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), executes and returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
