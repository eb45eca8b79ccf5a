//! `envsynth` command line: run scenarios, sweeps and calibrations from JSON
//! configs and write deterministic CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use envsynth::export::to_json_string;
use envsynth::scenario::{
    config_schemas, run_calibration, run_scenario, run_sweep, Procedure, Scenario, SweepSpec,
};

#[derive(Parser, Debug)]
#[command(name = "envsynth", version, about = "Envelope synthesis and transmitter impairment simulator")]
struct Cli {
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write metrics.json plus requested CSVs.
    Simulate { config: PathBuf },
    /// Run a parameter sweep and write sweep.csv.
    Sweep { config: PathBuf },
    /// Run one calibration procedure and write calibration.json.
    Calibrate {
        config: PathBuf,
        #[arg(long)]
        procedure: Procedure,
    },
    /// Write the JSON schemas for scenario and sweep configs.
    Schema,
}

/// Failure split by exit code: bad input versus a simulation that failed.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)
}

fn config<T>(path: &Path, parse: impl FnOnce(&str) -> envsynth::Result<T>) -> Result<T, Failure> {
    let text = read(path)?;
    parse(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Config)
}

fn runtime<T>(r: envsynth::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(e.into()))
}

/// Writes every file via a temporary in the same directory, then renames.
fn write_all(dir: &Path, files: &BTreeMap<String, Vec<u8>>) -> Result<(), Failure> {
    let io = |e: anyhow::Error| Failure::Runtime(e);
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(io)?;
    for (name, bytes) in files {
        let target = dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .context("creating temporary file")
            .map_err(io)?;
        tmp.write_all(bytes).context("writing temporary file").map_err(io)?;
        tmp.persist(&target)
            .with_context(|| format!("writing {}", target.display()))
            .map_err(io)?;
        log::info!("wrote {}", target.display());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let files = match &cli.command {
        Command::Simulate { config: path } => {
            let s = config(path, Scenario::from_json)?;
            log::info!("simulating scenario `{}`", s.name);
            runtime(run_scenario(&s))?.files
        }
        Command::Sweep { config: path } => {
            let spec = config(path, SweepSpec::from_json)?;
            log::info!("sweeping {} points", spec.points().len());
            let csv = runtime(run_sweep(&spec))?;
            BTreeMap::from([("sweep.csv".to_string(), csv.into_bytes())])
        }
        Command::Calibrate { config: path, procedure } => {
            let s = config(path, Scenario::from_json)?;
            log::info!("calibrating `{}` with {}", s.name, procedure.as_str());
            let out = runtime(run_calibration(&s, *procedure))?;
            let calibrated = runtime(out.calibrated.to_json())?;
            BTreeMap::from([
                ("calibration.json".to_string(), to_json_string(&out.report).into_bytes()),
                ("calibrated_scenario.json".to_string(), calibrated.into_bytes()),
            ])
        }
        Command::Schema => config_schemas().into_iter().map(|(k, v)| (k, v.into_bytes())).collect(),
    };
    write_all(&cli.out_dir, &files)?;
    log::info!("finished in {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();

    #[cfg(feature = "parallel")]
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.threads > 1 {
        log::warn!("built without the `parallel` feature; --threads ignored");
    }

    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
