use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use faastrain::experiments::{run_preset, Preset};
use faastrain::scheduler::ledger::{write_events_csv, write_iterations_csv};
use faastrain::scheduler::{run_job, JobSpec, SchedulerError};

#[derive(Parser)]
#[command(
    name = "faastrain",
    version,
    about = "Simulated serverless training with goal-driven resource optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a job described by a JSON spec file.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the data, platform and search seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Set any spec field by dotted path, e.g. `platform.max_duration=300`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a built-in experiment and write its CSVs.
    Experiment {
        #[arg(value_parser = parse_preset)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

const EXIT_OTHER: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_RESTART_STORM: u8 = 4;

enum Failure {
    Parse(String),
    Scheduler(SchedulerError),
    Other(anyhow::Error),
}

impl From<SchedulerError> for Failure {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::InvalidSpec(m) => Failure::Parse(m),
            e => Failure::Scheduler(e),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_spec(path: &Path) -> Result<JobSpec, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Other)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Failure::Parse(format!(
            "{}: line {}, column {}: field `{}`: {}",
            path.display(),
            inner.line(),
            inner.column(),
            e.path(),
            inner
        ))
    })
}

fn reseed(job: &mut JobSpec, seed: u64) {
    job.seed = seed;
    job.platform.rng_seed = seed;
    job.optimizer.limits.seed = seed;
}

fn create(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_run(
    spec: &Path,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<(), Failure> {
    let mut job = load_spec(spec)?;
    if let Some(seed) = seed {
        reseed(&mut job, seed);
    }
    let job = job.with_overrides(overrides)?;
    let ledger = run_job(&job)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_iterations_csv(&ledger.rows, create(out.join("iterations.csv"))?)
        .context("writing iterations.csv")?;
    write_events_csv(&ledger.events, create(out.join("events.csv"))?)
        .context("writing events.csv")?;
    let summary = ledger.summary();
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(out.join("summary.json"), json + "\n").context("writing summary.json")?;
    let loss = summary
        .final_loss
        .map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!(
        "{:?}: wall_time={:.3}s cost=${:.6} final_loss={loss} config={}",
        summary.status, summary.wall_time_s, summary.total_cost_usd, ledger.final_config
    );
    Ok(())
}

fn cmd_experiment(
    preset: Preset,
    out: &Path,
    seed: u64,
    overrides: &[String],
) -> Result<(), Failure> {
    let output = run_preset(preset, seed, overrides)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, csv) in &output.files {
        fs::write(out.join(name), csv).with_context(|| format!("writing {name}"))?;
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            spec,
            out,
            seed,
            overrides,
        } => cmd_run(spec, out, *seed, overrides),
        Command::Experiment {
            preset,
            out,
            seed,
            overrides,
        } => cmd_experiment(*preset, out, *seed, overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Parse(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_PARSE)
        }
        Err(Failure::Scheduler(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                SchedulerError::Infeasible { .. } => EXIT_INFEASIBLE,
                SchedulerError::RestartStorm { .. } => EXIT_RESTART_STORM,
                _ => EXIT_OTHER,
            })
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}
