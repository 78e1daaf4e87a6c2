//! `semimatch` command-line front end.
//!
//! Exit codes: 0 success, 1 a cell or self-check failed, 2 bad usage or
//! configuration, 3 data or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use semimatch::config::{load_config, ExperimentConfig, Override, Source, OUT_DIR_ENV};
use semimatch::signal::{
    load_any, save_features, save_features_csv, synth_generate, FeatureDataset, Protocol,
};
use semimatch::ssl::Method;
use semimatch::train::{run_grid, summarize, write_atomic, GridOptions};
use semimatch::{selftest, Error};

/// Resolved configuration saved next to the reports so `resume` can reuse it.
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(
    name = "semimatch",
    version,
    about = "Semi-supervised learning experiments on EEG-style features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every (method, m, seed) cell and write reports and a summary.
    Run(GridArgs),
    /// Like `run`, but keep cells whose report already exists.
    Resume(GridArgs),
    /// Rebuild summary.csv and summary.txt from existing reports.
    Summarize {
        /// Output directory holding `reports/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run gradient checks and equation oracles.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fewer random instances per check.
        #[arg(long)]
        quick: bool,
    },
    /// Write a synthetic feature dataset.
    GenSynth {
        /// Destination; `.csv` writes CSV, anything else the binary format.
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 4.0)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert feature files between CSV and the binary format.
    ConvertFeatures {
        input: PathBuf,
        output: PathBuf,
        /// Frequency bands per CSV row.
        #[arg(long, default_value_t = 5)]
        bands: usize,
        /// Class count for CSV input; inferred from the labels by default.
        #[arg(long)]
        num_classes: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct GridArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synth` or a feature file path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap on optimizer steps per epoch.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Confidence threshold for FixMatch and AdaMatch.
    #[arg(long)]
    tau: Option<f64>,
    /// Maximum number of cells trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides the SEMIMATCH_OUT environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set ssl.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

fn list(values: &[impl ToString]) -> toml::Value {
    toml::Value::Array(
        values
            .iter()
            .map(|v| toml::Value::String(v.to_string()))
            .collect(),
    )
}

fn ints(values: &[impl Copy + Into<u64>]) -> toml::Value {
    toml::Value::Array(
        values
            .iter()
            .map(|v| toml::Value::Integer((*v).into() as i64))
            .collect(),
    )
}

impl GridArgs {
    fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Vec::new();
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                o.push(Override::new("output_dir", dir, Source::Env));
            }
        }
        let flag = |k: &str, v: toml::Value| Override::new(k, v, Source::Flag);
        match self.dataset.as_deref() {
            None => {}
            Some("synth") => o.push(flag("dataset.kind", "synth".into())),
            Some(path) => {
                o.push(flag("dataset.kind", "file".into()));
                o.push(flag("dataset.path", path.into()));
            }
        }
        if let Some(p) = self.protocol {
            o.push(flag("dataset.protocol", p.name().into()));
        }
        if !self.method.is_empty() {
            o.push(flag("methods", list(&self.method)));
        }
        if !self.m.is_empty() {
            o.push(flag(
                "m_values",
                ints(&self.m.iter().map(|&m| m as u64).collect::<Vec<_>>()),
            ));
        }
        if !self.seeds.is_empty() {
            o.push(flag("seeds", ints(&self.seeds)));
        }
        if let Some(e) = self.epochs {
            o.push(flag("train.epochs", (e as i64).into()));
        }
        if let Some(s) = self.max_steps {
            o.push(flag("train.max_steps_per_epoch", (s as i64).into()));
        }
        if let Some(t) = self.tau {
            o.push(flag("ssl.tau", t.into()));
        }
        if let Some(j) = self.jobs {
            o.push(flag("jobs", (j as i64).into()));
        }
        if let Some(dir) = &self.out {
            o.push(flag("output_dir", dir.display().to_string().into()));
        }
        for s in &self.set {
            o.push(Override::parse(s, Source::Flag)?);
        }
        Ok(o)
    }
}

fn resolve(args: &GridArgs, resume: bool) -> Result<ExperimentConfig, CliError> {
    let overrides = args.overrides()?;
    let mut file = args.config.clone();
    if resume && file.is_none() {
        // Reuse the configuration the interrupted run saved, if any.
        let (probe, _) = load_config(None, &overrides)?;
        let saved = probe.output_dir.join(RESOLVED_CONFIG);
        if !probe.output_dir.is_dir() {
            return Err(CliError::Data(format!(
                "output directory {} does not exist; nothing to resume",
                probe.output_dir.display()
            )));
        }
        if saved.is_file() {
            log::info!("resuming with {}", saved.display());
            file = Some(saved);
        }
    }
    let (cfg, _) = load_config(file.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_grid(args: &GridArgs, resume: bool) -> Result<ExitCode, CliError> {
    let cfg = resolve(args, resume)?;
    let ds = cfg.dataset.load()?;
    log::info!(
        "dataset {}: {} samples, {} classes",
        cfg.dataset.describe(),
        ds.len(),
        ds.num_classes
    );
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_atomic(
        &cfg.output_dir.join(RESOLVED_CONFIG),
        cfg.to_toml()?.as_bytes(),
    )?;

    let cells = cfg.cells();
    log::info!("{} cells, {} concurrent", cells.len(), cfg.jobs);
    let started = Instant::now();
    let opts = GridOptions {
        out_dir: cfg.output_dir.clone(),
        jobs: cfg.jobs,
        skip_existing: resume,
    };
    let make = |cell: &semimatch::train::GridCell| cfg.train_config(*cell);
    let outcome = run_grid(
        &cells,
        &make,
        &ds,
        cfg.protocol(),
        &cfg.dataset.describe(),
        &opts,
    )?;
    log::info!(
        "trained {}, kept {}, failed {} in {:.1}s",
        outcome.trained,
        outcome.skipped,
        outcome.failures.len(),
        started.elapsed().as_secs_f64()
    );
    print_summary(&cfg.output_dir)?;
    for f in &outcome.failures {
        eprintln!(
            "failed: {} m={} seed={}: {}",
            f.cell.method, f.cell.m, f.cell.seed, f.error
        );
    }
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn print_summary(out_dir: &Path) -> Result<(), CliError> {
    let s = summarize(out_dir)?;
    for (path, why) in &s.corrupt {
        log::warn!("skipped corrupt report {}: {why}", path.display());
    }
    print!("{}", s.aggregate.to_text_table());
    Ok(())
}

fn cmd_summarize(out: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let dir = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| ExperimentConfig::default().output_dir);
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "output directory {} does not exist",
            dir.display()
        )));
    }
    print_summary(&dir)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(seed: u64, quick: bool) -> ExitCode {
    let (grad_n, oracle_n) = if quick {
        (3, 20)
    } else {
        (selftest::GRAD_INSTANCES, selftest::ORACLE_INSTANCES)
    };
    let mut checks = selftest::gradient_suite(seed, grad_n);
    checks.extend(selftest::oracle_suite(seed, oracle_n));
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn save_any(ds: &FeatureDataset, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if csv {
        save_features_csv(ds, path)?;
    } else {
        save_features(ds, path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run(args) => cmd_grid(&args, false),
        Command::Resume(args) => cmd_grid(&args, true),
        Command::Summarize { out } => cmd_summarize(out),
        Command::Selftest { seed, quick } => Ok(cmd_selftest(seed, quick)),
        Command::GenSynth {
            output,
            k,
            n_per_class,
            sep,
            seed,
        } => {
            let ds = synth_generate(k, n_per_class, sep, seed)?;
            save_any(&ds, &output)?;
            println!("wrote {} samples to {}", ds.len(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ConvertFeatures {
            input,
            output,
            bands,
            num_classes,
        } => {
            let ds = load_any(&input, bands, num_classes)?;
            save_any(&ds, &output)?;
            println!(
                "converted {} samples ({} bands x {} channels, {} classes) to {}",
                ds.len(),
                ds.bands(),
                ds.channels(),
                ds.num_classes,
                output.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
