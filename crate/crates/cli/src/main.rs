use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use affl_core::bench::{self, BenchOptions, SUITES};
use affl_core::config::{load_config, preset, RunConfig, PRESETS};
use affl_core::metrics::{build_report, ReportInputs};
use affl_core::par;
use affl_core::report::{self, CompareRow};
use affl_core::sim;

const OUTPUT_ENV: &str = "AFFL_OUTPUT_DIR";
const THREADS_ENV: &str = "AFFL_THREADS";

#[derive(Parser)]
#[command(name = "affl", version, about = "Adaptive fair federated learning simulator")]
struct Cli {
    /// Worker threads; overrides AFFL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.jsonl, summary and metrics files.
    Run {
        /// TOML run configuration.
        config: Option<PathBuf>,
        /// Start from a named preset instead of a file.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Output directory; overrides AFFL_OUTPUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate two or more finished runs.
    Compare {
        /// Run directories (or their summary.json files).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write differences against the first run.
        #[arg(long)]
        deltas: Option<PathBuf>,
    },
    /// Run a benchmark suite, or `all`.
    Bench {
        suite: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration file and print its digest.
    ValidateConfig {
        config: PathBuf,
        /// Print the configuration with every default filled in.
        #[arg(long)]
        resolved: bool,
    },
    /// Print a preset as TOML.
    Preset { name: String },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got '{v}'"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be a positive integer, got '0'");
            }
            Ok(Some(n))
        }
        _ => Ok(None),
    }
}

fn output_dir(flag: Option<PathBuf>, config: Option<&str>, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn cmd_run(config: Option<PathBuf>, preset_name: Option<String>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg: RunConfig = match (config, preset_name) {
        (Some(path), _) => load_config(&path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => preset(&name)?,
        (None, None) => bail!("give a config file or --preset <name>"),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(out, cfg.output_dir.as_deref(), "affl-out");
    let scn = sim::prepare(&cfg)?;
    if let Some(w) = cfg.privacy.delta_warning(scn.train.iter().map(|s| s.len()).min().unwrap_or(0)) {
        eprintln!("warning: {w}");
    }
    let log = sim::run_scenario(&scn)?;
    report::write_run(&dir, &cfg, &log)?;
    let metrics = build_report(&log, &cfg.metrics, &ReportInputs::default())?;
    report::write_metrics(&dir, log.algorithm.name(), &metrics)?;
    let row = CompareRow::from_log(log.algorithm.name(), &log)?;
    println!(
        "{} seed {}: {} rounds, final accuracy {:.4}, rounds to {} {}, gini {:.4}, output {}",
        log.algorithm.name(),
        log.seed,
        log.records.len(),
        row.final_accuracy,
        log.target_accuracy,
        row.rounds_to_target.map_or("not reached".to_string(), |r| r.to_string()),
        row.gini,
        dir.display()
    );
    Ok(())
}

fn cmd_compare(runs: &[PathBuf], out: Option<PathBuf>, deltas: Option<PathBuf>) -> Result<()> {
    let mut rows = Vec::with_capacity(runs.len());
    for path in runs {
        let log = report::read_run(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .filter(|n| *n != report::SUMMARY_JSON)
            .or_else(|| path.parent().and_then(Path::file_name))
            .map(|n| format!("{}:{}", log.algorithm.name(), n.to_string_lossy()))
            .unwrap_or_else(|| log.algorithm.name().to_string());
        rows.push(CompareRow::from_log(&name, &log)?);
    }
    match out {
        Some(p) => report::write_compare(fs::File::create(&p)?, &rows)?,
        None => report::write_compare(io::stdout().lock(), &rows)?,
    }
    if let Some(p) = deltas {
        report::write_compare_deltas(fs::File::create(&p)?, &rows)?;
    }
    Ok(())
}

fn cmd_bench(suite: &str, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<()> {
    let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        bail!("unknown suite '{bad}', expected one of {} or all", SUITES.join(", "));
    }
    let dir = output_dir(out, None, "affl-bench");
    let opts = BenchOptions { seeds };
    for name in names {
        let result = bench::run_suite(name, &opts)?;
        bench::write_bench(&dir, &result)?;
        let mut line = format!("{name}:");
        for (k, v) in result.scalars.iter().filter(|(k, _)| !k.contains("_seed")) {
            line.push_str(&format!(" {k}={v:.4}"));
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_validate(path: &Path, resolved: bool) -> Result<()> {
    let cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if resolved {
        print!("{}", cfg.to_toml());
    }
    println!("ok {} digest {}", path.display(), cfg.digest());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, preset, out, seed } => cmd_run(config, preset, out, seed),
        Command::Compare { runs, out, deltas } => cmd_compare(&runs, out, deltas),
        Command::Bench { suite, seeds, out } => cmd_bench(&suite, seeds, out),
        Command::ValidateConfig { config, resolved } => cmd_validate(&config, resolved),
        Command::Preset { name } => {
            if !PRESETS.contains(&name.as_str()) {
                bail!("unknown preset '{name}', expected one of {}", PRESETS.join(", "));
            }
            print!("{}", preset(&name)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads(cli.threads).and_then(|t| match t {
        Some(n) => par::with_threads(n, || dispatch(cli)),
        None => dispatch(cli),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = io::stdout().flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
