use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use slam_ags::exec::Execution;
use slam_ags::experiment::{
    load_dataset, pretrain_cell, read_results, run_sweep, train_mil_cell, write_datasets,
    write_results, CellKey, ExperimentConfig, RESULTS_FILE,
};
use slam_ags::pretrain::Method;
use slam_ags::report::write_report;

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "slam-ags", version, about = "Contrastive MIL pretraining benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML experiment config; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seeds
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Comma-separated methods
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,

    /// Comma-separated witness rates
    #[arg(long, global = true, value_delimiter = ',')]
    witness_rates: Option<Vec<f64>>,

    /// Worker threads for sweeps (0 = all cores, 1 = sequential)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one dataset CSV per witness rate plus a manifest
    Generate,
    /// Pretrain encoders for every selected cell
    Pretrain,
    /// Train and evaluate MIL aggregators on pretrained encoders
    TrainMil,
    /// Run the full grid: pretrain, MIL training, evaluation
    Sweep,
    /// Aggregate a results CSV and draw the charts
    Report {
        /// Results CSV (defaults to <out>/results.csv)
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Partial(usize),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if matches!(e.downcast_ref(), Some(slam_ags::Error::Config { .. })) {
            Failure::Config(e)
        } else {
            Failure::Other(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Partial(n)) => {
            eprintln!("{n} cell(s) failed; see failures.csv");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            ExperimentConfig::from_toml_str(&text)
                .with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seeds) = &cli.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(methods) = &cli.methods {
        config.methods = methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<_, _>>()
            .map_err(anyhow::Error::from)?;
    }
    if let Some(rates) = &cli.witness_rates {
        config.witness_rates = rates.clone();
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    config.validate().map_err(anyhow::Error::from)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    if cli.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Failure::Config(anyhow::anyhow!(
            "no subcommand given (try --help)"
        )));
    };
    match command {
        Command::Generate => generate(&config).map_err(Failure::from),
        Command::Pretrain => for_each_cell(&config, |ds, key, dir| {
            let log = pretrain_cell(&config, ds, key, dir)?;
            println!(
                "{}: {} steps, {} conflicted",
                key.dir_name(),
                log.records.len(),
                log.conflicted_steps()
            );
            Ok(())
        })
        .map_err(Failure::from),
        Command::TrainMil => {
            let mut records = Vec::new();
            for_each_cell(&config, |ds, key, dir| {
                let r = train_mil_cell(&config, ds, key, dir)?;
                println!("{}: f1 {:.4} recall@{} {:.4}", key.dir_name(), r.f1, r.k, r.recall_at_k);
                records.push(r);
                Ok(())
            })?;
            std::fs::create_dir_all(&config.out_dir).map_err(anyhow::Error::from)?;
            let path = config.out_dir.join(RESULTS_FILE);
            write_results(
                std::fs::File::create(&path).map_err(anyhow::Error::from)?,
                &records,
            )
            .map_err(anyhow::Error::from)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Sweep => sweep(&config),
        Command::Report { results } => {
            let path = results
                .clone()
                .unwrap_or_else(|| config.out_dir.join(RESULTS_FILE));
            report(&path, cli.out.as_deref()).map_err(Failure::from)
        }
    }
}

fn generate(config: &ExperimentConfig) -> anyhow::Result<()> {
    let dir = config.out_dir.join("data");
    let manifest = write_datasets(config, &dir)?;
    for f in &manifest.files {
        println!("{}", dir.join(&f.path).display());
    }
    println!("config hash {}", manifest.config_hash);
    Ok(())
}

fn for_each_cell(
    config: &ExperimentConfig,
    mut f: impl FnMut(&slam_ags::data::Dataset, CellKey, &Path) -> slam_ags::Result<()>,
) -> anyhow::Result<()> {
    let runs = config.out_dir.join("runs");
    for &wr in &config.witness_rates {
        let dataset = load_dataset(config, wr)?;
        for key in config.cells().into_iter().filter(|k| k.witness_rate == wr) {
            f(&dataset, key, &runs.join(key.dir_name()))
                .with_context(|| format!("cell {}", key.dir_name()))?;
        }
    }
    Ok(())
}

fn sweep(config: &ExperimentConfig) -> Result<(), Failure> {
    let summary = run_sweep(config, Execution::from_jobs(config.jobs)).map_err(anyhow::Error::from)?;
    println!(
        "{} cells run, {} already complete, {} failed -> {}",
        summary.newly_run,
        summary.skipped,
        summary.failures.len(),
        summary.results_path.display()
    );
    for f in &summary.failures {
        eprintln!("failed {}: {}", f.key.dir_name(), f.cause);
    }
    if summary.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(summary.failures.len()))
    }
}

fn report(results: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let records = read_results(results)?;
    if records.is_empty() {
        bail!("{} has no rows", results.display());
    }
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    let (rows, files) = write_report(&records, &dir)?;
    for r in &rows {
        println!(
            "{:<20} wr {:<6} f1 {:.3} ± {:.3}  recall@{} {:.3} ± {:.3}  (n={})",
            r.method.name(),
            r.witness_rate,
            r.f1_mean,
            r.f1_std,
            r.k,
            r.recall_mean,
            r.recall_std,
            r.n_seeds
        );
    }
    for p in [&files.aggregate_csv, &files.f1_chart, &files.recall_chart] {
        println!("wrote {}", p.display());
    }
    Ok(())
}
