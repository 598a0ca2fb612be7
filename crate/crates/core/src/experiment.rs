//! Experiment configuration, dataset materialization, and the
//! (method × witness rate × seed) sweep.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    assemble_bags, bag_size_for_rate, generate_dataset, load_csv_dataset, split_bags,
    write_csv_dataset, Bag, Dataset, DatasetConfig,
};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{default_k, f1_score, mean_std, recall_at_k, MetricsRecord};
use crate::exec::Execution;
use crate::mil::{instance_features, mil_forward, rank_instances, train_mil, AggregatorParams, MilConfig};
use crate::pretrain::{pretrain, Method, PretrainConfig, PretrainRunLog};

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RESULTS_HEADER: &str = "method,witness_rate,seed,f1,recall_at_k,k";

/// The default configuration, as shipped in `configs/default.toml`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub witness_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Read datasets from CSV files here instead of generating them.
    pub data_dir: Option<PathBuf>,
    /// Worker threads for the sweep; 0 uses every core.
    pub jobs: usize,
    pub save_checkpoints: bool,
    /// Base dataset; `witness_rate` is replaced by each entry of
    /// `witness_rates` and the bag size grown to fit one key instance.
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub mil: MilConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            witness_rates: vec![0.1, 0.05, 0.01, 0.005],
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            jobs: 0,
            save_checkpoints: true,
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            mil: MilConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must not be empty"));
        }
        if self.witness_rates.is_empty() {
            return Err(Error::config("witness_rates", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::config("methods", "contains duplicates"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "contains duplicates"));
        }
        let rates: BTreeSet<u64> = self.witness_rates.iter().map(|w| w.to_bits()).collect();
        if rates.len() != self.witness_rates.len() {
            return Err(Error::config("witness_rates", "contains duplicates"));
        }
        for &wr in &self.witness_rates {
            self.dataset_for(wr).validate()?;
        }
        self.pretrain.validate()?;
        self.mil.validate()?;
        if self.pretrain.encoder.input_dim != self.dataset.dim {
            return Err(Error::config(
                "pretrain.encoder.input_dim",
                format!("must equal dataset.dim ({})", self.dataset.dim),
            ));
        }
        Ok(())
    }

    /// Dataset configuration used for one witness rate.
    pub fn dataset_for(&self, witness_rate: f64) -> DatasetConfig {
        DatasetConfig {
            witness_rate,
            bag_size: bag_size_for_rate(self.dataset.bag_size, witness_rate),
            ..self.dataset.clone()
        }
    }

    /// SHA-256 over every field that affects results. Worker count, output
    /// location, checkpoint saving and the overridden base witness rate are
    /// excluded.
    pub fn config_hash(&self) -> String {
        let defaults = ExperimentConfig::default();
        let canonical = ExperimentConfig {
            out_dir: defaults.out_dir,
            jobs: defaults.jobs,
            save_checkpoints: defaults.save_checkpoints,
            dataset: DatasetConfig {
                witness_rate: defaults.dataset.witness_rate,
                ..self.dataset.clone()
            },
            ..self.clone()
        };
        hex(&Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            for &witness_rate in &self.witness_rates {
                for &seed in &self.seeds {
                    cells.push(CellKey {
                        method,
                        witness_rate,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_file_name(witness_rate: f64) -> String {
    format!("dataset_wr{witness_rate}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_train_bags: usize,
    pub files: Vec<DataFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub witness_rate: f64,
    pub bag_size: usize,
    pub path: String,
}

/// Writes one CSV per witness rate (training bags first) plus a manifest.
pub fn write_datasets(config: &ExperimentConfig, dir: &Path) -> Result<DataManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for &wr in &config.witness_rates {
        let ds_config = config.dataset_for(wr);
        let ds = generate_dataset(&ds_config)?;
        let name = dataset_file_name(wr);
        let bags: Vec<Bag> = ds.train.into_iter().chain(ds.test).collect();
        write_csv_dataset(BufWriter::new(File::create(dir.join(&name))?), &bags)?;
        files.push(DataFile {
            witness_rate: wr,
            bag_size: ds_config.bag_size,
            path: name,
        });
    }
    let manifest = DataManifest {
        config_hash: config.config_hash(),
        seed: config.dataset.seed,
        n_train_bags: config.dataset.n_train_bags,
        files,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// Dataset for one witness rate: read from `data_dir` when set, else generated.
pub fn load_dataset(config: &ExperimentConfig, witness_rate: f64) -> Result<Dataset> {
    match &config.data_dir {
        Some(dir) => {
            let records = load_csv_dataset(&dir.join(dataset_file_name(witness_rate)))?;
            split_bags(assemble_bags(records)?, config.dataset.n_train_bags)
        }
        None => generate_dataset(&config.dataset_for(witness_rate)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub method: Method,
    pub witness_rate: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}_wr{}_seed{}", self.method, self.witness_rate, self.seed)
    }

    fn matches(&self, r: &MetricsRecord) -> bool {
        self.method == r.method
            && self.witness_rate.to_bits() == r.witness_rate.to_bits()
            && self.seed == r.seed
    }
}

/// Bag-level F1 and mean Recall@K over positive bags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestMetrics {
    pub f1: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

pub fn evaluate_test_bags(
    encoder: &EncoderParams,
    aggregator: &AggregatorParams,
    bags: &[Bag],
    config: &MilConfig,
) -> Result<TestMetrics> {
    let mut predictions = Vec::with_capacity(bags.len());
    let mut recalls = Vec::new();
    let k = bags.first().map_or(0, |b| default_k(b.len()));
    for bag in bags {
        let prediction = mil_forward(aggregator, &instance_features(encoder, bag, config)?)?;
        predictions.push(prediction.predicted_label);
        if bag.label() {
            let ranking = rank_instances(&prediction);
            recalls.push(recall_at_k(&ranking, &bag.instance_labels(), default_k(bag.len()))?);
        }
    }
    let labels: Vec<bool> = bags.iter().map(Bag::label).collect();
    Ok(TestMetrics {
        f1: f1_score(&predictions, &labels)?,
        recall_at_k: mean_std(&recalls)?.0,
        k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub record: MetricsRecord,
    pub log: PretrainRunLog,
}

/// Pretraining, MIL training and test evaluation for one cell. Writes the
/// run log (and checkpoints when enabled) into `cell_dir` if given.
pub fn run_cell(
    config: &ExperimentConfig,
    dataset: &Dataset,
    key: CellKey,
    cell_dir: Option<&Path>,
) -> Result<CellOutcome> {
    let (encoder, mut log) = pretrain(key.method, &dataset.train, &config.pretrain, key.seed)?;
    let aggregator = train_mil(&dataset.train, &encoder, &config.mil, key.seed)?;
    let metrics = evaluate_test_bags(&encoder, &aggregator, &dataset.test, &config.mil)?;
    if let Some(dir) = cell_dir {
        fs::create_dir_all(dir)?;
        log.write_csv(BufWriter::new(File::create(dir.join("pretrain_log.csv"))?))?;
        if config.save_checkpoints {
            let path = dir.join("encoder.bin");
            encoder.save(&path)?;
            aggregator.save(&dir.join("aggregator.bin"))?;
            log.checkpoint = Some(path);
        }
    }
    Ok(CellOutcome {
        record: MetricsRecord {
            method: key.method,
            witness_rate: key.witness_rate,
            seed: key.seed,
            f1: metrics.f1,
            recall_at_k: metrics.recall_at_k,
            k: metrics.k,
        },
        log,
    })
}

/// Pretrains one cell and saves `encoder.bin` and the run log in `dir`.
pub fn pretrain_cell(
    config: &ExperimentConfig,
    dataset: &Dataset,
    key: CellKey,
    dir: &Path,
) -> Result<PretrainRunLog> {
    let (encoder, mut log) = pretrain(key.method, &dataset.train, &config.pretrain, key.seed)?;
    fs::create_dir_all(dir)?;
    let path = dir.join("encoder.bin");
    encoder.save(&path)?;
    log.checkpoint = Some(path);
    log.write_csv(BufWriter::new(File::create(dir.join("pretrain_log.csv"))?))?;
    Ok(log)
}

/// Trains and evaluates the aggregator on the encoder saved in `dir`.
pub fn train_mil_cell(
    config: &ExperimentConfig,
    dataset: &Dataset,
    key: CellKey,
    dir: &Path,
) -> Result<MetricsRecord> {
    let encoder = EncoderParams::load(&dir.join("encoder.bin"))?;
    let aggregator = train_mil(&dataset.train, &encoder, &config.mil, key.seed)?;
    aggregator.save(&dir.join("aggregator.bin"))?;
    let m = evaluate_test_bags(&encoder, &aggregator, &dataset.test, &config.mil)?;
    Ok(MetricsRecord {
        method: key.method,
        witness_rate: key.witness_rate,
        seed: key.seed,
        f1: m.f1,
        recall_at_k: m.recall_at_k,
        k: m.k,
    })
}

pub fn format_result_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.method, r.witness_rate, r.seed, r.f1, r.recall_at_k, r.k
    )
}

pub fn write_results<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", format_result_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::CsvRow {
            path: path.to_path_buf(),
            row: 0,
            message: format!("expected header `{RESULTS_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let err = |message: String| Error::CsvRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", rec.len())));
        }
        let float = |c: usize| rec[c].parse::<f64>().map_err(|e| err(format!("column {c}: {e}")));
        let int = |c: usize| rec[c].parse::<u64>().map_err(|e| err(format!("column {c}: {e}")));
        let record = MetricsRecord {
            method: rec[0].parse().map_err(|e: Error| err(e.to_string()))?,
            witness_rate: float(1)?,
            seed: int(2)?,
            f1: float(3)?,
            recall_at_k: float(4)?,
            k: int(5)? as usize,
        };
        for v in [record.f1, record.recall_at_k] {
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("metric {v} outside [0, 1]")));
            }
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepManifest {
    config_hash: String,
    cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub key: CellKey,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    /// Every completed cell, previously and newly run, in grid order.
    pub records: Vec<MetricsRecord>,
    pub newly_run: usize,
    pub skipped: usize,
    pub failures: Vec<CellFailure>,
    pub results_path: PathBuf,
}

/// Runs every grid cell not already present in `out_dir/results.csv`.
///
/// Completed rows are appended as cells finish, so an interrupted sweep
/// resumes where it stopped. A failing cell is recorded in `failures.csv`
/// and does not stop the others.
pub fn run_sweep(config: &ExperimentConfig, execution: Execution) -> Result<SweepSummary> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let hash = config.config_hash();
    let manifest_path = out.join(MANIFEST_FILE);
    let results_path = out.join(RESULTS_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let previous: SweepManifest = toml::from_str(&text)
            .map_err(|e| Error::config("manifest", e.message().to_string()))?;
        if previous.config_hash != hash {
            return Err(Error::config(
                "out_dir",
                format!(
                    "{} holds results of a different configuration ({} != {hash})",
                    out.display(),
                    previous.config_hash
                ),
            ));
        }
    }
    let existing = if results_path.exists() {
        read_results(&results_path)?
    } else {
        Vec::new()
    };
    let grid = config.cells();
    fs::write(
        &manifest_path,
        toml::to_string(&SweepManifest {
            config_hash: hash,
            cells: grid.len(),
        })
        .expect("manifest serializes"),
    )?;

    let pending: Vec<CellKey> = grid
        .iter()
        .copied()
        .filter(|k| !existing.iter().any(|r| k.matches(r)))
        .collect();
    let skipped = grid.len() - pending.len();

    let mut rates: Vec<f64> = Vec::new();
    for k in &pending {
        if !rates.iter().any(|r| r.to_bits() == k.witness_rate.to_bits()) {
            rates.push(k.witness_rate);
        }
    }
    let datasets: Vec<(f64, std::result::Result<Dataset, String>)> = rates
        .into_iter()
        .map(|wr| (wr, load_dataset(config, wr).map_err(|e| e.to_string())))
        .collect();

    let fresh = !results_path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(&results_path)?;
    if fresh {
        writeln!(file, "{RESULTS_HEADER}")?;
        file.flush()?;
    }
    let writer = Mutex::new(file);
    let runs_dir = out.join("runs");

    let outcomes = execution.map(&pending, |key| {
        let dataset = datasets
            .iter()
            .find(|(wr, _)| wr.to_bits() == key.witness_rate.to_bits())
            .map(|(_, d)| d)
            .expect("dataset loaded for every pending rate");
        let result = match dataset {
            Ok(ds) => {
                run_cell(config, ds, *key, Some(&runs_dir.join(key.dir_name()))).map_err(|e| e.to_string())
            }
            Err(cause) => Err(format!("dataset: {cause}")),
        };
        match result {
            Ok(outcome) => {
                let mut f = writer.lock().unwrap_or_else(|p| p.into_inner());
                writeln!(f, "{}", format_result_row(&outcome.record))
                    .and_then(|_| f.flush())
                    .map(|_| outcome.record)
                    .map_err(|e| CellFailure {
                        key: *key,
                        cause: e.to_string(),
                    })
            }
            Err(cause) => Err(CellFailure { key: *key, cause }),
        }
    });
    drop(writer);

    let mut records = existing;
    let mut failures = Vec::new();
    let mut newly_run = 0;
    for o in outcomes {
        match o {
            Ok(r) => {
                newly_run += 1;
                records.push(r);
            }
            Err(f) => failures.push(f),
        }
    }
    let position = |r: &MetricsRecord| grid.iter().position(|k| k.matches(r)).unwrap_or(usize::MAX);
    records.sort_by_key(position);

    // rewrite in grid order once everything has finished
    let tmp = out.join(format!("{RESULTS_FILE}.tmp"));
    write_results(BufWriter::new(File::create(&tmp)?), &records)?;
    fs::rename(&tmp, &results_path)?;
    write_failures(&out.join(FAILURES_FILE), &failures)?;

    Ok(SweepSummary {
        records,
        newly_run,
        skipped,
        failures,
        results_path,
    })
}

fn write_failures(path: &Path, failures: &[CellFailure]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "witness_rate", "seed", "error"])?;
    for f in failures {
        w.write_record([
            f.key.method.to_string(),
            f.key.witness_rate.to_string(),
            f.key.seed.to_string(),
            f.cause.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
