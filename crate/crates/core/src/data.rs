//! Synthetic witness-rate-controlled MIL bags, balanced pretraining batches,
//! and CSV import/export.
//!
//! Normal patches are Gaussian around the origin; abnormal patches are
//! Gaussian around one of `n_subtypes` centers placed at
//! `cluster_separation · within_std` from it. Each patch additionally has
//! its center shifted by a label-free uniform jitter whose expected length
//! is `center_jitter · cluster_separation · within_std`, so the classes
//! overlap more than the plain Gaussian tails would suggest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, STREAM_GEOMETRY, STREAM_TEST_DATA, STREAM_TRAIN_DATA};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub features: Vec<f64>,
    pub abnormal: bool,
    pub slide_positive: bool,
    /// 0 for normal cells, 1..=n_subtypes for abnormal ones.
    pub subtype: u8,
}

impl Patch {
    fn check(&self) -> std::result::Result<(), String> {
        if !self.slide_positive && self.abnormal {
            return Err("slide-negative patch cannot be abnormal".into());
        }
        if self.abnormal != (self.subtype != 0) {
            return Err(format!(
                "subtype {} inconsistent with instance label {}",
                self.subtype, self.abnormal as u8
            ));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err("non-finite feature".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    patches: Vec<Patch>,
    label: bool,
    witness_count: usize,
}

impl Bag {
    pub fn new(patches: Vec<Patch>, label: bool) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::DegenerateData("empty bag".into()));
        }
        let witness_count = patches.iter().filter(|p| p.abnormal).count();
        if label != (witness_count >= 1) {
            return Err(Error::DegenerateData(format!(
                "bag label {} but {witness_count} key instances",
                label as u8
            )));
        }
        for p in &patches {
            p.check().map_err(Error::DegenerateData)?;
            if p.slide_positive != label {
                return Err(Error::DegenerateData(
                    "patch slide label differs from its bag label".into(),
                ));
            }
        }
        Ok(Self {
            patches,
            label,
            witness_count,
        })
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn label(&self) -> bool {
        self.label
    }

    pub fn witness_count(&self) -> usize {
        self.witness_count
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn instance_labels(&self) -> Vec<bool> {
        self.patches.iter().map(|p| p.abnormal).collect()
    }

    pub fn feature_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.patches.iter().map(|p| p.features.as_slice()).collect();
        Matrix::from_rows(&rows).expect("bag patches share a dimension")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dim: usize,
    pub n_subtypes: usize,
    pub cluster_separation: f64,
    pub within_std: f64,
    pub center_jitter: f64,
    pub bag_size: usize,
    pub n_train_bags: usize,
    pub n_test_bags: usize,
    pub witness_rate: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_subtypes: 7,
            cluster_separation: 3.0,
            within_std: 1.0,
            center_jitter: 0.2,
            bag_size: 100,
            n_train_bags: 18,
            n_test_bags: 6,
            witness_rate: 0.1,
            seed: 0,
        }
    }
}

/// Smallest bag that still holds one key instance at `witness_rate`.
pub fn bag_size_for_rate(base: usize, witness_rate: f64) -> usize {
    base.max((1.0 / witness_rate - 1e-9).ceil() as usize)
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dataset.dim", "must be positive"));
        }
        if self.n_subtypes == 0 || self.n_subtypes > u8::MAX as usize {
            return Err(Error::config("dataset.n_subtypes", "must lie in 1..=255"));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(Error::config(
                "witness_rate",
                format!("must lie in (0, 1], got {}", self.witness_rate),
            ));
        }
        if self.witness_rate * (self.bag_size as f64) < 1.0 - 1e-9 {
            return Err(Error::config(
                "witness_rate",
                format!(
                    "{} × bag size {} leaves positive bags without key instances",
                    self.witness_rate, self.bag_size
                ),
            ));
        }
        for (field, n) in [
            ("dataset.n_train_bags", self.n_train_bags),
            ("dataset.n_test_bags", self.n_test_bags),
        ] {
            if n < 2 || n % 2 != 0 {
                return Err(Error::config(field, "must be a positive even number"));
            }
        }
        for (field, v) in [
            ("dataset.cluster_separation", self.cluster_separation),
            ("dataset.center_jitter", self.center_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return Err(Error::config("dataset.within_std", "must be > 0"));
        }
        Ok(())
    }

    /// Key instances per positive bag: `round(witness_rate · N)`, at least 1.
    pub fn witness_count(&self) -> usize {
        ((self.witness_rate * self.bag_size as f64).round() as usize)
            .clamp(1, self.bag_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    /// All training patches, in bag order.
    pub fn patch_pool(&self) -> Vec<&Patch> {
        self.train.iter().flat_map(|b| b.patches()).collect()
    }
}

struct Geometry {
    subtype_centers: Vec<Vec<f64>>,
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let geometry = make_geometry(config);
    let train = make_bags(
        config,
        &geometry,
        config.n_train_bags,
        &mut stream_rng(config.seed, STREAM_TRAIN_DATA),
    )?;
    let test = make_bags(
        config,
        &geometry,
        config.n_test_bags,
        &mut stream_rng(config.seed, STREAM_TEST_DATA),
    )?;
    Ok(Dataset { train, test })
}

fn make_geometry(config: &DatasetConfig) -> Geometry {
    let mut rng = stream_rng(config.seed, STREAM_GEOMETRY);
    let radius = config.cluster_separation * config.within_std;
    let subtype_centers = (0..config.n_subtypes)
        .map(|_| {
            let dir: Vec<f64> = (0..config.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = crate::matrix::norm(&dir);
            dir.iter().map(|v| v / n * radius).collect()
        })
        .collect();
    Geometry { subtype_centers }
}

fn sample_patch<R: Rng>(
    config: &DatasetConfig,
    geometry: &Geometry,
    subtype: u8,
    slide_positive: bool,
    rng: &mut R,
) -> Patch {
    let d = config.dim;
    // per-coordinate U(-a, a) has E‖offset‖² = d·a²/3
    let a = config.center_jitter * config.cluster_separation * config.within_std * 3f64.sqrt()
        / (d as f64).sqrt();
    let noise = Normal::new(0.0, config.within_std).expect("validated std");
    let features = (0..d)
        .map(|i| {
            let center = match subtype {
                0 => 0.0,
                s => geometry.subtype_centers[s as usize - 1][i],
            };
            let jitter = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
            center + jitter + noise.sample(rng)
        })
        .collect();
    Patch {
        features,
        abnormal: subtype != 0,
        slide_positive,
        subtype,
    }
}

fn make_bags<R: Rng>(
    config: &DatasetConfig,
    geometry: &Geometry,
    n_bags: usize,
    rng: &mut R,
) -> Result<Vec<Bag>> {
    let n = config.bag_size;
    let witnesses = config.witness_count();
    let mut bags = Vec::with_capacity(n_bags);
    for b in 0..n_bags {
        let positive = b < n_bags / 2;
        let mut patches = Vec::with_capacity(n);
        if positive {
            for _ in 0..witnesses {
                let subtype = rng.random_range(1..=config.n_subtypes) as u8;
                patches.push(sample_patch(config, geometry, subtype, true, rng));
            }
        }
        while patches.len() < n {
            patches.push(sample_patch(config, geometry, 0, positive, rng));
        }
        patches.shuffle(rng);
        bags.push(Bag::new(patches, positive)?);
    }
    Ok(bags)
}

/// Location of one patch inside a bag list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub bag: usize,
    pub index: usize,
}

impl PatchRef {
    pub fn resolve<'a>(&self, bags: &'a [Bag]) -> &'a Patch {
        &bags[self.bag].patches()[self.index]
    }
}

/// A balanced batch: half slide-positive, half slide-negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub positive: Vec<PatchRef>,
    pub negative: Vec<PatchRef>,
}

/// Patch pools split by slide label.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    positive: Vec<PatchRef>,
    negative: Vec<PatchRef>,
}

impl BalancedSampler {
    pub fn new(bags: &[Bag]) -> Result<Self> {
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for (b, bag) in bags.iter().enumerate() {
            let pool = if bag.label() {
                &mut positive
            } else {
                &mut negative
            };
            pool.extend((0..bag.len()).map(|index| PatchRef { bag: b, index }));
        }
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::DegenerateData(
                "balanced sampling needs both slide classes".into(),
            ));
        }
        Ok(Self { positive, negative })
    }

    fn half(batch_size: usize) -> Result<usize> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::config(
                "batch_size",
                format!("must be a positive even number, got {batch_size}"),
            ));
        }
        Ok(batch_size / 2)
    }

    /// Full batches per epoch under the truncated-permutation scheme.
    pub fn steps_per_epoch(&self, batch_size: usize) -> Result<usize> {
        let half = Self::half(batch_size)?;
        let steps = self.positive.len().min(self.negative.len()) / half;
        if steps == 0 {
            return Err(Error::DegenerateData(format!(
                "batch size {batch_size} exceeds the smaller slide pool"
            )));
        }
        Ok(steps)
    }

    /// One batch drawn uniformly with replacement from each slide pool.
    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<SampledBatch> {
        let half = Self::half(batch_size)?;
        let draw = |pool: &[PatchRef], rng: &mut R| -> Vec<PatchRef> {
            (0..half)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        };
        let positive = draw(&self.positive, rng);
        let negative = draw(&self.negative, rng);
        Ok(SampledBatch { positive, negative })
    }

    /// One epoch: each pool is shuffled, truncated to the shorter pool's
    /// length and cut into full balanced batches.
    pub fn epoch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<SampledBatch>> {
        let half = Self::half(batch_size)?;
        let steps = self.steps_per_epoch(batch_size)?;
        let mut pos = self.positive.clone();
        let mut neg = self.negative.clone();
        pos.shuffle(rng);
        neg.shuffle(rng);
        Ok((0..steps)
            .map(|s| SampledBatch {
                positive: pos[s * half..(s + 1) * half].to_vec(),
                negative: neg[s * half..(s + 1) * half].to_vec(),
            })
            .collect())
    }
}

/// Free-function form of [`BalancedSampler::sample_batch`].
pub fn sample_pretrain_batch<R: Rng>(
    bags: &[Bag],
    batch_size: usize,
    rng: &mut R,
) -> Result<SampledBatch> {
    BalancedSampler::new(bags)?.sample_batch(batch_size, rng)
}

/// One CSV row: a patch with the bag it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub bag_id: usize,
    pub patch: Patch,
}

/// Reads `bag_id,slide_label,instance_label,subtype,f0..f{d-1}` rows.
pub fn load_csv_dataset(path: &Path) -> Result<Vec<PoolRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let row_err = |row: usize, message: String| Error::CsvRow {
        path: path.to_path_buf(),
        row,
        message,
    };
    let headers = reader.headers()?.clone();
    let is_empty = headers.is_empty() || (headers.len() == 1 && &headers[0] == "");
    if is_empty {
        return Ok(Vec::new());
    }
    const FIXED: [&str; 4] = ["bag_id", "slide_label", "instance_label", "subtype"];
    for (i, name) in FIXED.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(row_err(0, format!("header column {i} must be `{name}`")));
        }
    }
    let dim = headers.len() - FIXED.len();
    for (i, h) in headers.iter().skip(FIXED.len()).enumerate() {
        if h != format!("f{i}") {
            return Err(row_err(0, format!("expected feature column `f{i}`, found `{h}`")));
        }
    }
    if dim == 0 {
        return Err(row_err(0, "no feature columns".into()));
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(row_err(
                row,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let int = |c: usize| -> Result<u64> {
            record[c]
                .trim()
                .parse::<u64>()
                .map_err(|e| row_err(row, format!("{}: {e}", FIXED[c])))
        };
        let bag_id = int(0)? as usize;
        let slide = int(1)?;
        let instance = int(2)?;
        let subtype = int(3)?;
        if slide > 1 || instance > 1 {
            return Err(row_err(row, "labels must be 0 or 1".into()));
        }
        let subtype = u8::try_from(subtype).map_err(|_| row_err(row, "subtype exceeds 255".into()))?;
        let features = (0..dim)
            .map(|j| {
                record[FIXED.len() + j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| row_err(row, format!("f{j}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let patch = Patch {
            features,
            abnormal: instance == 1,
            slide_positive: slide == 1,
            subtype,
        };
        patch.check().map_err(|m| row_err(row, m))?;
        out.push(PoolRecord { bag_id, patch });
    }
    Ok(out)
}

/// Groups pool records into bags ordered by ascending `bag_id`.
pub fn assemble_bags(records: Vec<PoolRecord>) -> Result<Vec<(usize, Bag)>> {
    if records.is_empty() {
        return Err(Error::DegenerateData("patch pool is empty".into()));
    }
    let mut grouped: BTreeMap<usize, Vec<Patch>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.bag_id).or_default().push(r.patch);
    }
    grouped
        .into_iter()
        .map(|(id, patches)| {
            let label = patches[0].slide_positive;
            Bag::new(patches, label)
                .map(|b| (id, b))
                .map_err(|e| Error::DegenerateData(format!("bag {id}: {e}")))
        })
        .collect()
}

/// Writes bags with sequential ids, features with 17 significant digits.
pub fn write_csv_dataset<W: Write>(w: W, bags: &[Bag]) -> Result<()> {
    let dim = bags
        .first()
        .and_then(|b| b.patches().first())
        .map_or(0, |p| p.features.len());
    let mut writer = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["bag_id", "slide_label", "instance_label", "subtype"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    for (id, bag) in bags.iter().enumerate() {
        for p in bag.patches() {
            let mut row = vec![
                id.to_string(),
                (p.slide_positive as u8).to_string(),
                (p.abnormal as u8).to_string(),
                p.subtype.to_string(),
            ];
            row.extend(p.features.iter().map(|v| format!("{v:.16e}")));
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Splits assembled bags: ids below `n_train` train, the rest test.
pub fn split_bags(bags: Vec<(usize, Bag)>, n_train: usize) -> Result<Dataset> {
    let (train, test): (Vec<_>, Vec<_>) = bags.into_iter().partition(|(id, _)| *id < n_train);
    let train: Vec<Bag> = train.into_iter().map(|(_, b)| b).collect();
    let test: Vec<Bag> = test.into_iter().map(|(_, b)| b).collect();
    for (name, set) in [("train", &train), ("test", &test)] {
        if !set.iter().any(Bag::label) || set.iter().all(Bag::label) {
            return Err(Error::DegenerateData(format!(
                "{name} split needs both positive and negative bags"
            )));
        }
    }
    Ok(Dataset { train, test })
}
