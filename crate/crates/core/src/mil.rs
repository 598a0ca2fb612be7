//! Gated-attention MIL aggregator over frozen instance features.
//!
//! For a bag `H` (N × F):
//!
//! ```text
//! s = (tanh(H V + b_v) ⊙ sigmoid(H U + b_u)) w      (N × 1)
//! a = softmax(s) over instances
//! logits = (aᵀ H) W_c + b_c                          (1 × 2)
//! ```
//!
//! The attention vector doubles as the positive-class instance ranking.
//! Features are optionally centered and scaled with statistics fitted on the
//! training instances; the fitted scaler travels with the aggregator.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{self, Container, ModelKind};
use crate::data::Bag;
use crate::encoder::{backbone_features, embed, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_loss;
use crate::matrix::Matrix;
use crate::optim::{apply_update, lr_at, OptimizerConfig, OptimizerState, ScheduleConfig};
use crate::params::{xavier_matrix, ParamSet};
use crate::rng::{stream_rng, STREAM_MIL_INIT, STREAM_MIL_TRAIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub attn_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Feed projection-head embeddings instead of backbone features.
    pub use_projection: bool,
    pub feature_scaling: FeatureScaling,
}

/// Input normalization fitted on the training instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    None,
    /// Center each dimension, divide all by one pooled standard deviation.
    Pooled,
    /// Center and divide each dimension by its own standard deviation.
    PerDimension,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            attn_dim: 32,
            epochs: 50,
            lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            use_projection: false,
            feature_scaling: FeatureScaling::Pooled,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_dim == 0 {
            return Err(Error::config("mil.attn_dim", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("mil.lr", "must be > 0"));
        }
        Ok(())
    }
}

const NAMES: [&str; 7] = ["attn.v", "attn.bv", "attn.u", "attn.bu", "attn.w", "cls.w", "cls.b"];

fn expected_shapes(feat_dim: usize, attn_dim: usize) -> [(usize, usize); 7] {
    [
        (feat_dim, attn_dim),
        (1, attn_dim),
        (feat_dim, attn_dim),
        (1, attn_dim),
        (attn_dim, 1),
        (feat_dim, 2),
        (1, 2),
    ]
}

/// Per-dimension affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Matrix,
    std: Matrix,
}

/// Dimensions flatter than this are only centered.
const MIN_STD: f64 = 1e-12;

impl FeatureScaler {
    /// Fits means and population standard deviations over every row of every
    /// bag. `None` scaling is rejected; skip the scaler instead.
    pub fn fit<'a>(bags: impl IntoIterator<Item = &'a Matrix>, mode: FeatureScaling) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for h in bags {
            if sum.is_empty() {
                sum = vec![0.0; h.cols()];
                sum_sq = vec![0.0; h.cols()];
            } else if h.cols() != sum.len() {
                return Err(Error::ShapeMismatch {
                    op: "feature scaler",
                    left: (1, sum.len()),
                    right: h.shape(),
                });
            }
            for r in 0..h.rows() {
                for (j, &x) in h.row(r).iter().enumerate() {
                    sum[j] += x;
                    sum_sq[j] += x * x;
                }
            }
            count += h.rows();
        }
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        let floor = |sd: f64| if sd < MIN_STD { 1.0 } else { sd };
        let std = match mode {
            FeatureScaling::None => {
                return Err(Error::config("mil.feature_scaling", "nothing to fit for `none`"))
            }
            FeatureScaling::Pooled => {
                let pooled = floor((var.iter().sum::<f64>() / var.len() as f64).sqrt());
                vec![pooled; var.len()]
            }
            FeatureScaling::PerDimension => var.iter().map(|v| floor(v.sqrt())).collect(),
        };
        Self::new(
            Matrix::new(1, mean.len(), mean)?,
            Matrix::new(1, sum.len(), std)?,
        )
    }

    pub fn new(mean: Matrix, std: Matrix) -> Result<Self> {
        if mean.rows() != 1 || mean.shape() != std.shape() {
            return Err(Error::ShapeMismatch {
                op: "feature scaler",
                left: mean.shape(),
                right: std.shape(),
            });
        }
        if !mean.data().iter().all(|x| x.is_finite())
            || !std.data().iter().all(|&s| s.is_finite() && s > 0.0)
        {
            return Err(Error::NonFinite { op: "feature scaler" });
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.data()
    }

    pub fn std(&self) -> &[f64] {
        self.std.data()
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.cols() {
            return Err(Error::ShapeMismatch {
                op: "feature scaler",
                left: self.mean.shape(),
                right: features.shape(),
            });
        }
        let (m, s) = (self.mean.data(), self.std.data());
        let data = (0..features.rows())
            .flat_map(|r| {
                features
                    .row(r)
                    .iter()
                    .zip(m.iter().zip(s))
                    .map(|(x, (m, s))| (x - m) / s)
            })
            .collect();
        Matrix::new(features.rows(), features.cols(), data)
    }
}

const FLAG_SCALER: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    params: ParamSet,
    scaler: Option<FeatureScaler>,
}

impl AggregatorParams {
    pub fn init(feat_dim: usize, attn_dim: usize, seed: u64) -> Result<Self> {
        if feat_dim == 0 || attn_dim == 0 {
            return Err(Error::config("mil.attn_dim", "dimensions must be positive"));
        }
        let mut rng = stream_rng(seed, STREAM_MIL_INIT);
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in NAMES.iter().zip(expected_shapes(feat_dim, attn_dim)) {
            let value = if rows == 1 {
                Matrix::zeros(rows, cols)
            } else {
                xavier_matrix(&mut rng, rows, cols)
            };
            params.push(*name, value);
        }
        Ok(Self {
            params,
            scaler: None,
        })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.len() != NAMES.len() {
            return Err(Error::LayoutMismatch {
                expected: NAMES.len(),
                actual: params.len(),
            });
        }
        let (feat, attn) = params.get(0).shape();
        for (t, shape) in params.tensors().iter().zip(expected_shapes(feat, attn)) {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "aggregator params",
                    left: shape,
                    right: t.shape(),
                });
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                op: "aggregator params",
            });
        }
        Ok(Self {
            params,
            scaler: None,
        })
    }

    /// Attaches an input scaler applied before every forward pass.
    pub fn with_scaler(mut self, scaler: FeatureScaler) -> Result<Self> {
        if scaler.mean.cols() != self.feat_dim() {
            return Err(Error::ShapeMismatch {
                op: "feature scaler",
                left: (1, self.feat_dim()),
                right: scaler.mean.shape(),
            });
        }
        self.scaler = Some(scaler);
        Ok(self)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn scaler(&self) -> Option<&FeatureScaler> {
        self.scaler.as_ref()
    }

    /// Raw bag features as the network sees them.
    pub fn prepare<'a>(&self, features: &'a Matrix) -> Result<Cow<'a, Matrix>> {
        match &self.scaler {
            Some(s) => Ok(Cow::Owned(s.apply(features)?)),
            None => Ok(Cow::Borrowed(features)),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.params.get(0).rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.params.get(0).cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundAggregator> {
        Ok(BoundAggregator {
            vars: self.params.bind(tape)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.tensors().to_vec();
        let mut flags = 0;
        if let Some(s) = &self.scaler {
            flags |= FLAG_SCALER;
            tensors.push(s.mean.clone());
            tensors.push(s.std.clone());
        }
        let c = Container {
            kind: ModelKind::Aggregator,
            flags,
            tensors,
        };
        checkpoint::write_container(BufWriter::new(File::create(path)?), &c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read_container(BufReader::new(File::open(path)?))?;
        if c.kind != ModelKind::Aggregator {
            return Err(Error::Checkpoint(format!("expected aggregator, found {:?}", c.kind)));
        }
        let has_scaler = c.flags & FLAG_SCALER != 0;
        let expected = NAMES.len() + if has_scaler { 2 } else { 0 };
        if c.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                c.tensors.len()
            )));
        }
        let mut tensors = c.tensors.into_iter();
        let mut params = ParamSet::new();
        for (name, t) in NAMES.iter().zip(tensors.by_ref()) {
            params.push(*name, t);
        }
        let agg = Self::from_params(params)?;
        match (tensors.next(), tensors.next()) {
            (Some(mean), Some(std)) => agg.with_scaler(FeatureScaler::new(mean, std)?),
            _ => Ok(agg),
        }
    }
}

/// Aggregator parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundAggregator {
    vars: Vec<Tensor>,
}

/// Tape handles for one bag's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BagOutputs {
    /// 1 × 2 bag logits.
    pub logits: Tensor,
    /// 1 × N attention weights.
    pub attention: Tensor,
}

impl BoundAggregator {
    pub fn vars(&self) -> &[Tensor] {
        &self.vars
    }

    pub fn forward(&self, tape: &mut Tape, h: Tensor) -> Result<BagOutputs> {
        if h.rows() == 0 {
            return Err(Error::EmptyReduction);
        }
        let v = &self.vars;
        let a = tape.matmul(h, v[0])?;
        let a = tape.add_row(a, v[1])?;
        let a = tape.tanh(a)?;
        let g = tape.matmul(h, v[2])?;
        let g = tape.add_row(g, v[3])?;
        let g = tape.sigmoid(g)?;
        let gated = tape.mul(a, g)?;
        let scores = tape.matmul(gated, v[4])?;
        let scores = tape.transpose(scores)?;
        let attention = tape.softmax_rows(scores)?;
        let pooled = tape.matmul(attention, h)?;
        let logits = tape.matmul(pooled, v[5])?;
        let logits = tape.add_row(logits, v[6])?;
        Ok(BagOutputs { logits, attention })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub logits: [f64; 2],
    pub attention: Vec<f64>,
    pub predicted_label: bool,
}

/// Bag-level inference; anything that can score a bag of instance features.
pub trait Aggregator {
    fn predict(&self, features: &Matrix) -> Result<BagPrediction>;
}

impl Aggregator for AggregatorParams {
    fn predict(&self, features: &Matrix) -> Result<BagPrediction> {
        mil_forward(self, features)
    }
}

pub fn mil_forward(params: &AggregatorParams, features: &Matrix) -> Result<BagPrediction> {
    let mut tape = Tape::new();
    let agg = params.bind(&mut tape)?;
    let h = tape.constant(params.prepare(features)?.into_owned())?;
    let out = agg.forward(&mut tape, h)?;
    let l = tape.value(out.logits).data();
    let logits = [l[0], l[1]];
    Ok(BagPrediction {
        logits,
        attention: tape.value(out.attention).data().to_vec(),
        predicted_label: logits[1] > logits[0],
    })
}

/// Instance indices by attention, descending; ties keep ascending index.
pub fn rank_instances(prediction: &BagPrediction) -> Vec<usize> {
    let a = &prediction.attention;
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap_or(Ordering::Equal));
    order
}

/// Frozen per-instance features for a bag.
pub fn instance_features(encoder: &EncoderParams, bag: &Bag, config: &MilConfig) -> Result<Matrix> {
    let x = bag.feature_matrix();
    if config.use_projection {
        embed(encoder, &x)
    } else {
        backbone_features(encoder, &x)
    }
}

/// Trains the aggregator on precomputed bag features, one bag per step.
/// Unless `feature_scaling` is `none`, the scaler is fitted on these bags first.
pub fn train_aggregator(
    bags: &[(Matrix, bool)],
    config: &MilConfig,
    seed: u64,
) -> Result<AggregatorParams> {
    config.validate()?;
    let feat_dim = bags
        .first()
        .map(|(h, _)| h.cols())
        .ok_or_else(|| Error::DegenerateData("no training bags".into()))?;
    if !bags.iter().any(|b| b.1) || !bags.iter().any(|b| !b.1) {
        return Err(Error::DegenerateData(
            "MIL training needs at least one bag of each class".into(),
        ));
    }
    let mut params = AggregatorParams::init(feat_dim, config.attn_dim, seed)?;
    if config.feature_scaling != FeatureScaling::None {
        let scaler = FeatureScaler::fit(bags.iter().map(|b| &b.0), config.feature_scaling)?;
        params = params.with_scaler(scaler)?;
    }
    if config.epochs == 0 {
        return Ok(params);
    }
    let schedule = ScheduleConfig {
        base_lr: config.lr,
        warmup_epochs: 0,
        total_epochs: config.epochs,
        steps_per_epoch: bags.len(),
        final_lr: 0.0,
    };
    schedule.validate()?;
    let mut state = OptimizerState::new(config.optimizer.clone(), &params.params);
    let mut rng = stream_rng(seed, STREAM_MIL_TRAIN);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (h, label) = &bags[i];
            let grad = bag_loss_gradient(&params, h, *label).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
            let lr = lr_at(step, &schedule)?;
            let next = apply_update(&params.params, &grad, &mut state, lr)?;
            if !next.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            params.params = next;
            step += 1;
        }
    }
    Ok(params)
}

/// Bag cross-entropy.
pub fn bag_loss(params: &AggregatorParams, features: &Matrix, label: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let agg = params.bind(&mut tape)?;
    let h = tape.constant(params.prepare(features)?.into_owned())?;
    let out = agg.forward(&mut tape, h)?;
    let loss = cross_entropy_loss(&mut tape, out.logits, &[label as usize])?;
    Ok(tape.scalar(loss))
}

/// Gradient of [`bag_loss`], flattened in parameter order.
pub fn bag_loss_gradient(params: &AggregatorParams, features: &Matrix, label: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let agg = params.bind(&mut tape)?;
    let h = tape.constant(params.prepare(features)?.into_owned())?;
    let out = agg.forward(&mut tape, h)?;
    let loss = cross_entropy_loss(&mut tape, out.logits, &[label as usize])?;
    Ok(tape.backward(loss)?.flatten(agg.vars()))
}

/// Embeds every training bag with the frozen encoder, then trains the aggregator.
pub fn train_mil(
    train_bags: &[Bag],
    encoder: &EncoderParams,
    config: &MilConfig,
    seed: u64,
) -> Result<AggregatorParams> {
    let features = train_bags
        .iter()
        .map(|b| Ok((instance_features(encoder, b, config)?, b.label())))
        .collect::<Result<Vec<_>>>()?;
    train_aggregator(&features, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn prediction(attention: Vec<f64>) -> BagPrediction {
        BagPrediction {
            logits: [0.0, 0.0],
            attention,
            predicted_label: false,
        }
    }

    #[test]
    fn singleton_bag_has_unit_attention() {
        let p = AggregatorParams::init(3, 4, 0).unwrap();
        let out = mil_forward(&p, &features(&[&[0.3, -0.2, 0.9]])).unwrap();
        assert_eq!(out.attention, vec![1.0]);
    }

    #[test]
    fn duplicates_get_equal_attention() {
        let p = AggregatorParams::init(2, 4, 1).unwrap();
        let out = mil_forward(&p, &features(&[&[0.5, 0.1], &[-1.0, 2.0], &[0.5, 0.1]])).unwrap();
        assert_eq!(out.attention[0], out.attention[2]);
        let s: f64 = out.attention.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_bag_rejected() {
        let p = AggregatorParams::init(2, 4, 1).unwrap();
        assert!(mil_forward(&p, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_instances(&prediction(vec![0.1, 0.7, 0.2])), vec![1, 2, 0]);
        assert_eq!(rank_instances(&prediction(vec![0.25; 4])), vec![0, 1, 2, 3]);
        assert_eq!(rank_instances(&prediction(vec![0.3, 0.4, 0.3])), vec![1, 0, 2]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let bags = vec![
            (features(&[&[1.0, 0.0]]), true),
            (features(&[&[0.0, 1.0]]), false),
        ];
        let cfg = MilConfig {
            epochs: 0,
            ..MilConfig::default()
        };
        let trained = train_aggregator(&bags, &cfg, 5).unwrap();
        assert_eq!(trained.params(), AggregatorParams::init(2, 32, 5).unwrap().params());
        let scaler = trained.scaler().unwrap();
        assert_eq!(scaler.mean(), &[0.5, 0.5]);
        assert_eq!(scaler.std(), &[0.5, 0.5]);
        let raw = train_aggregator(
            &bags,
            &MilConfig {
                feature_scaling: FeatureScaling::None,
                ..cfg
            },
            5,
        )
        .unwrap();
        assert_eq!(raw, AggregatorParams::init(2, 32, 5).unwrap());
    }

    #[test]
    fn pooled_scaler_shares_one_deviation() {
        let a = features(&[&[1.0, 4.0], &[3.0, 4.0]]);
        let b = features(&[&[5.0, 4.0]]);
        let s = FeatureScaler::fit([&a, &b], FeatureScaling::Pooled).unwrap();
        assert_eq!(s.mean(), &[3.0, 4.0]);
        let pooled = (4.0f64 / 3.0).sqrt();
        assert!(s.std().iter().all(|&v| (v - pooled).abs() < 1e-15));
        assert!(FeatureScaler::fit([&a], FeatureScaling::None).is_err());
        assert!(FeatureScaler::fit(std::iter::empty(), FeatureScaling::Pooled).is_err());
    }

    #[test]
    fn per_dimension_scaler_zscores_and_keeps_constant_columns_centered() {
        let a = features(&[&[1.0, 4.0], &[3.0, 4.0]]);
        let b = features(&[&[5.0, 4.0]]);
        let s = FeatureScaler::fit([&a, &b], FeatureScaling::PerDimension).unwrap();
        let z = s.apply(&features(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let sd = (8.0f64 / 3.0).sqrt();
        assert_eq!(z.row(0), &[0.0, 0.0]);
        assert!((z.row(1)[0] - 2.0 / sd).abs() < 1e-15);
        assert_eq!(z.row(1)[1], 2.0);
    }

    #[test]
    fn one_class_rejected() {
        let bags = vec![(features(&[&[1.0, 0.0]]), true)];
        assert!(train_aggregator(&bags, &MilConfig::default(), 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.bin");
        let p = AggregatorParams::init(5, 3, 9).unwrap();
        p.save(&path).unwrap();
        assert_eq!(AggregatorParams::load(&path).unwrap(), p);
        let scaler = FeatureScaler::new(
            Matrix::new(1, 5, vec![0.1, -0.2, 0.3, 0.0, 1.0]).unwrap(),
            Matrix::new(1, 5, vec![1.0, 2.0, 0.5, 1.0, 3.0]).unwrap(),
        )
        .unwrap();
        let p = p.with_scaler(scaler).unwrap();
        p.save(&path).unwrap();
        assert_eq!(AggregatorParams::load(&path).unwrap(), p);
    }
}
