//! MLP encoder with a linear projection head, and feature-space view augmentation.
//!
//! The backbone maps `input_dim → hidden_dim → feat_dim` with an activation
//! after each layer; the projection head maps backbone features to
//! `proj_dim`. Contrastive losses consume the (optionally normalized) head
//! output, the MIL aggregator consumes backbone features.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, UnaryOp};
use crate::checkpoint::{self, Container, ModelKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{xavier_matrix, ParamSet};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn op(self) -> UnaryOp {
        match self {
            Activation::Tanh => UnaryOp::Tanh,
            Activation::Relu => UnaryOp::Relu,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    pub proj_dim: usize,
    pub activation: Activation,
    pub normalize_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            feat_dim: 32,
            proj_dim: 16,
            activation: Activation::Tanh,
            normalize_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("encoder.input_dim", self.input_dim),
            ("encoder.hidden_dim", self.hidden_dim),
            ("encoder.feat_dim", self.feat_dim),
            ("encoder.proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;
const NAMES: [&str; 6] = ["enc.w1", "enc.b1", "enc.w2", "enc.b2", "head.w", "head.b"];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    params: ParamSet,
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces the parameter values; shapes must match the config.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        Self::from_parts(self.config.clone(), params)
    }

    pub fn from_parts(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let shapes = expected_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::LayoutMismatch {
                expected: shapes.len(),
                actual: params.len(),
            });
        }
        for (t, &shape) in params.tensors().iter().zip(&shapes) {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "encoder params",
                    left: shape,
                    right: t.shape(),
                });
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                op: "encoder params",
            });
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundEncoder> {
        let vars = self.params.bind(tape)?;
        Ok(BoundEncoder {
            vars,
            activation: self.config.activation,
            normalize: self.config.normalize_embeddings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = Container {
            kind: ModelKind::Encoder,
            flags: self.config.activation.code()
                | if self.config.normalize_embeddings { 1 << 8 } else { 0 },
            tensors: self.params.tensors().to_vec(),
        };
        checkpoint::write_container(BufWriter::new(File::create(path)?), &c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read_container(BufReader::new(File::open(path)?))?;
        if c.kind != ModelKind::Encoder {
            return Err(Error::Checkpoint(format!("expected encoder, found {:?}", c.kind)));
        }
        if c.tensors.len() != NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                NAMES.len(),
                c.tensors.len()
            )));
        }
        let t = &c.tensors;
        let config = EncoderConfig {
            input_dim: t[W1].rows(),
            hidden_dim: t[W1].cols(),
            feat_dim: t[W2].cols(),
            proj_dim: t[W3].cols(),
            activation: Activation::from_code(c.flags & 0xff)?,
            normalize_embeddings: c.flags & (1 << 8) != 0,
        };
        let mut params = ParamSet::new();
        for (name, tensor) in NAMES.iter().zip(c.tensors) {
            params.push(*name, tensor);
        }
        Self::from_parts(config, params)
    }
}

fn expected_shapes(c: &EncoderConfig) -> [(usize, usize); 6] {
    [
        (c.input_dim, c.hidden_dim),
        (1, c.hidden_dim),
        (c.hidden_dim, c.feat_dim),
        (1, c.feat_dim),
        (c.feat_dim, c.proj_dim),
        (1, c.proj_dim),
    ]
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = stream_rng(seed, crate::rng::STREAM_ENCODER_INIT);
    let mut params = ParamSet::new();
    for (i, (rows, cols)) in expected_shapes(config).into_iter().enumerate() {
        let value = if rows == 1 {
            Matrix::zeros(rows, cols)
        } else {
            xavier_matrix(&mut rng, rows, cols)
        };
        params.push(NAMES[i], value);
    }
    EncoderParams::from_parts(config.clone(), params)
}

/// Encoder parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: Vec<Tensor>,
    activation: Activation,
    normalize: bool,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Tensor] {
        &self.vars
    }

    fn check_input(&self, x: Tensor) -> Result<()> {
        let expected = self.vars[W1].rows();
        if x.cols() != expected {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                left: (x.rows(), expected),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Backbone features (batch × feat_dim).
    pub fn backbone(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let act = self.activation.op();
        let h = tape.matmul(x, self.vars[W1])?;
        let h = tape.add_row(h, self.vars[B1])?;
        let h = tape.unary(act, h)?;
        let f = tape.matmul(h, self.vars[W2])?;
        let f = tape.add_row(f, self.vars[B2])?;
        tape.unary(act, f)
    }

    /// Projection-head output from backbone features, normalized when configured.
    pub fn project(&self, tape: &mut Tape, features: Tensor) -> Result<Tensor> {
        let z = tape.matmul(features, self.vars[W3])?;
        let z = tape.add_row(z, self.vars[B3])?;
        if self.normalize {
            tape.row_l2_normalize(z)
        } else {
            Ok(z)
        }
    }

    /// Embeddings `z` (batch × proj_dim) consumed by the contrastive losses.
    pub fn embed(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let f = self.backbone(tape, x)?;
        self.project(tape, f)
    }
}

/// Embeddings for a batch of views, evaluated on a throwaway tape.
pub fn embed(params: &EncoderParams, views: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape)?;
    let x = tape.constant(views.clone())?;
    let z = enc.embed(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

/// Backbone features for a batch, evaluated on a throwaway tape.
pub fn backbone_features(params: &EncoderParams, inputs: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape)?;
    let x = tape.constant(inputs.clone())?;
    let f = enc.backbone(&mut tape, x)?;
    Ok(tape.value(f).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub jitter_sigma: f64,
    /// Bounds of the per-view multiplicative scale.
    pub scale_range: [f64; 2],
    /// Per-coordinate zeroing probability.
    pub dropout_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.2,
            scale_range: [0.9, 1.1],
            dropout_p: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: [1.0, 1.0],
            dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config("augment.jitter_sigma", "must be finite and >= 0"));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("augment.scale_range", "need 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("augment.dropout_p", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One augmented view: `mask ⊙ (scale · x + noise)`.
pub fn augment_view<R: Rng>(features: &[f64], config: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let [lo, hi] = config.scale_range;
    let scale = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let noise = (config.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, config.jitter_sigma).expect("validated sigma"));
    features
        .iter()
        .map(|&x| {
            let mut v = scale * x;
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            if config.dropout_p > 0.0 && rng.random::<f64>() < config.dropout_p {
                v = 0.0;
            }
            v
        })
        .collect()
}

/// Two independent augmented views of one patch.
pub fn augment<R: Rng>(
    features: &[f64],
    config: &AugmentConfig,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = augment_view(features, config, rng);
    let b = augment_view(features, config, rng);
    (a, b)
}
