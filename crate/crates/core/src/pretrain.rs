//! Encoder pretraining for the five compared methods.
//!
//! All methods share initialization, schedule, optimizer, augmentation and
//! balanced batching; they differ only in the objective and in how the
//! per-task gradients are merged:
//!
//! | method                | objective                          | merge            |
//! |-----------------------|------------------------------------|------------------|
//! | `weakly_supervised`   | CE on inherited slide labels       | n/a              |
//! | `simclr`              | NT-Xent on every patch             | n/a              |
//! | `weaksupcon`          | similarity (neg) + NT-Xent (pos)   | plain sum        |
//! | `slam_ags_no_rescale` | same                               | conflict projection |
//! | `slam_ags`            | same                               | projection + rescale |

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BalancedSampler, Bag, SampledBatch};
use crate::encoder::{augment_view, init_params, AugmentConfig, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, cross_entropy_loss, ntxent_loss, PretrainBatch};
use crate::matrix::{dot, Matrix};
use crate::optim::{apply_update, lr_at, OptimizerConfig, OptimizerState, ScheduleConfig};
use crate::params::{xavier_matrix, ParamSet};
use crate::rng::{stream_rng, STREAM_HEAD_INIT, STREAM_PRETRAIN};
use crate::surgery::{combine, extract_task_gradients, CombineStrategy, TaskGradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WeaklySupervised,
    Simclr,
    Weaksupcon,
    SlamAgsNoRescale,
    SlamAgs,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::WeaklySupervised,
        Method::Simclr,
        Method::Weaksupcon,
        Method::SlamAgsNoRescale,
        Method::SlamAgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::WeaklySupervised => "weakly_supervised",
            Method::Simclr => "simclr",
            Method::Weaksupcon => "weaksupcon",
            Method::SlamAgsNoRescale => "slam_ags_no_rescale",
            Method::SlamAgs => "slam_ags",
        }
    }

    /// Gradient merge for the two-task methods.
    pub fn strategy(self) -> Option<CombineStrategy> {
        match self {
            Method::Weaksupcon => Some(CombineStrategy::Sum),
            Method::SlamAgsNoRescale => Some(CombineStrategy::Pcgrad),
            Method::SlamAgs => Some(CombineStrategy::PcgradRescaled),
            Method::WeaklySupervised | Method::Simclr => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "method",
                    format!(
                        "unknown method `{s}` (expected one of {})",
                        Method::ALL.map(Method::name).join(", ")
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub tau_sim: f64,
    pub tau_simclr: f64,
    /// One view per slide-negative patch instead of two.
    pub neg_single_view: bool,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            base_lr: 1e-3,
            warmup_epochs: 10,
            final_lr: 0.0,
            tau_sim: 0.5,
            tau_simclr: 0.5,
            neg_single_view: false,
            optimizer: OptimizerConfig::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("pretrain.batch_size", "must be a positive even number"));
        }
        for (field, tau) in [("pretrain.tau_sim", self.tau_sim), ("pretrain.tau_simclr", self.tau_simclr)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if self.epochs > 0 {
            self.schedule(1).validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch,
            final_lr: self.final_lr,
        }
    }
}

/// Model inputs for one step, after sampling and augmentation.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInputs {
    /// Two-task methods: negative views and paired positive views.
    Contrastive { neg_views: Matrix, pos_views: Matrix },
    /// Paired views of every patch in the batch.
    SelfSupervised { views: Matrix },
    /// Raw features with inherited slide labels.
    Supervised { features: Matrix, labels: Vec<usize> },
}

/// Losses and per-task gradients for one step. Task 1 is the similarity
/// loss; task 2 is NT-Xent, or cross-entropy for the supervised baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvaluation {
    pub loss_total: f64,
    pub loss_task1: f64,
    pub loss_task2: f64,
    pub gradients: TaskGradients,
    /// Gradient of the temporary classifier head (supervised baseline only).
    pub head_gradient: Option<Vec<f64>>,
}

/// Forward and backward passes for one step on a fresh tape.
pub fn evaluate_step(
    encoder: &EncoderParams,
    head: Option<&ParamSet>,
    inputs: &StepInputs,
    config: &PretrainConfig,
) -> Result<StepEvaluation> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape)?;
    let layout = encoder.params().layout();
    let n = encoder.params().num_scalars();
    match inputs {
        StepInputs::Contrastive {
            neg_views,
            pos_views,
        } => {
            let xn = tape.constant(neg_views.clone())?;
            let xp = tape.constant(pos_views.clone())?;
            let batch = PretrainBatch {
                neg_views: enc.embed(&mut tape, xn)?,
                pos_views: enc.embed(&mut tape, xp)?,
                tau_sim: config.tau_sim,
                tau_simclr: config.tau_simclr,
            };
            let losses = combined_loss(&mut tape, &batch)?;
            let gradients = extract_task_gradients(&tape, &losses, enc.vars(), layout)?;
            Ok(StepEvaluation {
                loss_total: tape.scalar(losses.total),
                loss_task1: tape.scalar(losses.similarity),
                loss_task2: tape.scalar(losses.simclr),
                gradients,
                head_gradient: None,
            })
        }
        StepInputs::SelfSupervised { views } => {
            let x = tape.constant(views.clone())?;
            let z = enc.embed(&mut tape, x)?;
            let loss = ntxent_loss(&mut tape, z, config.tau_simclr)?;
            let g2 = tape.backward(loss)?.flatten(enc.vars());
            let value = tape.scalar(loss);
            Ok(StepEvaluation {
                loss_total: value,
                loss_task1: 0.0,
                loss_task2: value,
                gradients: TaskGradients::new(vec![0.0; n], g2, layout)?,
                head_gradient: None,
            })
        }
        StepInputs::Supervised { features, labels } => {
            let head = head.ok_or_else(|| {
                Error::config("head", "supervised step needs a classifier head")
            })?;
            let head_vars = head.bind(&mut tape)?;
            let x = tape.constant(features.clone())?;
            let f = enc.backbone(&mut tape, x)?;
            let logits = tape.matmul(f, head_vars[0])?;
            let logits = tape.add_row(logits, head_vars[1])?;
            let loss = cross_entropy_loss(&mut tape, logits, labels)?;
            let grads = tape.backward(loss)?;
            let value = tape.scalar(loss);
            Ok(StepEvaluation {
                loss_total: value,
                loss_task1: 0.0,
                loss_task2: value,
                gradients: TaskGradients::new(vec![0.0; n], grads.flatten(enc.vars()), layout)?,
                head_gradient: Some(grads.flatten(&head_vars)),
            })
        }
    }
}

/// One optimizer step's log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_task1: f64,
    pub loss_task2: f64,
    pub conflict: bool,
    pub g1_norm: f64,
    pub g2_norm: f64,
    pub gsum_norm: f64,
    pub gpc_norm: f64,
    pub rescale_factor: f64,
    /// Applied (pre-learning-rate) update dotted with each raw task gradient.
    pub update_dot_g1: f64,
    pub update_dot_g2: f64,
    pub collapsed: bool,
}

pub const RUN_LOG_HEADER: &str =
    "step,lr,loss_total,loss_task1,loss_task2,conflict,g1_norm,g2_norm,gsum_norm,gpc_norm,rescale_factor";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainRunLog {
    pub records: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl PretrainRunLog {
    pub fn conflicted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.conflict).count()
    }

    pub fn collapse_events(&self) -> usize {
        self.records.iter().filter(|r| r.collapsed).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{RUN_LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss_total,
                r.loss_task1,
                r.loss_task2,
                r.conflict as u8,
                r.g1_norm,
                r.g2_norm,
                r.gsum_norm,
                r.gpc_norm,
                r.rescale_factor
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Step-by-step pretraining state for one (method, seed) run.
pub struct Pretrainer<'a> {
    method: Method,
    config: PretrainConfig,
    bags: &'a [Bag],
    sampler: BalancedSampler,
    schedule: ScheduleConfig,
    encoder: EncoderParams,
    head: Option<ParamSet>,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    pending: VecDeque<SampledBatch>,
    step: usize,
    log: PretrainRunLog,
}

impl<'a> Pretrainer<'a> {
    pub fn new(method: Method, bags: &'a [Bag], config: &PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sampler = BalancedSampler::new(bags)?;
        let steps_per_epoch = sampler.steps_per_epoch(config.batch_size)?;
        let dim = bags[0].patches()[0].features.len();
        if dim != config.encoder.input_dim {
            return Err(Error::config(
                "encoder.input_dim",
                format!("{} does not match feature dimension {dim}", config.encoder.input_dim),
            ));
        }
        let encoder = init_params(&config.encoder, seed)?;
        let head = (method == Method::WeaklySupervised).then(|| {
            let mut rng = stream_rng(seed, STREAM_HEAD_INIT);
            let mut head = ParamSet::new();
            head.push("cls.w", xavier_matrix(&mut rng, config.encoder.feat_dim, 2));
            head.push("cls.b", Matrix::zeros(1, 2));
            head
        });
        let mut trainable = encoder.params().clone();
        if let Some(h) = &head {
            trainable = trainable.concat(h.clone());
        }
        let optimizer = OptimizerState::new(config.optimizer.clone(), &trainable);
        Ok(Self {
            method,
            config: config.clone(),
            bags,
            sampler,
            schedule: config.schedule(steps_per_epoch),
            encoder,
            head,
            optimizer,
            rng: stream_rng(seed, STREAM_PRETRAIN),
            pending: VecDeque::new(),
            step: 0,
            log: PretrainRunLog::default(),
        })
    }

    pub fn total_steps(&self) -> usize {
        if self.config.epochs == 0 {
            0
        } else {
            self.schedule.total_steps()
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn head(&self) -> Option<&ParamSet> {
        self.head.as_ref()
    }

    /// Samples and augments the next batch.
    pub fn prepare_step(&mut self) -> Result<StepInputs> {
        if self.pending.is_empty() {
            let epoch = self.sampler.epoch(self.config.batch_size, &mut self.rng)?;
            self.pending.extend(epoch);
        }
        let batch = self.pending.pop_front().expect("epoch is non-empty");
        let bags = self.bags;
        let aug = &self.config.augment;
        let rng = &mut self.rng;
        let paired_views = |refs: &[crate::data::PatchRef], rng: &mut ChaCha8Rng| {
            let mut rows = Vec::with_capacity(refs.len() * 2);
            for r in refs {
                let f = &r.resolve(bags).features;
                rows.push(augment_view(f, aug, rng));
                rows.push(augment_view(f, aug, rng));
            }
            rows
        };
        Ok(match self.method {
            Method::WeaklySupervised => {
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                for (refs, label) in [(&batch.positive, 1), (&batch.negative, 0)] {
                    for r in refs {
                        rows.push(r.resolve(bags).features.clone());
                        labels.push(label);
                    }
                }
                StepInputs::Supervised {
                    features: Matrix::from_rows(&rows)?,
                    labels,
                }
            }
            Method::Simclr => {
                let mut rows = paired_views(&batch.positive, rng);
                rows.extend(paired_views(&batch.negative, rng));
                StepInputs::SelfSupervised {
                    views: Matrix::from_rows(&rows)?,
                }
            }
            Method::Weaksupcon | Method::SlamAgsNoRescale | Method::SlamAgs => {
                let neg_rows = if self.config.neg_single_view {
                    batch
                        .negative
                        .iter()
                        .map(|r| augment_view(&r.resolve(bags).features, aug, rng))
                        .collect()
                } else {
                    paired_views(&batch.negative, rng)
                };
                let pos_rows = paired_views(&batch.positive, rng);
                let dim = self.config.encoder.input_dim;
                StepInputs::Contrastive {
                    neg_views: matrix_or_empty(&neg_rows, dim)?,
                    pos_views: matrix_or_empty(&pos_rows, dim)?,
                }
            }
        })
    }

    /// Evaluates `inputs`, merges the gradients and applies one update.
    pub fn apply_step(&mut self, inputs: &StepInputs) -> Result<StepRecord> {
        let step = self.step;
        let lr = lr_at(step, &self.schedule)?;
        let eval = evaluate_step(&self.encoder, self.head.as_ref(), inputs, &self.config)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
        if !eval.loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let strategy = self.method.strategy().unwrap_or(CombineStrategy::Sum);
        let merged = combine(&eval.gradients, strategy);
        let d = merged.diagnostics;
        let record = StepRecord {
            step,
            lr,
            loss_total: eval.loss_total,
            loss_task1: eval.loss_task1,
            loss_task2: eval.loss_task2,
            conflict: d.conflicted,
            g1_norm: d.g1_norm,
            g2_norm: d.g2_norm,
            gsum_norm: d.gsum_norm,
            gpc_norm: d.gpc_norm,
            rescale_factor: d.rescale_factor,
            update_dot_g1: dot(&merged.update, &eval.gradients.g1),
            update_dot_g2: dot(&merged.update, &eval.gradients.g2),
            collapsed: d.collapsed,
        };

        let mut update = merged.update;
        let mut trainable = self.encoder.params().clone();
        if let (Some(head), Some(hg)) = (&self.head, &eval.head_gradient) {
            trainable = trainable.concat(head.clone());
            update.extend_from_slice(hg);
        }
        let updated = apply_update(&trainable, &update, &mut self.optimizer, lr)?;
        if !updated.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let (enc, head) = updated.split_at(self.encoder.params().len());
        self.encoder = self.encoder.with_params(enc)?;
        if self.head.is_some() {
            self.head = Some(head);
        }
        self.step += 1;
        self.log.records.push(record);
        Ok(record)
    }

    pub fn run(mut self) -> Result<(EncoderParams, PretrainRunLog)> {
        while self.step < self.total_steps() {
            let inputs = self.prepare_step()?;
            self.apply_step(&inputs)?;
        }
        Ok((self.encoder, self.log))
    }
}

fn matrix_or_empty(rows: &[Vec<f64>], dim: usize) -> Result<Matrix> {
    if rows.is_empty() {
        Ok(Matrix::zeros(0, dim))
    } else {
        Matrix::from_rows(rows)
    }
}

/// Pretrains an encoder with `method` on the training bags.
pub fn pretrain(
    method: Method,
    bags: &[Bag],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderParams, PretrainRunLog)> {
    Pretrainer::new(method, bags, config, seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    fn tiny_data() -> Vec<Bag> {
        generate_dataset(&DatasetConfig {
            dim: 6,
            bag_size: 10,
            n_train_bags: 4,
            n_test_bags: 2,
            witness_rate: 0.2,
            ..DatasetConfig::default()
        })
        .unwrap()
        .train
    }

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 8,
            encoder: EncoderConfig {
                input_dim: 6,
                hidden_dim: 8,
                feat_dim: 5,
                proj_dim: 4,
                ..EncoderConfig::default()
            },
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pcgrad".parse::<Method>().is_err());
    }

    #[test]
    fn every_method_runs_and_logs_each_step() {
        let bags = tiny_data();
        for m in Method::ALL {
            let (params, log) = pretrain(m, &bags, &tiny_config(), 1).unwrap();
            assert!(params.params().is_finite());
            // 20 patches per class / 4 per half-batch = 5 steps per epoch
            assert_eq!(log.records.len(), 15, "{m}");
            for (i, r) in log.records.iter().enumerate() {
                assert_eq!(r.step, i);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let bags = tiny_data();
        let a = pretrain(Method::SlamAgs, &bags, &tiny_config(), 7).unwrap();
        let b = pretrain(Method::SlamAgs, &bags, &tiny_config(), 7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let bags = tiny_data();
        let cfg = PretrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..tiny_config()
        };
        let (p, log) = pretrain(Method::Weaksupcon, &bags, &cfg, 3).unwrap();
        assert_eq!(p, init_params(&cfg.encoder, 3).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let bags = tiny_data();
        let negatives: Vec<Bag> = bags.iter().filter(|b| !b.label()).cloned().collect();
        assert!(pretrain(Method::Weaksupcon, &negatives, &tiny_config(), 0).is_err());
        let wrong_dim = PretrainConfig {
            encoder: EncoderConfig::default(),
            ..tiny_config()
        };
        assert!(pretrain(Method::Simclr, &bags, &wrong_dim, 0).is_err());
    }

    #[test]
    fn run_log_csv_schema() {
        let bags = tiny_data();
        let (_, log) = pretrain(Method::SlamAgs, &bags, &tiny_config(), 2).unwrap();
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RUN_LOG_HEADER);
        assert_eq!(lines.count(), log.records.len());
    }
}
