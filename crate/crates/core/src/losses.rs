//! Training objectives built on the tape.
//!
//! * [`similarity_loss`]: pulls slide-negative views together,
//!   `-(1/n) Σ_{i≠j} z_i·z_j / τ` over ordered pairs of the `n` rows given.
//! * [`ntxent_loss`]: SimCLR NT-Xent over slide-positive views where rows
//!   `2k` and `2k+1` are the two views of patch `k`.
//! * [`cross_entropy_loss`]: mean negative log-likelihood of integer labels.
//!
//! Degenerate inputs (fewer than two negative views, no positive views)
//! yield a constant zero loss so that balanced-batch assembly never has to
//! special-case them.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn similarity_loss(tape: &mut Tape, z: Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let n = z.rows();
    if n < 2 {
        return tape.constant(Matrix::scalar(0.0));
    }
    let zt = tape.transpose(z)?;
    let gram = tape.matmul(z, zt)?;
    let off_diag = tape.constant(off_diagonal(n, 1.0, 0.0))?;
    let pairs = tape.mul(gram, off_diag)?;
    let total = tape.sum(pairs)?;
    tape.scale(total, -1.0 / (n as f64 * tau))
}

pub fn ntxent_loss(tape: &mut Tape, z: Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let n = z.rows();
    if n == 0 {
        return tape.constant(Matrix::scalar(0.0));
    }
    if n % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "ntxent views must come in pairs",
            left: z.shape(),
            right: (n + 1, z.cols()),
        });
    }
    // cosine similarity regardless of whether embeddings were pre-normalized
    let zn = tape.row_l2_normalize(z)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;

    let mask = (0..n * n).map(|i| i / n != i % n).collect();
    let lse = tape.log_sum_exp_rows(logits, Some(mask))?;
    let partner = (0..n).map(|i| i * n + (i ^ 1)).collect();
    let positives = tape.gather(logits, partner)?;
    let per_anchor = tape.sub(lse, positives)?;
    let total = tape.sum(per_anchor)?;
    tape.scale(total, 1.0 / n as f64)
}

pub fn cross_entropy_loss(tape: &mut Tape, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let cols = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy label out of range",
            left: logits.shape(),
            right: (bad, 1),
        });
    }
    let lse = tape.log_sum_exp_rows(logits, None)?;
    let picked = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| r * cols + l)
        .collect();
    let target = tape.gather(logits, picked)?;
    let nll = tape.sub(lse, target)?;
    tape.mean(nll)
}

/// Embedded views for one contrastive pretraining step.
#[derive(Debug, Clone, Copy)]
pub struct PretrainBatch {
    /// Slide-negative view embeddings.
    pub neg_views: Tensor,
    /// Slide-positive view embeddings, rows `2k, 2k+1` paired.
    pub pos_views: Tensor,
    pub tau_sim: f64,
    pub tau_simclr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: Tensor,
    pub similarity: Tensor,
    pub simclr: Tensor,
}

/// Unweighted sum of both task losses.
pub fn combined_loss(tape: &mut Tape, batch: &PretrainBatch) -> Result<CombinedLoss> {
    let similarity = similarity_loss(tape, batch.neg_views, batch.tau_sim)?;
    let simclr = ntxent_loss(tape, batch.pos_views, batch.tau_simclr)?;
    let total = tape.add(similarity, simclr)?;
    Ok(CombinedLoss {
        total,
        similarity,
        simclr,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config("tau", format!("temperature must be > 0, got {tau}")))
    }
}

fn off_diagonal(n: usize, off: f64, diag: f64) -> Matrix {
    let mut m = Matrix::filled(n, n, off);
    for i in 0..n {
        m.set(i, i, diag);
    }
    m
}
