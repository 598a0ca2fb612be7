//! Two-task gradient surgery: conflict projection and adaptive norm rescaling.
//!
//! Given the flattened gradients `g1` (similarity task) and `g2` (NT-Xent
//! task) of the shared parameters:
//!
//! * when `g1·g2 < 0`, each gradient is projected onto the normal plane of the
//!   *original* other gradient and the projections are summed into `g_pc`;
//! * `g_pc` is then stretched back to `‖g1 + g2‖` whenever the projection
//!   shrank it.
//!
//! The rescale works on the whole flattened vector, one global norm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::CombinedLoss;
use crate::matrix::{dot, norm};
use crate::params::ParamSpan;

/// Guards the division in the rescale step.
pub const RESCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub layout: Vec<ParamSpan>,
}

impl TaskGradients {
    pub fn new(g1: Vec<f64>, g2: Vec<f64>, layout: Vec<ParamSpan>) -> Result<Self> {
        let total: usize = layout.iter().map(ParamSpan::len).sum();
        for g in [&g1, &g2] {
            if g.len() != total {
                return Err(Error::LayoutMismatch {
                    expected: total,
                    actual: g.len(),
                });
            }
        }
        Ok(Self { g1, g2, layout })
    }

    /// Gradients without a named layout (one anonymous span).
    pub fn unlabeled(g1: Vec<f64>, g2: Vec<f64>) -> Result<Self> {
        let layout = vec![ParamSpan {
            name: "flat".into(),
            offset: 0,
            rows: 1,
            cols: g1.len(),
        }];
        Self::new(g1, g2, layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineStrategy {
    Sum,
    Pcgrad,
    PcgradRescaled,
}

/// Separate backward passes for each task loss on the same forward graph.
pub fn extract_task_gradients(
    tape: &Tape,
    losses: &CombinedLoss,
    params: &[Tensor],
    layout: Vec<ParamSpan>,
) -> Result<TaskGradients> {
    let g1 = tape.backward(losses.similarity)?.flatten(params);
    let g2 = tape.backward(losses.simclr)?.flatten(params);
    TaskGradients::new(g1, g2, layout)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub combined: Vec<f64>,
    pub conflicted: bool,
}

pub fn pcgrad_project(g1: &[f64], g2: &[f64]) -> Projection {
    assert_eq!(g1.len(), g2.len(), "task gradients must share a layout");
    let d = dot(g1, g2);
    let n1 = dot(g1, g1);
    let n2 = dot(g2, g2);
    if d >= 0.0 || n1 == 0.0 || n2 == 0.0 {
        return Projection {
            combined: add(g1, g2),
            conflicted: false,
        };
    }
    let c1 = d / n2;
    let c2 = d / n1;
    let combined = g1
        .iter()
        .zip(g2)
        .map(|(&a, &b)| (a - c1 * b) + (b - c2 * a))
        .collect();
    Projection {
        combined,
        conflicted: true,
    }
}

/// Both projected task gradients, for inspecting the surgery invariants.
pub fn projected_components(g1: &[f64], g2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = dot(g1, g2);
    let n1 = dot(g1, g1);
    let n2 = dot(g2, g2);
    if d >= 0.0 || n1 == 0.0 || n2 == 0.0 {
        return (g1.to_vec(), g2.to_vec());
    }
    let p1 = g1.iter().zip(g2).map(|(&a, &b)| a - d / n2 * b).collect();
    let p2 = g2.iter().zip(g1).map(|(&b, &a)| b - d / n1 * a).collect();
    (p1, p2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub output: Vec<f64>,
    pub gsum_norm: f64,
    pub gpc_norm: f64,
    /// 1 when the rescale did not trigger.
    pub factor: f64,
    /// The projection cancelled the update while the plain sum did not.
    pub collapsed: bool,
}

pub fn rescale(g_pc: &[f64], g1: &[f64], g2: &[f64]) -> Rescaled {
    let gsum_norm = norm(&add(g1, g2));
    let gpc_norm = norm(g_pc);
    if gpc_norm < gsum_norm && gpc_norm > RESCALE_EPS {
        let factor = gsum_norm / gpc_norm;
        return Rescaled {
            output: g_pc.iter().map(|v| v * factor).collect(),
            gsum_norm,
            gpc_norm,
            factor,
            collapsed: false,
        };
    }
    Rescaled {
        output: g_pc.to_vec(),
        gsum_norm,
        gpc_norm,
        factor: 1.0,
        collapsed: gpc_norm <= RESCALE_EPS && gsum_norm > RESCALE_EPS,
    }
}

/// Per-step surgery diagnostics written to the run log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurgeryDiagnostics {
    pub conflicted: bool,
    pub g1_norm: f64,
    pub g2_norm: f64,
    pub gsum_norm: f64,
    pub gpc_norm: f64,
    pub rescale_factor: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub update: Vec<f64>,
    pub diagnostics: SurgeryDiagnostics,
}

pub fn combine(g: &TaskGradients, strategy: CombineStrategy) -> Combined {
    let (g1, g2) = (&g.g1, &g.g2);
    let mut diag = SurgeryDiagnostics {
        g1_norm: norm(g1),
        g2_norm: norm(g2),
        rescale_factor: 1.0,
        ..Default::default()
    };
    let update = match strategy {
        CombineStrategy::Sum => {
            let sum = add(g1, g2);
            diag.conflicted = dot(g1, g2) < 0.0;
            diag.gsum_norm = norm(&sum);
            diag.gpc_norm = diag.gsum_norm;
            sum
        }
        CombineStrategy::Pcgrad => {
            let p = pcgrad_project(g1, g2);
            diag.conflicted = p.conflicted;
            diag.gsum_norm = norm(&add(g1, g2));
            diag.gpc_norm = norm(&p.combined);
            p.combined
        }
        CombineStrategy::PcgradRescaled => {
            let p = pcgrad_project(g1, g2);
            let r = rescale(&p.combined, g1, g2);
            diag.conflicted = p.conflicted;
            diag.gsum_norm = r.gsum_norm;
            diag.gpc_norm = r.gpc_norm;
            diag.rescale_factor = r.factor;
            diag.collapsed = r.collapsed;
            r.output
        }
    };
    Combined {
        update,
        diagnostics: diag,
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    #[test]
    fn orthogonal_is_not_a_conflict() {
        let p = pcgrad_project(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(p.combined, vec![1.0, 1.0]);
        assert!(!p.conflicted);
    }

    #[test]
    fn conflicting_pair_projects_against_originals() {
        let p = pcgrad_project(&[1.0, 0.0], &[-1.0, 1.0]);
        assert!(p.conflicted);
        assert_eq!(p.combined, vec![0.5, 1.5]);
        let (p1, p2) = projected_components(&[1.0, 0.0], &[-1.0, 1.0]);
        assert_eq!(p1, vec![0.5, 0.5]);
        assert_eq!(p2, vec![0.0, 1.0]);
    }

    #[test]
    fn antiparallel_cancels_without_rescale() {
        let p = pcgrad_project(&[1.0, 0.0], &[-1.0, 0.0]);
        assert!(p.conflicted);
        assert_eq!(p.combined, vec![0.0, 0.0]);
        let r = rescale(&p.combined, &[1.0, 0.0], &[-1.0, 0.0]);
        assert_eq!(r.output, vec![0.0, 0.0]);
        assert_eq!(r.factor, 1.0);
        // sum is zero too, so this is not a collapse
        assert!(!r.collapsed);

        let g1 = [2.0, 0.0];
        let g2 = [-1.0, 0.0];
        let p = pcgrad_project(&g1, &g2);
        assert_eq!(p.combined, vec![0.0, 0.0]);
        assert!(rescale(&p.combined, &g1, &g2).collapsed);
    }

    #[test]
    fn zero_gradient_passes_through() {
        let p = pcgrad_project(&[0.0, 0.0], &[-1.0, 2.0]);
        assert!(!p.conflicted);
        assert_eq!(p.combined, vec![-1.0, 2.0]);
    }

    #[test]
    fn rescale_branches() {
        let r = rescale(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(r.output, vec![1.0, 1.0]);
        assert_eq!(r.factor, 1.0);

        // projected norm larger than the sum: left alone
        let r = rescale(&[3.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(r.output, vec![3.0, 0.0]);
        assert_eq!(r.factor, 1.0);
    }

    #[test]
    fn worked_rescale_example() {
        let g = TaskGradients::unlabeled(vec![3.0, 0.0], vec![-2.0, 0.1]).unwrap();
        let pc = combine(&g, CombineStrategy::Pcgrad);
        assert!((pc.update[0] - 0.007_481_296_758_104_738).abs() < 1e-12);
        assert!((pc.update[1] - 0.249_625_935_162_094_76).abs() < 1e-12);
        let r = combine(&g, CombineStrategy::PcgradRescaled);
        assert!((r.diagnostics.rescale_factor - 4.024_167_296_600_328).abs() < 1e-9);
        assert!((norm(&r.update) - 1.01f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let layout = vec![ParamSpan {
            name: "w".into(),
            offset: 0,
            rows: 2,
            cols: 2,
        }];
        assert!(TaskGradients::new(vec![0.0; 4], vec![0.0; 3], layout).is_err());
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..64).prop_flat_map(|d| {
            (
                prop::collection::vec(-1.0f64..1.0, d),
                prop::collection::vec(-1.0f64..1.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn agreement_is_a_noop((g1, g2) in pair()) {
            let g = TaskGradients::unlabeled(g1, g2).unwrap();
            prop_assume!(dot(&g.g1, &g.g2) >= 0.0);
            let sum = combine(&g, CombineStrategy::Sum).update;
            prop_assert_eq!(&combine(&g, CombineStrategy::Pcgrad).update, &sum);
            prop_assert_eq!(&combine(&g, CombineStrategy::PcgradRescaled).update, &sum);
        }

        #[test]
        fn projection_removes_conflict((g1, g2) in pair()) {
            prop_assume!(dot(&g1, &g2) < 0.0);
            let (p1, p2) = projected_components(&g1, &g2);
            prop_assert!(dot(&p1, &g2) >= -1e-9 * norm(&p1) * norm(&g2));
            prop_assert!(dot(&p2, &g1) >= -1e-9 * norm(&p2) * norm(&g1));
            // projecting again is a no-op up to rounding
            let (again, _) = projected_components(&p1, &g2);
            for (a, b) in again.iter().zip(&p1) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + norm(&p1)));
            }
        }

        #[test]
        fn rescale_restores_sum_norm((g1, g2) in pair()) {
            let g = TaskGradients::unlabeled(g1, g2).unwrap();
            let p = pcgrad_project(&g.g1, &g.g2);
            let r = combine(&g, CombineStrategy::PcgradRescaled);
            if r.diagnostics.rescale_factor != 1.0 {
                let target = r.diagnostics.gsum_norm;
                prop_assert!((norm(&r.update) - target).abs() <= 1e-9 * target);
                prop_assert!(cosine(&r.update, &p.combined) >= 1.0 - 1e-12);
            }
        }

        #[test]
        fn projection_is_scale_equivariant((g1, g2) in pair(), c in 0.01f64..100.0) {
            let base = pcgrad_project(&g1, &g2);
            let s1: Vec<f64> = g1.iter().map(|v| v * c).collect();
            let s2: Vec<f64> = g2.iter().map(|v| v * c).collect();
            let scaled = pcgrad_project(&s1, &s2);
            prop_assert_eq!(base.conflicted, scaled.conflicted);
            let scale = norm(&scaled.combined).max(1e-300);
            for (a, b) in scaled.combined.iter().zip(&base.combined) {
                prop_assert!((a - c * b).abs() <= 1e-12 * scale.max(c * norm(&base.combined)));
            }
        }
    }
}
