//! Training penalties on the policy Jacobian.
//!
//! - scalar LCP: `(‖J‖₂² − k²)₊` on the full input Jacobian
//! - anisotropic LCP: `(λ_max(J·Jᵀ − K²))₊²` on the full input Jacobian
//! - SILC: `((‖A_θ‖₂ − 1)₊)²` with `A_θ` the whitened equivalent stiffness

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_eig_pair_relaxed, top_singular_pair_relaxed, Matrix, SymMatrix};
use crate::policy::{JacobianPenalty, PenaltyEval, KINK_EPS};
use crate::stiffness::{whitened_gains, LowLevelGains, StiffnessBudget};

pub const POWER_ITERS: usize = 300;
pub const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PenaltyError {
    #[error("invalid penalty config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    ScalarLcp,
    AnisoMaxeig,
    Silc,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::ScalarLcp => "scalar_lcp",
            PenaltyKind::AnisoMaxeig => "aniso_maxeig",
            PenaltyKind::Silc => "silc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    #[serde(default = "default_k_scalar")]
    pub k_lcp_scalar: f64,
    /// Diagonal of `K` for the anisotropic penalty, one entry per action.
    #[serde(default)]
    pub k_lcp_matrix: Option<Vec<f64>>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_k_scalar() -> f64 {
    2.0
}

fn default_weight() -> f64 {
    0.5
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::Silc,
            k_lcp_scalar: default_k_scalar(),
            k_lcp_matrix: None,
            weight: default_weight(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self, action_dim: usize) -> Result<(), PenaltyError> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(PenaltyError::InvalidConfig(format!(
                "weight must be >= 0, got {}",
                self.weight
            )));
        }
        match self.kind {
            PenaltyKind::ScalarLcp => {
                if !(self.k_lcp_scalar > 0.0 && self.k_lcp_scalar.is_finite()) {
                    return Err(PenaltyError::InvalidConfig(format!(
                        "k_lcp_scalar must be > 0, got {}",
                        self.k_lcp_scalar
                    )));
                }
            }
            PenaltyKind::AnisoMaxeig => {
                let k = self.k_lcp_matrix.as_ref().ok_or_else(|| {
                    PenaltyError::InvalidConfig("aniso_maxeig needs k_lcp_matrix".into())
                })?;
                if k.len() != action_dim {
                    return Err(PenaltyError::DimensionMismatch(format!(
                        "k_lcp_matrix has {} entries, action dim is {action_dim}",
                        k.len()
                    )));
                }
                if k.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(PenaltyError::InvalidConfig(
                        "k_lcp_matrix must be positive definite".into(),
                    ));
                }
            }
            PenaltyKind::Silc => {}
        }
        Ok(())
    }

    pub fn k_matrix(&self) -> Option<SymMatrix> {
        self.k_lcp_matrix.as_deref().map(SymMatrix::from_diag)
    }
}

pub fn scalar_lcp_penalty(j_pi: &Matrix, k: f64) -> f64 {
    scalar_lcp_eval(j_pi, k).value
}

pub fn aniso_maxeig_penalty(j_pi: &Matrix, k_mat: &SymMatrix) -> f64 {
    aniso_eval(j_pi, k_mat).value
}

pub fn silc_penalty(a_theta: &Matrix) -> f64 {
    silc_eval_a(a_theta).0.value
}

pub fn total_loss(rl_loss: f64, penalty_mean: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return rl_loss;
    }
    rl_loss + lambda * penalty_mean
}

/// Mean of per-sample penalty values.
pub fn batch_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn outer(u: &[f64], v: &[f64], s: f64) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            m[(i, j)] = s * ui * vj;
        }
    }
    m
}

fn scalar_lcp_eval(j: &Matrix, k: f64) -> PenaltyEval {
    let (pair, _) = top_singular_pair_relaxed(j, POWER_ITERS, POWER_TOL);
    let h = pair.sigma * pair.sigma - k * k;
    let at_kink = h.abs() <= KINK_EPS;
    if h <= 0.0 {
        return PenaltyEval {
            value: 0.0,
            grad: None,
            at_kink,
        };
    }
    PenaltyEval {
        value: h,
        grad: Some(outer(&pair.u, &pair.v, 2.0 * pair.sigma)),
        at_kink,
    }
}

fn aniso_eval(j: &Matrix, k_mat: &SymMatrix) -> PenaltyEval {
    let k2 = k_mat.matrix().matmul(k_mat.matrix());
    let s = j.matmul(&j.transpose()).sub(&k2);
    let s = SymMatrix::new(s).expect("J·Jᵀ − K² is square");
    let (pair, _) = max_eig_pair_relaxed(&s, POWER_ITERS, POWER_TOL);
    let v = pair.value;
    let at_kink = v.abs() <= KINK_EPS;
    if v <= 0.0 {
        return PenaltyEval {
            value: 0.0,
            grad: None,
            at_kink,
        };
    }
    let w = &pair.vector;
    let wwt_j = outer(w, &j.tr_matvec(w), 1.0);
    PenaltyEval {
        value: v * v,
        grad: Some(wwt_j.scale(4.0 * v)),
        at_kink,
    }
}

/// Value and `∂P/∂A` for the SILC hinge.
fn silc_eval_a(a: &Matrix) -> (PenaltyEval, Option<Matrix>) {
    let (pair, _) = top_singular_pair_relaxed(a, POWER_ITERS, POWER_TOL);
    let h = pair.sigma - 1.0;
    let at_kink = h.abs() <= KINK_EPS;
    if h <= 0.0 {
        return (
            PenaltyEval {
                value: 0.0,
                grad: None,
                at_kink,
            },
            None,
        );
    }
    let g = outer(&pair.u, &pair.v, 2.0 * h);
    (
        PenaltyEval {
            value: h * h,
            grad: None,
            at_kink,
        },
        Some(g),
    )
}

/// Scalar LCP on the full input Jacobian.
#[derive(Debug, Clone)]
pub struct ScalarLcp {
    pub k: f64,
    pub obs_dim: usize,
}

impl JacobianPenalty for ScalarLcp {
    fn columns(&self) -> Range<usize> {
        0..self.obs_dim
    }

    fn evaluate(&self, _index: usize, jacobian: &Matrix) -> PenaltyEval {
        scalar_lcp_eval(jacobian, self.k)
    }
}

/// Anisotropic max-eigenvalue LCP on the full input Jacobian.
#[derive(Debug, Clone)]
pub struct AnisoMaxeig {
    pub k: SymMatrix,
    pub obs_dim: usize,
}

impl JacobianPenalty for AnisoMaxeig {
    fn columns(&self) -> Range<usize> {
        0..self.obs_dim
    }

    fn evaluate(&self, _index: usize, jacobian: &Matrix) -> PenaltyEval {
        aniso_eval(jacobian, &self.k)
    }
}

/// SILC penalty on the latest-frame joint-position block, with one budget per
/// sample (budgets depend on the posture the sample was collected at).
#[derive(Debug, Clone)]
pub struct SilcPenalty {
    q_block: Range<usize>,
    alpha: f64,
    /// `L⁻¹·K_p` for each distinct budget.
    whitened: Arc<Vec<Matrix>>,
    assignment: Vec<usize>,
}

impl SilcPenalty {
    /// `assignment[i]` selects the budget for batch sample `i`.
    pub fn new(
        q_block: Range<usize>,
        gains: &LowLevelGains,
        budgets: &[&StiffnessBudget],
        assignment: Vec<usize>,
    ) -> Result<Self, PenaltyError> {
        if q_block.len() != gains.dim() {
            return Err(PenaltyError::DimensionMismatch(format!(
                "q block has {} columns, gains have {} joints",
                q_block.len(),
                gains.dim()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= budgets.len()) {
            return Err(PenaltyError::DimensionMismatch(format!(
                "budget index {bad} out of range ({} budgets)",
                budgets.len()
            )));
        }
        let mut whitened = Vec::with_capacity(budgets.len());
        for b in budgets {
            if b.dim() != gains.dim() {
                return Err(PenaltyError::DimensionMismatch(
                    "budget dimension differs from gains".into(),
                ));
            }
            whitened.push(whitened_gains(b, gains));
        }
        Ok(Self {
            q_block,
            alpha: gains.action_scale(),
            whitened: Arc::new(whitened),
            assignment,
        })
    }

    /// Same budgets, new sample-to-budget assignment.
    pub fn with_assignment(&self, assignment: Vec<usize>) -> Result<Self, PenaltyError> {
        if let Some(&bad) = assignment.iter().find(|&&a| a >= self.whitened.len()) {
            return Err(PenaltyError::DimensionMismatch(format!(
                "budget index {bad} out of range ({} budgets)",
                self.whitened.len()
            )));
        }
        Ok(Self {
            q_block: self.q_block.clone(),
            alpha: self.alpha,
            whitened: Arc::clone(&self.whitened),
            assignment,
        })
    }

    pub fn num_budgets(&self) -> usize {
        self.whitened.len()
    }

    /// `A_θ` for sample `index` given its q-block Jacobian.
    pub fn a_theta(&self, index: usize, j_pi_q: &Matrix) -> Matrix {
        let w = &self.whitened[self.assignment[index]];
        w.sub(&w.matmul(j_pi_q).scale(self.alpha))
    }
}

impl JacobianPenalty for SilcPenalty {
    fn columns(&self) -> Range<usize> {
        self.q_block.clone()
    }

    fn evaluate(&self, index: usize, jacobian: &Matrix) -> PenaltyEval {
        let a = self.a_theta(index, jacobian);
        let (mut eval, g_a) = silc_eval_a(&a);
        if let Some(g_a) = g_a {
            let w = &self.whitened[self.assignment[index]];
            eval.grad = Some(w.transpose().matmul(&g_a).scale(-self.alpha));
        }
        eval
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        assert_eq!(scalar_lcp_penalty(&Matrix::identity(2), 2.0), 0.0);
        let p = scalar_lcp_penalty(&Matrix::from_rows(&[[3.0]]), 2.0);
        assert!((p - 5.0).abs() < 1e-12);
        assert_eq!(scalar_lcp_penalty(&Matrix::from_rows(&[[2.0]]), 2.0), 0.0);
    }

    #[test]
    fn aniso_examples() {
        let k = SymMatrix::identity(2);
        let p = aniso_maxeig_penalty(&Matrix::identity(2).scale(2.0), &k);
        assert!((p - 9.0).abs() < 1e-10);
        assert_eq!(aniso_maxeig_penalty(&Matrix::identity(2).scale(0.5), &k), 0.0);
        assert_eq!(aniso_maxeig_penalty(&Matrix::zeros(2, 5), &k), 0.0);
    }

    #[test]
    fn silc_examples() {
        assert_eq!(silc_penalty(&Matrix::identity(2).scale(0.9)), 0.0);
        assert!((silc_penalty(&Matrix::identity(3).scale(3.0)) - 4.0).abs() < 1e-12);
        assert_eq!(silc_penalty(&Matrix::from_diag(&[1.0, 0.5])), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.0, 0.5), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(total_loss(1.0, f64::INFINITY, 0.0), 1.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: PenaltyConfig = serde_json::from_str(r#"{"kind":"scalar_lcp"}"#).unwrap();
        assert_eq!(c.k_lcp_scalar, 2.0);
        assert_eq!(c.weight, 0.5);
        c.validate(3).unwrap();
        let bad = PenaltyConfig {
            weight: -1.0,
            ..PenaltyConfig::default()
        };
        assert!(bad.validate(3).is_err());
        let aniso = PenaltyConfig {
            kind: PenaltyKind::AnisoMaxeig,
            ..PenaltyConfig::default()
        };
        assert!(aniso.validate(3).is_err());
    }
}
