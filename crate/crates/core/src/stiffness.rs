//! Stiffness budget chain.
//!
//! Task-space stiffness bound → task compliance lower bound → joint compliance
//! budget (with an isotropic null-space term) → joint stiffness budget and its
//! Cholesky factor. The factor whitens the policy-induced equivalent stiffness
//! `K_p(I − αJ_π)` so the budget becomes a unit spectral-norm bound.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    cholesky, min_singular_value, pinv, psd_leq, min_eig_sym, solve_lower_triangular, Cholesky,
    LinalgError, Matrix, SymMatrix, DEFAULT_RANK_TOL,
};

/// Directional audit tolerance: `lhs > rhs + AUDIT_EPS` counts as a violation.
pub const AUDIT_EPS: f64 = 1e-9;
/// Tolerance on the compatibility condition `J·C_q^max·Jᵀ ⪰ C_x^max`.
pub const COMPATIBILITY_TOL: f64 = 1e-8;
/// Below this smallest singular value a task Jacobian is treated as singular.
pub const RANK_EPS: f64 = 1e-8;
/// Budgets are rebuilt when the arm leaves the build configuration by more than this (rad, ∞-norm).
pub const REBUILD_DISTANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StiffnessError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("task Jacobian is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficientJacobian { sigma_min: f64 },
    #[error("incompatible budget: λ_min(J·C_q^max·Jᵀ − C_x^max) = {margin:e}")]
    IncompatibleBudget { margin: f64 },
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, StiffnessError>;

/// Joint PD servo gains and the policy action scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainsSpec", into = "GainsSpec")]
pub struct LowLevelGains {
    kp: Vec<f64>,
    kd: Vec<f64>,
    action_scale: f64,
}

/// Serialized form of [`LowLevelGains`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsSpec {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    #[serde(default = "default_action_scale")]
    pub action_scale: f64,
}

fn default_action_scale() -> f64 {
    0.25
}

impl TryFrom<GainsSpec> for LowLevelGains {
    type Error = StiffnessError;

    fn try_from(s: GainsSpec) -> Result<Self> {
        LowLevelGains::new(s.kp, s.kd, s.action_scale)
    }
}

impl From<LowLevelGains> for GainsSpec {
    fn from(g: LowLevelGains) -> Self {
        GainsSpec {
            kp: g.kp,
            kd: g.kd,
            action_scale: g.action_scale,
        }
    }
}

impl LowLevelGains {
    pub fn new(kp: Vec<f64>, kd: Vec<f64>, action_scale: f64) -> Result<Self> {
        if kp.len() != kd.len() || kp.is_empty() {
            return Err(StiffnessError::InvalidGains(format!(
                "kp has {} entries, kd has {}",
                kp.len(),
                kd.len()
            )));
        }
        if kp.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(StiffnessError::InvalidGains("kp must be positive".into()));
        }
        if kd.iter().any(|&k| !(k >= 0.0 && k.is_finite())) {
            return Err(StiffnessError::InvalidGains("kd must be non-negative".into()));
        }
        if !(action_scale > 0.0 && action_scale.is_finite()) {
            return Err(StiffnessError::InvalidGains("action scale must be positive".into()));
        }
        Ok(Self {
            kp,
            kd,
            action_scale,
        })
    }

    pub fn uniform(n: usize, kp: f64, kd: f64, action_scale: f64) -> Result<Self> {
        Self::new(vec![kp; n], vec![kd; n], action_scale)
    }

    pub fn dim(&self) -> usize {
        self.kp.len()
    }

    pub fn kp(&self) -> &[f64] {
        &self.kp
    }

    pub fn kd(&self) -> &[f64] {
        &self.kd
    }

    pub fn kp_matrix(&self) -> SymMatrix {
        SymMatrix::from_diag(&self.kp)
    }

    pub fn kd_matrix(&self) -> SymMatrix {
        SymMatrix::from_diag(&self.kd)
    }

    pub fn action_scale(&self) -> f64 {
        self.action_scale
    }

    pub fn with_action_scale(mut self, alpha: f64) -> Result<Self> {
        self.action_scale = alpha;
        Self::new(self.kp, self.kd, self.action_scale)
    }
}

fn check_square(j_pi_q: &Matrix, n: usize) -> Result<()> {
    if j_pi_q.shape() != (n, n) {
        return Err(StiffnessError::DimensionMismatch(format!(
            "policy q-block Jacobian is {:?}, expected {n}x{n}",
            j_pi_q.shape()
        )));
    }
    Ok(())
}

/// `K_eq = K_p·(I − α·J_π)`, kept as a general (non-symmetric) matrix.
pub fn equivalent_joint_stiffness(gains: &LowLevelGains, j_pi_q: &Matrix) -> Result<Matrix> {
    let n = gains.dim();
    check_square(j_pi_q, n)?;
    let alpha = gains.action_scale;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            k[(i, j)] = gains.kp[i] * (delta - alpha * j_pi_q[(i, j)]);
        }
    }
    Ok(k)
}

/// Frobenius norm of the antisymmetric part of `K_eq`, a diagnostic for how
/// far the closed loop is from a conservative spring.
pub fn antisymmetric_residual(k_eq: &Matrix) -> f64 {
    k_eq.antisymmetric_part().frobenius_norm()
}

fn check_full_row_rank(j_x: &Matrix) -> Result<()> {
    if j_x.rows() > j_x.cols() {
        return Err(StiffnessError::DimensionMismatch(format!(
            "task Jacobian {:?} has more rows than joints",
            j_x.shape()
        )));
    }
    let sigma_min = min_singular_value(j_x);
    if !(sigma_min > RANK_EPS) {
        return Err(StiffnessError::RankDeficientJacobian { sigma_min });
    }
    Ok(())
}

/// General symmetric solution of `J_x·C_q·J_xᵀ = C_x`:
/// `C_q = J♯·C_x·J♯ᵀ + (Y − J♯·J_x·Y·J_xᵀ·J♯ᵀ)`.
pub fn joint_compliance_from_task(j_x: &Matrix, cx: &SymMatrix, y_null: &SymMatrix) -> Result<SymMatrix> {
    let (m, n) = j_x.shape();
    if cx.dim() != m || y_null.dim() != n {
        return Err(StiffnessError::DimensionMismatch(format!(
            "J_x is {m}x{n}, C_x is {0}x{0}, Y is {1}x{1}",
            cx.dim(),
            y_null.dim()
        )));
    }
    check_full_row_rank(j_x)?;
    cholesky(cx)?;
    let jp = pinv(j_x, DEFAULT_RANK_TOL);
    let jpt = jp.transpose();
    let task = jp.matmul(cx.matrix()).matmul(&jpt);
    let proj = jp.matmul(j_x);
    let null = y_null
        .matrix()
        .sub(&proj.matmul(y_null.matrix()).matmul(&proj.transpose()));
    Ok(SymMatrix::new(task.add(&null))?)
}

/// Task stiffness seen at the task point for a joint stiffness `K_q`:
/// `(J_x·K_q⁻¹·J_xᵀ)⁻¹`.
pub fn induced_task_stiffness(j_x: &Matrix, kq: &SymMatrix) -> Result<SymMatrix> {
    if j_x.cols() != kq.dim() {
        return Err(StiffnessError::DimensionMismatch(format!(
            "J_x has {} columns, K_q is {}x{}",
            j_x.cols(),
            kq.dim(),
            kq.dim()
        )));
    }
    let cq = cholesky(kq)?.solve(&Matrix::identity(kq.dim()));
    let cx = SymMatrix::new(j_x.matmul(&cq).matmul(&j_x.transpose()))?;
    Ok(cx.spd_inverse()?)
}

/// Smallest eigenvalue of `J_x·C_q^max·J_xᵀ − C_x^max`; the budget is
/// compatible when it is `>= -COMPATIBILITY_TOL`.
pub fn compatibility_margin(j_x: &Matrix, kq_max: &SymMatrix, kx_max: &SymMatrix) -> Result<f64> {
    if j_x.shape() != (kx_max.dim(), kq_max.dim()) {
        return Err(StiffnessError::DimensionMismatch(format!(
            "J_x {:?} against K_x^max {} and K_q^max {}",
            j_x.shape(),
            kx_max.dim(),
            kq_max.dim()
        )));
    }
    let cq = cholesky(kq_max)?.solve(&Matrix::identity(kq_max.dim()));
    let cx_max = kx_max.spd_inverse()?;
    let mapped = SymMatrix::new(j_x.matmul(&cq).matmul(&j_x.transpose()))?;
    let diff = mapped.sub(&cx_max);
    match min_eig_sym(&diff, 100_000, 1e-14) {
        Ok(v) => Ok(v),
        Err(LinalgError::NotConverged { estimate, .. }) => Ok(estimate),
        Err(e) => Err(e.into()),
    }
}

pub fn check_compatibility(j_x: &Matrix, kq_max: &SymMatrix, kx_max: &SymMatrix) -> Result<()> {
    let margin = compatibility_margin(j_x, kq_max, kx_max)?;
    if margin < -COMPATIBILITY_TOL {
        return Err(StiffnessError::IncompatibleBudget { margin });
    }
    Ok(())
}

/// Task bound, derived joint budget and its whitening factor at one posture.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessBudget {
    kx_max: SymMatrix,
    k_null: f64,
    kq_max: SymMatrix,
    whitening: Cholesky,
    config_q: Vec<f64>,
}

impl StiffnessBudget {
    pub fn kx_max(&self) -> &SymMatrix {
        &self.kx_max
    }

    pub fn k_null(&self) -> f64 {
        self.k_null
    }

    pub fn kq_max(&self) -> &SymMatrix {
        &self.kq_max
    }

    /// Lower-triangular `L` with `K_q^max = L·Lᵀ`.
    pub fn whitening_l(&self) -> &Matrix {
        self.whitening.factor()
    }

    pub fn config_q(&self) -> &[f64] {
        &self.config_q
    }

    pub fn dim(&self) -> usize {
        self.kq_max.dim()
    }

    /// A budget given directly in joint space (no task chain). Used when a
    /// joint budget is specified by hand, e.g. `K_q^max = K_p²`.
    pub fn from_joint_budget(kq_max: SymMatrix, config_q: Vec<f64>) -> Result<Self> {
        if config_q.len() != kq_max.dim() {
            return Err(StiffnessError::DimensionMismatch(
                "configuration length differs from budget dimension".into(),
            ));
        }
        let whitening = cholesky(&kq_max)?;
        Ok(Self {
            kx_max: SymMatrix::identity(0),
            k_null: f64::NAN,
            kq_max,
            whitening,
            config_q,
        })
    }

    /// True once the arm has moved far enough from `config_q` that `J_x`
    /// (and with it the budget) should be recomputed.
    pub fn needs_rebuild(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(&self.config_q)
            .any(|(a, b)| (a - b).abs() > REBUILD_DISTANCE)
    }
}

/// Builds the joint budget from a task bound at the posture `config_q` whose
/// task Jacobian is `j_x`.
pub fn build_budget(
    j_x: &Matrix,
    kx_max: &SymMatrix,
    k_null: f64,
    config_q: &[f64],
) -> Result<StiffnessBudget> {
    let (m, n) = j_x.shape();
    if kx_max.dim() != m || config_q.len() != n {
        return Err(StiffnessError::DimensionMismatch(format!(
            "J_x is {m}x{n}, K_x^max is {0}x{0}, q has {1} entries",
            kx_max.dim(),
            config_q.len()
        )));
    }
    if !(k_null > 0.0 && k_null.is_finite()) {
        return Err(StiffnessError::InvalidBudget(format!(
            "null-space stiffness must be positive, got {k_null}"
        )));
    }
    if !kx_max.is_diagonal() {
        return Err(StiffnessError::InvalidBudget(
            "task stiffness bound must be diagonal".into(),
        ));
    }
    let cx_max = kx_max.spd_inverse()?;
    let y = SymMatrix::identity(n).scale(1.0 / k_null);
    let cq_max = joint_compliance_from_task(j_x, &cx_max, &y)?;
    let kq_max = cq_max.spd_inverse()?;
    let whitening = cholesky(&kq_max)?;
    check_compatibility(j_x, &kq_max, kx_max)?;
    let recon = whitening.reconstruct().sub(kq_max.matrix()).frobenius_norm();
    debug_assert!(recon <= 1e-10 * kq_max.matrix().frobenius_norm().max(1.0));
    Ok(StiffnessBudget {
        kx_max: kx_max.clone(),
        k_null,
        kq_max,
        whitening,
        config_q: config_q.to_vec(),
    })
}

/// `A_θ = L⁻¹·K_p·(I − α·J_π)` by forward substitution.
pub fn whitened_quantity(
    budget: &StiffnessBudget,
    gains: &LowLevelGains,
    j_pi_q: &Matrix,
) -> Result<Matrix> {
    if budget.dim() != gains.dim() {
        return Err(StiffnessError::DimensionMismatch(format!(
            "budget is {0}x{0}, gains have {1} joints",
            budget.dim(),
            gains.dim()
        )));
    }
    let k_eq = equivalent_joint_stiffness(gains, j_pi_q)?;
    Ok(solve_lower_triangular(budget.whitening_l(), &k_eq))
}

/// `L⁻¹·K_p`, the constant part of [`whitened_quantity`].
pub fn whitened_gains(budget: &StiffnessBudget, gains: &LowLevelGains) -> Matrix {
    solve_lower_triangular(budget.whitening_l(), gains.kp_matrix().matrix())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub samples: Vec<AuditSample>,
    pub violation_rate: f64,
    /// Largest `lhs − rhs` over violated samples (0 when none).
    pub max_violation: f64,
    /// Largest `(lhs − rhs)/rhs` over violated samples (0 when none).
    pub max_relative_violation: f64,
}

/// Compares `δqᵀ·sym(K_eq)·δq` against `δqᵀ·K_q^max·δq` along each direction.
pub fn directional_budget_audit(
    k_eq: &Matrix,
    kq_max: &SymMatrix,
    directions: &[Vec<f64>],
) -> Result<AuditResult> {
    let n = kq_max.dim();
    if k_eq.shape() != (n, n) {
        return Err(StiffnessError::DimensionMismatch(format!(
            "K_eq is {:?}, budget is {n}x{n}",
            k_eq.shape()
        )));
    }
    let sym = k_eq.symmetric_part();
    let mut samples = Vec::with_capacity(directions.len());
    let mut max_violation: f64 = 0.0;
    let mut max_relative: f64 = 0.0;
    for d in directions {
        if d.len() != n {
            return Err(StiffnessError::DimensionMismatch(format!(
                "direction has {} entries, expected {n}",
                d.len()
            )));
        }
        let lhs = sym.quad_form(d);
        let rhs = kq_max.quad_form(d);
        let violated = lhs > rhs + AUDIT_EPS;
        if violated {
            max_violation = max_violation.max(lhs - rhs);
            if rhs > 0.0 {
                max_relative = max_relative.max((lhs - rhs) / rhs);
            } else {
                max_relative = f64::INFINITY;
            }
        }
        samples.push(AuditSample { lhs, rhs, violated });
    }
    let violation_rate = if samples.is_empty() {
        0.0
    } else {
        samples.iter().filter(|s| s.violated).count() as f64 / samples.len() as f64
    };
    Ok(AuditResult {
        samples,
        violation_rate,
        max_violation,
        max_relative_violation: max_relative,
    })
}

/// Uniformly distributed unit vectors in `R^n`.
pub fn random_unit_directions<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = crate::linalg::norm(&v);
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// `A ⪯ B` re-exported alongside the budget helpers for callers that only use this module.
pub fn within_budget(a: &SymMatrix, b: &SymMatrix, tol: f64) -> bool {
    psd_leq(a, b, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains(kp: f64, alpha: f64) -> LowLevelGains {
        LowLevelGains::uniform(2, kp, 0.0, alpha).unwrap()
    }

    #[test]
    fn constant_policy_gives_pd_stiffness() {
        let k = equivalent_joint_stiffness(&gains(100.0, 0.25), &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(k, Matrix::from_diag(&[100.0, 100.0]));
    }

    #[test]
    fn identity_policy_jacobian_softens() {
        let k = equivalent_joint_stiffness(&gains(100.0, 0.25), &Matrix::identity(2)).unwrap();
        assert_eq!(k, Matrix::from_diag(&[75.0, 75.0]));
    }

    #[test]
    fn equivalent_stiffness_checks_shape() {
        let err = equivalent_joint_stiffness(&gains(100.0, 0.25), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, StiffnessError::DimensionMismatch(_)));
    }

    #[test]
    fn identity_jacobian_compliance_passthrough() {
        let cx = SymMatrix::from_diag(&[0.005, 0.001]);
        let cq = joint_compliance_from_task(&Matrix::identity(2), &cx, &SymMatrix::from_diag(&[0.0, 0.0])).unwrap();
        assert!(cq.matrix().sub(cx.matrix()).max_abs() < 1e-15);
    }

    #[test]
    fn square_jacobian_reduces_to_inverse() {
        let j = Matrix::from_rows(&[[0.5, 0.2], [-0.1, 0.4]]);
        let cx = SymMatrix::new(Matrix::from_rows(&[[0.004, 0.001], [0.001, 0.003]])).unwrap();
        let cq = joint_compliance_from_task(&j, &cx, &SymMatrix::from_diag(&[0.0, 0.0])).unwrap();
        let det = 0.5 * 0.4 + 0.1 * 0.2;
        let jinv = Matrix::from_rows(&[[0.4 / det, -0.2 / det], [0.1 / det, 0.5 / det]]);
        let expected = jinv.matmul(cx.matrix()).matmul(&jinv.transpose());
        assert!(cq.matrix().sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn singular_task_jacobian_is_rejected() {
        let j = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]);
        let err = joint_compliance_from_task(&j, &SymMatrix::identity(2), &SymMatrix::identity(3)).unwrap_err();
        assert!(matches!(err, StiffnessError::RankDeficientJacobian { .. }));
    }

    #[test]
    fn identity_chain_budget() {
        let b = build_budget(
            &Matrix::identity(2),
            &SymMatrix::from_diag(&[200.0, 200.0]),
            50.0,
            &[0.0, 0.0],
        )
        .unwrap();
        assert!(b.kq_max().matrix().sub(&Matrix::from_diag(&[200.0, 200.0])).max_abs() < 1e-10);
    }

    #[test]
    fn budget_rejects_non_diagonal_task_bound() {
        let kx = SymMatrix::new(Matrix::from_rows(&[[200.0, 10.0], [10.0, 200.0]])).unwrap();
        let err = build_budget(&Matrix::identity(2), &kx, 50.0, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, StiffnessError::InvalidBudget(_)));
    }

    #[test]
    fn whitened_identity_and_constant_cases() {
        let b = StiffnessBudget::from_joint_budget(SymMatrix::identity(2), vec![0.0, 0.0]).unwrap();
        let g = LowLevelGains::uniform(2, 1.0, 0.0, 1e-300).unwrap();
        let a = whitened_quantity(&b, &g, &Matrix::from_rows(&[[3.0, 1.0], [-2.0, 5.0]])).unwrap();
        assert!(a.sub(&Matrix::identity(2)).max_abs() < 1e-12);

        let kq = SymMatrix::new(Matrix::from_rows(&[[400.0, 30.0], [30.0, 150.0]])).unwrap();
        let b = StiffnessBudget::from_joint_budget(kq, vec![0.0, 0.0]).unwrap();
        let g = gains(100.0, 0.25);
        let a = whitened_quantity(&b, &g, &Matrix::zeros(2, 2)).unwrap();
        assert!(a.sub(&whitened_gains(&b, &g)).max_abs() < 1e-15);
    }

    #[test]
    fn audit_examples() {
        let kq = SymMatrix::from_diag(&[2.0, 2.0]);
        let dirs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let same = directional_budget_audit(kq.matrix(), &kq, &dirs).unwrap();
        assert_eq!(same.violation_rate, 0.0);
        let double = directional_budget_audit(&kq.matrix().scale(2.0), &kq, &dirs).unwrap();
        assert_eq!(double.violation_rate, 1.0);
        let mixed = directional_budget_audit(&Matrix::from_diag(&[1.0, 3.0]), &kq, &dirs).unwrap();
        assert!(!mixed.samples[0].violated);
        assert!(mixed.samples[1].violated);
        assert_eq!(mixed.violation_rate, 0.5);
        assert!((mixed.max_violation - 1.0).abs() < 1e-15);
        assert!((mixed.max_relative_violation - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rebuild_cadence() {
        let b = StiffnessBudget::from_joint_budget(SymMatrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert!(!b.needs_rebuild(&[0.05, -0.1]));
        assert!(b.needs_rebuild(&[0.0, 0.11]));
    }

    #[test]
    fn gains_validation() {
        assert!(LowLevelGains::new(vec![1.0], vec![0.0, 0.0], 0.25).is_err());
        assert!(LowLevelGains::new(vec![0.0], vec![0.0], 0.25).is_err());
        assert!(LowLevelGains::new(vec![1.0], vec![-1.0], 0.25).is_err());
        assert!(LowLevelGains::new(vec![1.0], vec![1.0], 0.0).is_err());
        let g: LowLevelGains = serde_json::from_str(r#"{"kp":[100.0],"kd":[5.0]}"#).unwrap();
        assert_eq!(g.action_scale(), 0.25);
    }
}
