mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use silc::config::{BudgetMode, BudgetSpec};
use silc::linalg::{cholesky, psd_leq, spectral_norm, Matrix, SymMatrix};
use silc::sim::{task_jacobian, ArmModel};
use silc::stiffness::*;

fn gains2(alpha: f64) -> LowLevelGains {
    LowLevelGains::uniform(2, 100.0, 5.0, alpha).unwrap()
}

fn full_row_rank(m: usize, n: usize, r: &mut impl Rng) -> Matrix {
    loop {
        let j = random_matrix(m, n, r);
        if oracle_singular_values(&j)[m - 1] > 0.2 {
            return j;
        }
    }
}

fn random_diag_spd(m: usize, r: &mut impl Rng) -> SymMatrix {
    let d: Vec<f64> = (0..m).map(|_| r.random_range(50.0..2000.0)).collect();
    SymMatrix::from_diag(&d)
}

#[test]
fn equivalent_stiffness_examples() {
    let k = equivalent_joint_stiffness(&gains2(0.25), &Matrix::zeros(2, 2)).unwrap();
    assert_eq!(k, Matrix::identity(2).scale(100.0));
    let k = equivalent_joint_stiffness(&gains2(0.25), &Matrix::identity(2)).unwrap();
    assert_eq!(k, Matrix::identity(2).scale(75.0));
    assert!(matches!(
        equivalent_joint_stiffness(&gains2(0.25), &Matrix::zeros(3, 2)),
        Err(StiffnessError::DimensionMismatch(_))
    ));
}

#[test]
fn equivalent_stiffness_keeps_asymmetry() {
    let j = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
    let k = equivalent_joint_stiffness(&gains2(0.25), &j).unwrap();
    assert_eq!(k[(0, 1)], -25.0);
    assert_eq!(k[(1, 0)], 0.0);
    let expected = (2.0f64 * 12.5 * 12.5).sqrt();
    assert!((antisymmetric_residual(&k) - expected).abs() < 1e-12);
}

#[test]
fn torque_response_matches_equivalent_stiffness() {
    for seed in 0..10 {
        let r = torque_response_oracle(seed, 1e-4);
        assert!(r.column_rel_err < 1e-2, "seed {seed}: {}", r.column_rel_err);
        let ratio = r.residual_half / r.residual;
        assert!((0.15..0.35).contains(&ratio), "seed {seed}: decay ratio {ratio}");
    }
}

#[test]
fn compliance_mapping_examples() {
    let cx = SymMatrix::from_diag(&[0.005, 0.001]);
    let cq = joint_compliance_from_task(&Matrix::identity(2), &cx, &SymMatrix::from_diag(&[0.0, 0.0])).unwrap();
    assert!(cq.matrix().sub(cx.matrix()).max_abs() < 1e-15);

    let mut r = rng(11);
    for _ in 0..20 {
        let j = full_row_rank(2, 3, &mut r);
        let cx = random_spd(2, 0.01, &mut r).scale(0.01);
        let cq = joint_compliance_from_task(&j, &cx, &SymMatrix::identity(3).scale(0.02)).unwrap();
        let back = j.matmul(cq.matrix()).matmul(&j.transpose());
        let err = back.sub(cx.matrix()).max_abs() / cx.matrix().max_abs();
        assert!(err < 1e-8, "{err}");
    }

    // Square invertible Jacobian with Y = 0 reduces to J⁻¹·C_x·J⁻ᵀ.
    let j = Matrix::from_rows(&[[2.0, 1.0], [0.5, 3.0]]);
    let det = 2.0 * 3.0 - 0.5;
    let inv = Matrix::from_rows(&[[3.0 / det, -1.0 / det], [-0.5 / det, 2.0 / det]]);
    let cx = SymMatrix::new(Matrix::from_rows(&[[0.004, 0.001], [0.001, 0.002]])).unwrap();
    let cq = joint_compliance_from_task(&j, &cx, &SymMatrix::from_diag(&[0.0, 0.0])).unwrap();
    let expected = inv.matmul(cx.matrix()).matmul(&inv.transpose());
    assert!(cq.matrix().sub(&expected).max_abs() < 1e-14);
}

#[test]
fn compliance_mapping_rejects_singular_jacobian() {
    let j = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]);
    let r = joint_compliance_from_task(&j, &SymMatrix::identity(2), &SymMatrix::identity(3));
    assert!(matches!(r, Err(StiffnessError::RankDeficientJacobian { .. })));
}

#[test]
fn budget_examples() {
    let kx = SymMatrix::from_diag(&[200.0, 200.0]);
    let b = build_budget(&Matrix::identity(2), &kx, 7.0, &[0.0, 0.0]).unwrap();
    assert!(b.kq_max().matrix().sub(kx.matrix()).max_abs() < 1e-10);

    let model = ArmModel::planar3();
    let q0 = model.default_posture.clone();
    let b = BudgetSpec::preset(BudgetMode::Compliance).build(&model, &q0).unwrap();
    let jx = task_jacobian(&model, &q0);
    assert_eq!(b.k_null(), 50.0);
    let recon = b.whitening_l().matmul(&b.whitening_l().transpose());
    assert!(recon.sub(b.kq_max().matrix()).max_abs() <= 1e-10 * b.kq_max().matrix().max_abs());
    check_compatibility(&jx, b.kq_max(), b.kx_max()).unwrap();
    let induced = induced_task_stiffness(&jx, b.kq_max()).unwrap();
    assert!(psd_leq(&induced, b.kx_max(), 1e-8));

    assert!(matches!(
        build_budget(&Matrix::identity(2), &kx, 0.0, &[0.0, 0.0]),
        Err(StiffnessError::InvalidBudget(_))
    ));
    let full = SymMatrix::new(Matrix::from_rows(&[[200.0, 10.0], [10.0, 200.0]])).unwrap();
    assert!(matches!(
        build_budget(&Matrix::identity(2), &full, 1.0, &[0.0, 0.0]),
        Err(StiffnessError::InvalidBudget(_))
    ));
}

#[test]
fn sufficiency_chain_and_corruption() {
    let mut r = rng(12);
    for trial in 0..100 {
        let n = 2 + trial % 4;
        let j = full_row_rank(2, n, &mut r);
        let kx = random_diag_spd(2, &mut r);
        let k_null = r.random_range(5.0..500.0);
        let q = vec![0.0; n];
        let b = build_budget(&j, &kx, k_null, &q).unwrap();
        let induced = induced_task_stiffness(&j, b.kq_max()).unwrap();
        assert!(psd_leq(&induced, &kx, 1e-8), "trial {trial}");
        let corrupted = b.kq_max().scale(2.0);
        assert!(
            matches!(
                check_compatibility(&j, &corrupted, &kx),
                Err(StiffnessError::IncompatibleBudget { .. })
            ),
            "trial {trial}: corrupted budget accepted"
        );
    }
}

#[test]
fn whitened_quantity_examples() {
    let id = SymMatrix::identity(2);
    let unit = StiffnessBudget::from_joint_budget(id.clone(), vec![0.0; 2]).unwrap();
    let g = LowLevelGains::uniform(2, 1.0, 0.0, 1e-300).unwrap();
    let a = whitened_quantity(&unit, &g, &Matrix::from_rows(&[[5.0, -2.0], [1.0, 3.0]])).unwrap();
    assert!(a.sub(&Matrix::identity(2)).max_abs() < 1e-12);

    let kq = SymMatrix::new(Matrix::from_rows(&[[400.0, 50.0], [50.0, 300.0]])).unwrap();
    let b = StiffnessBudget::from_joint_budget(kq, vec![0.0; 2]).unwrap();
    let g = gains2(0.25);
    let a = whitened_quantity(&b, &g, &Matrix::zeros(2, 2)).unwrap();
    let l = b.whitening_l();
    assert!(l.matmul(&a).sub(g.kp_matrix().matrix()).max_abs() < 1e-10);
    assert_eq!(a, whitened_gains(&b, &g));

    // K_q^max = K_p² makes the constant policy sit exactly on the boundary.
    let kp2 = SymMatrix::from_diag(&[1e4, 1e4]);
    let b = StiffnessBudget::from_joint_budget(kp2, vec![0.0; 2]).unwrap();
    let a = whitened_quantity(&b, &g, &Matrix::zeros(2, 2)).unwrap();
    assert!(a.sub(&Matrix::identity(2)).max_abs() < 1e-14);
    assert!((spectral_norm(&a, 1000, 1e-14).unwrap() - 1.0).abs() < 1e-12);

    let three = StiffnessBudget::from_joint_budget(SymMatrix::identity(3), vec![0.0; 3]).unwrap();
    assert!(matches!(
        whitened_quantity(&three, &g, &Matrix::zeros(2, 2)),
        Err(StiffnessError::DimensionMismatch(_))
    ));
}

#[test]
fn audit_examples() {
    let kq = SymMatrix::from_diag(&[2.0, 2.0]);
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let a = directional_budget_audit(kq.matrix(), &kq, &e).unwrap();
    assert_eq!(a.violation_rate, 0.0);
    let a = directional_budget_audit(&kq.matrix().scale(2.0), &kq, &e).unwrap();
    assert_eq!(a.violation_rate, 1.0);
    let a = directional_budget_audit(&Matrix::from_diag(&[1.0, 3.0]), &kq, &e).unwrap();
    assert_eq!(a.violation_rate, 0.5);
    assert!(!a.samples[0].violated && a.samples[1].violated);
    assert_eq!((a.samples[1].lhs, a.samples[1].rhs), (3.0, 2.0));
    assert_eq!(a.max_violation, 1.0);
    assert_eq!(a.max_relative_violation, 0.5);
}

#[test]
fn random_directions_are_unit() {
    let mut r = rng(13);
    for d in random_unit_directions(5, 50, &mut r) {
        assert!((silc::linalg::norm(&d) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn needs_rebuild_uses_infinity_norm() {
    let b = StiffnessBudget::from_joint_budget(SymMatrix::identity(2), vec![0.0, 0.0]).unwrap();
    assert!(!b.needs_rebuild(&[0.1, -0.1]));
    assert!(b.needs_rebuild(&[0.0, 0.1001]));
}

fn mat(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |d| Matrix::new(n, n, d).unwrap())
}

proptest! {
    #[test]
    fn whitened_norm_bounds_budget_norm(j in mat(3), dq in prop::collection::vec(-1.0f64..1.0, 3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let kq = random_spd(3, 50.0, &mut r).scale(100.0);
        let b = StiffnessBudget::from_joint_budget(kq.clone(), vec![0.0; 3]).unwrap();
        let g = LowLevelGains::uniform(3, 100.0, 5.0, 0.25).unwrap();
        let a = whitened_quantity(&b, &g, &j).unwrap();
        let a_norm = oracle_singular_values(&a)[0];
        let k_eq = equivalent_joint_stiffness(&g, &j).unwrap();
        let v = k_eq.matvec(&dq);
        let cq = cholesky(&kq).unwrap().solve(&Matrix::identity(3));
        let lhs = SymMatrix::new(cq).unwrap().quad_form(&v).sqrt();
        let rhs = silc::linalg::norm(&dq) * a_norm;
        prop_assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-12, "{} > {}", lhs, rhs);
    }

    #[test]
    fn audit_ignores_antisymmetric_part(k in mat(3), w in mat(3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let kq = random_spd(3, 0.5, &mut r);
        let dirs = random_unit_directions(3, 16, &mut r);
        let skew = w.sub(&w.transpose());
        let a = directional_budget_audit(&k, &kq, &dirs).unwrap();
        let b = directional_budget_audit(&k.add(&skew), &kq, &dirs).unwrap();
        prop_assert_eq!(a.violation_rate, b.violation_rate);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            prop_assert!((x.lhs - y.lhs).abs() <= 1e-12 * (1.0 + x.lhs.abs()));
            prop_assert_eq!(x.rhs, y.rhs);
        }
    }
}
