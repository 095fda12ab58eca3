//! Test-only oracles: brute-force decompositions and finite differences.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silc::linalg::{Matrix, SymMatrix};
use silc::policy::{Activation, JacobianPenalty, Mlp, MlpPolicy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// `A·Aᵀ + shift·I` for a random square `A`.
pub fn random_spd(n: usize, shift: f64, rng: &mut impl Rng) -> SymMatrix {
    let a = random_matrix(n, n, rng);
    SymMatrix::new(a.matmul(&a.transpose()).add(&Matrix::identity(n).scale(shift))).unwrap()
}

pub fn random_symmetric(n: usize, rng: &mut impl Rng) -> SymMatrix {
    SymMatrix::new(random_matrix(n, n, rng)).unwrap()
}

fn to_rows(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

/// Singular values in decreasing order by Hestenes one-sided Jacobi on the
/// columns of `A` (or `Aᵀ` when `A` is wide).
pub fn oracle_singular_values(a: &Matrix) -> Vec<f64> {
    let m = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| m.column(j)).collect();
    let n = cols.len();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let a_pp: f64 = cols[p].iter().map(|x| x * x).sum();
                let a_qq: f64 = cols[q].iter().map(|x| x * x).sum();
                let a_pq: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if a_pq == 0.0 {
                    continue;
                }
                off = off.max(a_pq.abs() / (a_pp * a_qq).sqrt().max(f64::MIN_POSITIVE));
                let theta = 0.5 * (2.0 * a_pq).atan2(a_pp - a_qq);
                let (s, c) = theta.sin_cos();
                for k in 0..cols[p].len() {
                    let x = cols[p][k];
                    let y = cols[q][k];
                    cols[p][k] = c * x + s * y;
                    cols[q][k] = -s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// All eigenvalues of a symmetric matrix, increasing, by cyclic two-sided
/// Jacobi rotations.
pub fn oracle_eigenvalues(s: &SymMatrix) -> Vec<f64> {
    let mut a = to_rows(s.matrix());
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
                let (sn, c) = theta.sin_cos();
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Central-difference Jacobian of `f` at `x` (rows = outputs).
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Matrix {
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central difference of a scalar function along coordinate `k`.
pub fn fd_partial(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[k] = x[k] + h;
    let fp = f(&xp);
    xp[k] = x[k] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_entry_err(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| rel_err(*x, *y, floor))
        .fold(0.0, f64::max)
}

/// Outcome of the closed-loop torque-response oracle on one (policy, state) pair.
pub struct TorqueResponse {
    /// Worst column-wise relative error of `−δτ/δq` against `K_eq` at step `h`.
    pub column_rel_err: f64,
    /// First-order remainder `‖τ(q + h·e_i) − τ(q) + K_eq·h·e_i‖` summed over columns.
    pub residual: f64,
    /// The same remainder at step `h/2`.
    pub residual_half: f64,
}

fn observation_at(
    model: &silc::sim::ArmModel,
    layout: &silc::policy::ObservationLayout,
    older: &[f64],
    state: &silc::sim::SimState,
    command: [f64; 2],
) -> Vec<f64> {
    let mut obs = silc::sim::observation_frame(model, layout, state, command);
    obs.extend_from_slice(older);
    obs
}

fn closed_loop_torque(
    model: &silc::sim::ArmModel,
    layout: &silc::policy::ObservationLayout,
    policy: &silc::policy::MlpPolicy,
    older: &[f64],
    state: &silc::sim::SimState,
    command: [f64; 2],
) -> Vec<f64> {
    let obs = observation_at(model, layout, older, state, command);
    let action = policy.forward(&obs).unwrap();
    let q_des = silc::sim::desired_posture(model, &action);
    let tau = silc::sim::pd_torque(model, &state.q, &state.qd, &q_des);
    assert!(
        tau.iter().all(|t| t.abs() < model.tau_max),
        "torque saturated, oracle needs the unclamped servo"
    );
    tau
}

/// Random tanh policy and random arm state, perturbed joint by joint.
///
/// Only the newest frame sees the perturbed `q`; older frames are history.
pub fn torque_response_oracle(seed: u64, h: f64) -> TorqueResponse {
    use silc::policy::{Activation, Mlp, MlpPolicy, ObservationLayout};
    use silc::sim::{ArmModel, SimState};
    use silc::stiffness::equivalent_joint_stiffness;

    let model = ArmModel::planar3();
    let layout = ObservationLayout::new(3);
    let n = model.n_links();
    let mut r = rng(seed);
    let mean = Mlp::random(vec![layout.obs_dim(), 16, 16, n], Activation::Tanh, 0.5, &mut r).unwrap();
    let policy = MlpPolicy::new(mean, vec![-1.0; n]).unwrap();
    let state = SimState {
        q: model.default_posture.iter().map(|q| q + r.random_range(-0.2..0.2)).collect(),
        qd: (0..n).map(|_| r.random_range(-0.5..0.5)).collect(),
        t: r.random_range(0.0..2.0),
    };
    let command = [0.37 + r.random_range(-0.05..0.05), r.random_range(-0.05..0.05)];
    let older: Vec<f64> = (0..layout.obs_dim() - layout.frame_width())
        .map(|_| r.random_range(-0.5..0.5))
        .collect();

    let obs = observation_at(&model, &layout, &older, &state, command);
    let j_pi = policy.q_block_jacobian(&obs, &layout).unwrap();
    let k_eq = equivalent_joint_stiffness(&model.gains, &j_pi).unwrap();
    let tau0 = closed_loop_torque(&model, &layout, &policy, &older, &state, command);

    let remainder = |i: usize, step: f64| -> Vec<f64> {
        let mut s = state.clone();
        s.q[i] += step;
        let tau = closed_loop_torque(&model, &layout, &policy, &older, &s, command);
        (0..n).map(|k| tau[k] - tau0[k] + k_eq[(k, i)] * step).collect()
    };

    let mut out = TorqueResponse {
        column_rel_err: 0.0,
        residual: 0.0,
        residual_half: 0.0,
    };
    for i in 0..n {
        let rem = remainder(i, h);
        let col: Vec<f64> = (0..n).map(|k| k_eq[(k, i)]).collect();
        let err = silc::linalg::norm(&rem) / h / silc::linalg::norm(&col);
        out.column_rel_err = out.column_rel_err.max(err);
        out.residual += silc::linalg::norm(&rem);
        out.residual_half += silc::linalg::norm(&remainder(i, h / 2.0));
    }
    out
}

pub fn random_net(dims: &[usize], act: Activation, seed: u64) -> MlpPolicy {
    let mut r = rng(seed);
    let mut mean = Mlp::random(dims.to_vec(), act, 1.0, &mut r).unwrap();
    for p in mean.params_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    MlpPolicy::new(mean, vec![-1.0; *dims.last().unwrap()]).unwrap()
}

pub fn random_obs(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn mean_penalty<P: JacobianPenalty>(mean: &Mlp, batch: &[Vec<f64>], pen: &P) -> f64 {
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(i, o)| pen.evaluate(i, &mean.jacobian_columns(o, pen.columns()).unwrap()).value)
        .sum();
    total / batch.len() as f64
}

/// Checks the analytic penalty gradient against central differences on 10
/// random parameters. Returns the worst relative error.
pub fn gradient_check<P: JacobianPenalty>(net: &MlpPolicy, batch: &[Vec<f64>], pen: &P, seed: u64) -> f64 {
    let refs: Vec<&[f64]> = batch.iter().map(|o| o.as_slice()).collect();
    let g = net.penalty_param_gradient(&refs, pen, 1.0).unwrap();
    assert_eq!(g.kinks, 0);
    assert!(g.mean_penalty > 0.0, "hinge inactive");
    let scale = g.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k = r.random_range(0..net.mean.num_params());
        let f = |p: &[f64]| {
            let m = Mlp::from_params(net.mean.layer_dims().to_vec(), net.mean.activation(), p.to_vec()).unwrap();
            mean_penalty(&m, batch, pen)
        };
        let fd = fd_partial(f, net.mean.params(), k, 1e-6);
        worst = worst.max(rel_err(g.grad[k], fd, 1e-3 * scale));
    }
    worst
}
