//! Planar fixed-base N-link arm with joint PD servos.
//!
//! Links are uniform rods hinged at their proximal end. Joint angles are
//! relative; link `i` points along the absolute angle `θ_i = q_0 + … + q_i`.
//! Gravity acts along −y. The policy runs at [`POLICY_HZ`] and the dynamics at
//! [`SUBSTEPS`] times that rate.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, Matrix, SymMatrix};
use crate::policy::{MlpPolicy, ObservationLayout, PolicyError};
use crate::stiffness::LowLevelGains;

pub const POLICY_HZ: f64 = 50.0;
pub const SUBSTEPS: usize = 4;
pub const POLICY_DT: f64 = 1.0 / POLICY_HZ;
pub const SIM_DT: f64 = POLICY_DT / SUBSTEPS as f64;
pub const SUPPORT_MODE: &str = "single";
/// Period of the phase clock fed to the policy (s).
pub const PHASE_PERIOD: f64 = 1.0;
/// Radius of the disc commands are sampled from (m).
pub const COMMAND_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("non-finite state at t = {t:.4} s")]
    NonFiniteState { t: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("rollout I/O: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    /// Inertia of each link about its own centre of mass (kg·m²).
    pub link_inertias: Vec<f64>,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "default_damping")]
    pub joint_damping: f64,
    pub gains: LowLevelGains,
    pub joint_limits: Vec<[f64; 2]>,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    pub default_posture: Vec<f64>,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_damping() -> f64 {
    0.1
}

fn default_tau_max() -> f64 {
    50.0
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::planar3()
    }
}

impl ArmModel {
    /// Three-link testbed used throughout the experiments.
    pub fn planar3() -> Self {
        let lengths = vec![0.25, 0.25, 0.12];
        let masses = vec![1.5, 1.0, 0.5];
        Self::uniform_rods(
            lengths,
            masses,
            LowLevelGains::uniform(3, 100.0, 5.0, 0.25).expect("valid default gains"),
            vec![
                std::f64::consts::FRAC_PI_3,
                -2.0 * std::f64::consts::FRAC_PI_3,
                std::f64::consts::FRAC_PI_3,
            ],
        )
    }

    /// Links as uniform rods (`I = m·l²/12`), generous symmetric joint limits.
    pub fn uniform_rods(
        link_lengths: Vec<f64>,
        link_masses: Vec<f64>,
        gains: LowLevelGains,
        default_posture: Vec<f64>,
    ) -> Self {
        let link_inertias = link_lengths
            .iter()
            .zip(&link_masses)
            .map(|(l, m)| m * l * l / 12.0)
            .collect();
        let n = link_lengths.len();
        Self {
            link_lengths,
            link_masses,
            link_inertias,
            gravity: default_gravity(),
            joint_damping: default_damping(),
            gains,
            joint_limits: vec![[-2.8, 2.8]; n],
            tau_max: default_tau_max(),
            default_posture,
        }
    }

    pub fn n_links(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_links();
        if n == 0 {
            return Err(SimError::InvalidModel("arm needs at least one link".into()));
        }
        let lens = [
            ("link_masses", self.link_masses.len()),
            ("link_inertias", self.link_inertias.len()),
            ("joint_limits", self.joint_limits.len()),
            ("default_posture", self.default_posture.len()),
            ("gains", self.gains.dim()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(SimError::InvalidModel(format!(
                    "{name} has {len} entries, expected {n}"
                )));
            }
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive(&self.link_lengths) || !positive(&self.link_masses) || !positive(&self.link_inertias) {
            return Err(SimError::InvalidModel(
                "lengths, masses and inertias must be positive".into(),
            ));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(SimError::InvalidModel("joint limits must be ordered".into()));
        }
        if !(self.tau_max > 0.0) || !(self.joint_damping >= 0.0) || !self.gravity.is_finite() {
            return Err(SimError::InvalidModel(
                "tau_max must be positive and damping non-negative".into(),
            ));
        }
        Ok(())
    }

    /// End-effector position at the default posture.
    pub fn nominal_point(&self) -> [f64; 2] {
        fk(self, &self.default_posture)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub t: f64,
}

impl SimState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Impulse,
    Constant,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceProfile {
    pub kind: DisturbanceKind,
    /// Force at the end effector in the base frame (N).
    #[serde(default)]
    pub force: [f64; 2],
    #[serde(default)]
    pub start: f64,
    #[serde(default)]
    pub duration: f64,
}

impl DisturbanceProfile {
    pub fn none() -> Self {
        Self {
            kind: DisturbanceKind::None,
            force: [0.0, 0.0],
            start: 0.0,
            duration: 0.0,
        }
    }

    /// Downward push of 150 N over 50 ms.
    pub fn impact(start: f64) -> Self {
        Self {
            kind: DisturbanceKind::Impulse,
            force: [0.0, -150.0],
            start,
            duration: 0.05,
        }
    }

    /// Constant 40 N downward load held for `duration`.
    pub fn constant_load(start: f64, duration: f64) -> Self {
        Self {
            kind: DisturbanceKind::Constant,
            force: [0.0, -40.0],
            start,
            duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != DisturbanceKind::None {
            if !(self.duration > 0.0 && self.duration.is_finite()) {
                return Err(SimError::InvalidInput(
                    "disturbance duration must be positive".into(),
                ));
            }
            if !(self.start >= 0.0) || !self.force.iter().all(|f| f.is_finite()) {
                return Err(SimError::InvalidInput(
                    "disturbance start and force must be finite, start >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.kind != DisturbanceKind::None && t >= self.start && t < self.start + self.duration
    }

    pub fn force_at(&self, t: f64) -> [f64; 2] {
        if self.is_active(t) {
            self.force
        } else {
            [0.0, 0.0]
        }
    }
}

fn absolute_angles(q: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    q.iter()
        .map(|qi| {
            acc += qi;
            acc
        })
        .collect()
}

pub fn fk(model: &ArmModel, q: &[f64]) -> [f64; 2] {
    let th = absolute_angles(q);
    let mut p = [0.0, 0.0];
    for (l, t) in model.link_lengths.iter().zip(&th) {
        p[0] += l * t.cos();
        p[1] += l * t.sin();
    }
    p
}

/// Jacobian of the point at distance `reach` along link `link`.
fn point_jacobian(model: &ArmModel, th: &[f64], link: usize, reach: f64) -> Matrix {
    let n = model.n_links();
    let mut j = Matrix::zeros(2, n);
    // Column c collects every segment at or beyond joint c up to the point.
    let mut seg = vec![[0.0; 2]; link + 1];
    for k in 0..=link {
        let l = if k == link { reach } else { model.link_lengths[k] };
        seg[k] = [l * th[k].cos(), l * th[k].sin()];
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for c in (0..=link).rev() {
        sx += seg[c][0];
        sy += seg[c][1];
        j[(0, c)] = -sy;
        j[(1, c)] = sx;
    }
    j
}

pub fn task_jacobian(model: &ArmModel, q: &[f64]) -> Matrix {
    let th = absolute_angles(q);
    let last = model.n_links() - 1;
    point_jacobian(model, &th, last, model.link_lengths[last])
}

pub fn mass_matrix(model: &ArmModel, q: &[f64]) -> SymMatrix {
    let n = model.n_links();
    let th = absolute_angles(q);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let jv = point_jacobian(model, &th, i, 0.5 * model.link_lengths[i]);
        let mi = model.link_masses[i];
        let ii = model.link_inertias[i];
        for a in 0..=i {
            for b in 0..=i {
                let v = jv[(0, a)] * jv[(0, b)] + jv[(1, a)] * jv[(1, b)];
                m[(a, b)] += mi * v + ii;
            }
        }
    }
    SymMatrix::new(m).expect("square mass matrix")
}

/// Velocity-product and gravity generalized forces `C(q,q̇)q̇ + g(q)`.
pub fn bias_forces(model: &ArmModel, q: &[f64], qd: &[f64]) -> Vec<f64> {
    let n = model.n_links();
    let th = absolute_angles(q);
    let w = absolute_angles(qd);
    let mut h = vec![0.0; n];
    for i in 0..n {
        let jv = point_jacobian(model, &th, i, 0.5 * model.link_lengths[i]);
        let mut acc = [0.0, -0.0];
        for k in 0..=i {
            let l = if k == i {
                0.5 * model.link_lengths[k]
            } else {
                model.link_lengths[k]
            };
            acc[0] -= l * w[k] * w[k] * th[k].cos();
            acc[1] -= l * w[k] * w[k] * th[k].sin();
        }
        let m = model.link_masses[i];
        let f = [m * acc[0], m * (acc[1] + model.gravity)];
        for c in 0..=i {
            h[c] += jv[(0, c)] * f[0] + jv[(1, c)] * f[1];
        }
    }
    h
}

pub fn kinetic_energy(model: &ArmModel, q: &[f64], qd: &[f64]) -> f64 {
    0.5 * mass_matrix(model, q).quad_form(qd)
}

pub fn potential_energy(model: &ArmModel, q: &[f64]) -> f64 {
    let th = absolute_angles(q);
    let mut y = 0.0;
    let mut u = 0.0;
    for i in 0..model.n_links() {
        let l = model.link_lengths[i];
        u += model.link_masses[i] * model.gravity * (y + 0.5 * l * th[i].sin());
        y += l * th[i].sin();
    }
    u
}

/// PD torque `K_p(q_des − q) − K_d·q̇`, clamped to `±tau_max`.
pub fn pd_torque(model: &ArmModel, q: &[f64], qd: &[f64], q_des: &[f64]) -> Vec<f64> {
    let g = &model.gains;
    (0..model.n_links())
        .map(|i| {
            let t = g.kp()[i] * (q_des[i] - q[i]) - g.kd()[i] * qd[i];
            t.clamp(-model.tau_max, model.tau_max)
        })
        .collect()
}

/// One integration step; returns the new state and the applied torque.
///
/// Semi-implicit Euler. Damping of unsaturated joints (servo `K_d` plus
/// viscous) is taken implicitly in velocity, which keeps stiff distal links
/// stable at the inner rate.
pub fn dynamics_step_with_torque(
    model: &ArmModel,
    state: &SimState,
    q_des: &[f64],
    ext_force: [f64; 2],
    dt: f64,
) -> Result<(SimState, Vec<f64>)> {
    let n = model.n_links();
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(SimError::InvalidInput(format!("dt must be in (0, 0.01], got {dt}")));
    }
    if state.q.len() != n || state.qd.len() != n || q_des.len() != n {
        return Err(SimError::InvalidInput("state or target has wrong length".into()));
    }
    if !state.is_finite() || q_des.iter().chain(&ext_force).any(|x| !x.is_finite()) {
        return Err(SimError::NonFiniteState { t: state.t });
    }
    let (q, qd) = (&state.q, &state.qd);
    let tau = pd_torque(model, q, qd, q_des);
    let jx = task_jacobian(model, q);
    let jf = jx.tr_matvec(&ext_force);
    let h = bias_forces(model, q, qd);
    let mut m = mass_matrix(model, q).into_matrix();
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let mut damping = model.joint_damping;
        let unclamped = model.gains.kp()[i] * (q_des[i] - q[i]) - model.gains.kd()[i] * qd[i];
        if unclamped.abs() < model.tau_max {
            damping += model.gains.kd()[i];
        }
        m[(i, i)] += dt * damping;
        rhs[i] = tau[i] + jf[i] - h[i] - model.joint_damping * qd[i];
    }
    let chol = cholesky(&SymMatrix::new(m).map_err(|_| SimError::NonFiniteState { t: state.t })?)
        .map_err(|_| SimError::NonFiniteState { t: state.t })?;
    let qdd = chol.solve(&Matrix::column_vector(&rhs)).into_vec();
    let mut next = SimState {
        q: q.clone(),
        qd: qd.clone(),
        t: state.t + dt,
    };
    for i in 0..n {
        next.qd[i] += dt * qdd[i];
        next.q[i] += dt * next.qd[i];
        let [lo, hi] = model.joint_limits[i];
        if next.q[i] < lo {
            next.q[i] = lo;
            next.qd[i] = next.qd[i].max(0.0);
        } else if next.q[i] > hi {
            next.q[i] = hi;
            next.qd[i] = next.qd[i].min(0.0);
        }
    }
    if !next.is_finite() {
        return Err(SimError::NonFiniteState { t: next.t });
    }
    Ok((next, tau))
}

pub fn dynamics_step(
    model: &ArmModel,
    state: &SimState,
    q_des: &[f64],
    ext_force: [f64; 2],
    dt: f64,
) -> Result<SimState> {
    dynamics_step_with_torque(model, state, q_des, ext_force, dt).map(|(s, _)| s)
}

/// `q_des = q_default + α·action`.
pub fn desired_posture(model: &ArmModel, action: &[f64]) -> Vec<f64> {
    let alpha = model.gains.action_scale();
    model
        .default_posture
        .iter()
        .zip(action)
        .map(|(q0, a)| q0 + alpha * a)
        .collect()
}

/// Uniform sample from the disc of radius [`COMMAND_RADIUS`] around the nominal point.
pub fn sample_command<R: Rng + ?Sized>(model: &ArmModel, rng: &mut R) -> [f64; 2] {
    let c = model.nominal_point();
    let r = COMMAND_RADIUS * rng.random::<f64>().sqrt();
    let a = rng.random::<f64>() * std::f64::consts::TAU;
    [c[0] + r * a.cos(), c[1] + r * a.sin()]
}

/// Single observation frame: `[q − q_default, q̇·s_qd, (x_cmd − x_nominal)·s_cmd, sin φ, cos φ]`.
pub fn observation_frame(
    model: &ArmModel,
    layout: &ObservationLayout,
    state: &SimState,
    command: [f64; 2],
) -> Vec<f64> {
    let nominal = model.nominal_point();
    let mut f = Vec::with_capacity(layout.frame_width());
    f.extend(state.q.iter().zip(&model.default_posture).map(|(q, q0)| q - q0));
    f.extend(state.qd.iter().map(|v| v * layout.qd_scale));
    f.push((command[0] - nominal[0]) * layout.command_scale);
    f.push((command[1] - nominal[1]) * layout.command_scale);
    let phase = std::f64::consts::TAU * state.t / PHASE_PERIOD;
    f.push(phase.sin());
    f.push(phase.cos());
    f
}

/// Stack of the most recent frames, newest first.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: VecDeque<Vec<f64>>,
    depth: usize,
}

impl FrameStack {
    /// A stack pre-filled with copies of `first`.
    pub fn new(first: Vec<f64>, depth: usize) -> Self {
        let frames = std::iter::repeat_n(first, depth).collect();
        Self { frames, depth }
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        self.frames.push_front(frame);
        self.frames.truncate(self.depth);
    }

    pub fn observation(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// One policy step of a rollout. Kinematic fields are sampled when the
/// observation is taken; `tau` is the torque applied right after the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub t: f64,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub q_des: Vec<f64>,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub tau: Vec<f64>,
    pub x: [f64; 2],
    pub j_x: Matrix,
    pub command: [f64; 2],
    pub ext_force: [f64; 2],
    pub support_mode: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub dt: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            let line = serde_json::to_string(s).map_err(|e| SimError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| SimError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: RolloutStep = serde_json::from_str(&line)
                .map_err(|e| SimError::Io(format!("line {}: {e}", i + 1)))?;
            steps.push(s);
        }
        let dt = match steps.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => POLICY_DT,
        };
        Ok(Self { steps, dt })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOptions {
    /// Fixed command; sampled from the seed when `None`.
    pub command: Option<[f64; 2]>,
    /// Sample actions from the Gaussian instead of using the mean.
    pub stochastic: bool,
    pub initial_state: Option<SimState>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            command: None,
            stochastic: false,
            initial_state: None,
        }
    }
}

pub fn run_episode(
    model: &ArmModel,
    policy: &MlpPolicy,
    layout: &ObservationLayout,
    disturbance: &DisturbanceProfile,
    duration: f64,
    seed: u64,
) -> Result<Rollout> {
    run_episode_with(model, policy, layout, disturbance, duration, seed, &EpisodeOptions::default())
}

pub fn run_episode_with(
    model: &ArmModel,
    policy: &MlpPolicy,
    layout: &ObservationLayout,
    disturbance: &DisturbanceProfile,
    duration: f64,
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<Rollout> {
    match run_episode_partial(model, policy, layout, disturbance, duration, seed, opts)? {
        (rollout, None) => Ok(rollout),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run_episode_with`], but a failure while stepping returns the steps
/// recorded so far together with the error.
pub fn run_episode_partial(
    model: &ArmModel,
    policy: &MlpPolicy,
    layout: &ObservationLayout,
    disturbance: &DisturbanceProfile,
    duration: f64,
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<(Rollout, Option<SimError>)> {
    model.validate()?;
    disturbance.validate()?;
    layout.validate(policy.obs_dim())?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(SimError::InvalidInput("duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let command = opts.command.unwrap_or_else(|| sample_command(model, &mut rng));
    let initial = opts
        .initial_state
        .clone()
        .unwrap_or_else(|| SimState::at_rest(model.default_posture.clone()));
    let mut env = ArmEnv::new(model, layout, command, initial, disturbance.clone());
    let n_steps = (duration * POLICY_HZ).round() as usize;
    let mut steps = Vec::with_capacity(n_steps);
    let mut failure = None;
    for _ in 0..n_steps {
        let obs = env.observation();
        let mean = match policy.forward(&obs) {
            Ok(m) => m,
            Err(e) => {
                failure = Some(e.into());
                break;
            }
        };
        let action = if opts.stochastic {
            policy.sample(&mean, &mut rng)
        } else {
            mean
        };
        let r = match env.step(&action) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        steps.push(RolloutStep {
            t: r.t,
            obs,
            action,
            q_des: r.q_des,
            q: r.q,
            qd: r.qd,
            tau: r.tau,
            x: r.x,
            j_x: r.j_x,
            command,
            ext_force: r.ext_force,
            support_mode: SUPPORT_MODE.to_string(),
        });
    }
    Ok((
        Rollout {
            steps,
            dt: POLICY_DT,
        },
        failure,
    ))
}

/// What one policy step did. Kinematics are those at the start of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub x: [f64; 2],
    pub j_x: Matrix,
    pub q_des: Vec<f64>,
    pub tau: Vec<f64>,
    pub ext_force: [f64; 2],
}

/// Policy-rate wrapper around the dynamics: holds the state, the command and
/// the observation stack.
#[derive(Debug, Clone)]
pub struct ArmEnv<'a> {
    model: &'a ArmModel,
    layout: &'a ObservationLayout,
    state: SimState,
    command: [f64; 2],
    stack: FrameStack,
    disturbance: DisturbanceProfile,
    steps: usize,
    t0: f64,
}

impl<'a> ArmEnv<'a> {
    pub fn new(
        model: &'a ArmModel,
        layout: &'a ObservationLayout,
        command: [f64; 2],
        initial: SimState,
        disturbance: DisturbanceProfile,
    ) -> Self {
        let stack = FrameStack::new(
            observation_frame(model, layout, &initial, command),
            layout.stack_depth,
        );
        let t0 = initial.t;
        Self {
            model,
            layout,
            state: initial,
            command,
            stack,
            disturbance,
            steps: 0,
            t0,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn command(&self) -> [f64; 2] {
        self.command
    }

    pub fn observation(&self) -> Vec<f64> {
        self.stack.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepRecord> {
        let model = self.model;
        let q_des = desired_posture(model, action);
        let s = &self.state;
        let (t, q, qd) = (s.t, s.q.clone(), s.qd.clone());
        let x = fk(model, &q);
        let j_x = task_jacobian(model, &q);
        let ext_force = self.disturbance.force_at(t);
        let mut tau0 = Vec::new();
        for sub in 0..SUBSTEPS {
            let f = self.disturbance.force_at(self.state.t);
            let (next, tau) = dynamics_step_with_torque(model, &self.state, &q_des, f, SIM_DT)?;
            if sub == 0 {
                tau0 = tau;
            }
            self.state = next;
        }
        self.steps += 1;
        // Keep the clock on the policy grid regardless of float accumulation.
        self.state.t = self.t0 + self.steps as f64 * POLICY_DT;
        self.stack
            .push(observation_frame(model, self.layout, &self.state, self.command));
        Ok(StepRecord {
            t,
            q,
            qd,
            x,
            j_x,
            q_des,
            tau: tau0,
            ext_force,
        })
    }
}
