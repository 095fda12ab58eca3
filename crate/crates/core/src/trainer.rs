//! PPO on the arm testbed with an optional Jacobian penalty.
//!
//! Randomness: every stream is seeded from the root seed through
//! [`sub_seed`], keyed by a stream tag and up to two indices (iteration, env).
//! Each iteration starts fresh episodes, so a run resumed from a checkpoint
//! reproduces the uninterrupted run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::BudgetSpec;
use crate::linalg::{spectral_norm, Matrix};
use crate::metrics::percentile;
use crate::policy::{
    gaussian_log_prob, Activation, JacobianPenalty, Mlp, MlpPolicy, ObservationLayout, PolicyError,
};
use crate::regularizers::{
    total_loss, AnisoMaxeig, PenaltyConfig, PenaltyKind, ScalarLcp, SilcPenalty, POWER_ITERS,
    POWER_TOL,
};
use crate::sim::{fk, sample_command, ArmEnv, ArmModel, DisturbanceProfile, SimError, SimState};
use crate::stiffness::{whitened_quantity, StiffnessBudget, StiffnessError};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ENV: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;

pub const TRACKING_SCALE: f64 = 0.04;
pub const POSTURE_WEIGHT: f64 = 0.1;
pub const ALIVE_BONUS: f64 = 0.1;
pub const TORQUE_WEIGHT: f64 = 0.01;

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.json";

pub const LOG_HEADER: [&str; 15] = [
    "iteration",
    "mean_reward",
    "mean_tracking_error",
    "policy_loss",
    "value_loss",
    "entropy",
    "penalty_mean",
    "violation_rate",
    "approx_kl",
    "clip_fraction",
    "a_norm_p50",
    "a_norm_p95",
    "a_norm_max",
    "budget_rebuilds",
    "mean_log_std",
];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stiffness(#[from] StiffnessError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `stream` at indices `(a, b)` under root seed `root`.
pub fn sub_seed(root: u64, stream: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(mix(root) ^ stream) ^ a) ^ b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "d_num_envs")]
    pub num_envs: usize,
    #[serde(default = "d_steps")]
    pub steps_per_env: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_minibatch")]
    pub minibatch_size: usize,
    #[serde(default = "d_clip")]
    pub clip_ratio: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    #[serde(default = "d_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "d_iterations")]
    pub total_iterations: usize,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default = "d_log_std")]
    pub init_log_std: f64,
    /// Half-width of the uniform perturbation of the initial posture (rad).
    #[serde(default = "d_spread")]
    pub init_spread: f64,
    /// Rebuild the budget at every step instead of on the distance cadence.
    #[serde(default)]
    pub per_sample_budget: bool,
    #[serde(default = "d_ckpt")]
    pub checkpoint_every: usize,
}

fn d_num_envs() -> usize {
    64
}
fn d_steps() -> usize {
    128
}
fn d_epochs() -> usize {
    5
}
fn d_minibatch() -> usize {
    2048
}
fn d_clip() -> f64 {
    0.2
}
fn d_gamma() -> f64 {
    0.99
}
fn d_lambda() -> f64 {
    0.95
}
fn d_lr() -> f64 {
    3e-4
}
fn d_grad_norm() -> f64 {
    1.0
}
fn d_iterations() -> usize {
    300
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_activation() -> Activation {
    Activation::Tanh
}
fn d_log_std() -> f64 {
    -1.0
}
fn d_spread() -> f64 {
    0.1
}
fn d_ckpt() -> usize {
    50
}

impl Default for TrainParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(format!("clip_ratio must be in (0, 1), got {}", self.clip_ratio));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda));
        }
        if self.num_envs == 0 || self.steps_per_env == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return Err("num_envs, steps_per_env, epochs and minibatch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err("learning_rate and max_grad_norm must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden layer sizes must be positive".into());
        }
        if !(self.init_spread >= 0.0) || !self.init_log_std.is_finite() || !(self.entropy_coef >= 0.0) {
            return Err("init_spread and entropy_coef must be >= 0".into());
        }
        Ok(())
    }
}

/// Everything the trainer needs besides the arm model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub params: TrainParams,
    pub penalty: PenaltyConfig,
    pub budget: BudgetSpec,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, model: &ArmModel) -> Result<()> {
        self.params.validate().map_err(TrainError::InvalidConfig)?;
        self.penalty
            .validate(model.n_links())
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.budget
            .values()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Tracking kernel + posture + alive − torque magnitude, on the state after the step.
pub fn reward(model: &ArmModel, state: &SimState, tau: &[f64], command: [f64; 2]) -> f64 {
    let x = fk(model, &state.q);
    let e2 = (x[0] - command[0]).powi(2) + (x[1] - command[1]).powi(2);
    let posture: f64 = state
        .q
        .iter()
        .zip(&model.default_posture)
        .map(|(q, q0)| (q - q0).powi(2))
        .sum();
    let tau_norm = tau.iter().map(|t| t * t).sum::<f64>().sqrt();
    (-e2 / TRACKING_SCALE).exp() - POSTURE_WEIGHT * posture + ALIVE_BONUS - TORQUE_WEIGHT * tau_norm
}

/// Generalized advantage estimates and returns for one trajectory.
/// `dones[k]` marks a terminal transition (no bootstrap past it).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        let (next_value, cont) = if dones[k] {
            (0.0, 0.0)
        } else if k + 1 < n {
            (values[k + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[k] + gamma * next_value * cont - values[k];
        acc = delta + gamma * lambda * cont * acc;
        adv[k] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit variance (population), left unchanged when the spread vanishes.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Gradient descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Flattened `[env][step]` transitions of one iteration.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub tracking_errors: Vec<f64>,
    /// q-block policy Jacobian at collection time.
    pub jacobians: Vec<Matrix>,
    pub budgets: Vec<StiffnessBudget>,
    pub budget_index: Vec<usize>,
    pub budget_rebuilds: usize,
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let t = self.steps_per_env;
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for e in 0..self.num_envs {
            let r = e * t..(e + 1) * t;
            let (adv, ret) = gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r.clone()],
                self.last_values[e],
                gamma,
                lambda,
            );
            self.advantages[r.clone()].copy_from_slice(&adv);
            self.returns[r].copy_from_slice(&ret);
        }
    }
}

pub struct Learner {
    pub model: ArmModel,
    pub layout: ObservationLayout,
    pub config: TrainConfig,
    pub policy: MlpPolicy,
    pub value: Mlp,
    pub policy_opt: Adam,
    pub value_opt: Adam,
    /// Iterations completed so far.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub model: ArmModel,
    pub layout: ObservationLayout,
    pub config: TrainConfig,
    pub policy: MlpPolicy,
    pub value: Mlp,
    pub policy_opt: Adam,
    pub value_opt: Adam,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| io_err(path, e))?;
        fs::write(path, s).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&s).map_err(|e| io_err(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Full,
    /// RL and value losses masked; only the penalty term is optimized.
    PenaltyOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub penalty_mean: f64,
    pub violation_rate: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_tracking_error: f64,
    pub stats: UpdateStats,
    pub a_norm_p50: f64,
    pub a_norm_p95: f64,
    pub a_norm_max: f64,
    pub budget_rebuilds: usize,
    pub mean_log_std: f64,
}

impl IterationLog {
    pub fn csv_record(&self) -> Vec<String> {
        let s = &self.stats;
        let f = |v: f64| format!("{v}");
        vec![
            self.iteration.to_string(),
            f(self.mean_reward),
            f(self.mean_tracking_error),
            f(s.policy_loss),
            f(s.value_loss),
            f(s.entropy),
            f(s.penalty_mean),
            f(s.violation_rate),
            f(s.approx_kl),
            f(s.clip_fraction),
            f(self.a_norm_p50),
            f(self.a_norm_p95),
            f(self.a_norm_max),
            self.budget_rebuilds.to_string(),
            f(self.mean_log_std),
        ]
    }
}

impl Learner {
    pub fn new(model: ArmModel, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate(&model)?;
        let layout = ObservationLayout::new(model.n_links());
        let p = &config.params;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_INIT, 0, 0));
        let mut dims = vec![layout.obs_dim()];
        dims.extend(&p.hidden);
        dims.push(model.n_links());
        let policy = MlpPolicy::random(dims.clone(), p.activation, p.init_log_std, &mut rng)?;
        *dims.last_mut().unwrap() = 1;
        let value = Mlp::random(dims, p.activation, 1.0, &mut rng)?;
        let policy_opt = Adam::new(policy.mean.num_params() + policy.action_dim(), p.learning_rate);
        let value_opt = Adam::new(value.num_params(), p.learning_rate);
        Ok(Self {
            model,
            layout,
            config,
            policy,
            value,
            policy_opt,
            value_opt,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate(&ck.model)?;
        ck.layout.validate(ck.policy.obs_dim())?;
        Ok(Self {
            model: ck.model,
            layout: ck.layout,
            config: ck.config,
            policy: ck.policy,
            value: ck.value,
            policy_opt: ck.policy_opt,
            value_opt: ck.value_opt,
            iteration: ck.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            model: self.model.clone(),
            layout: self.layout.clone(),
            config: self.config.clone(),
            policy: self.policy.clone(),
            value: self.value.clone(),
            policy_opt: self.policy_opt.clone(),
            value_opt: self.value_opt.clone(),
        }
    }

    fn build_budget_at(&self, q: &[f64]) -> Result<StiffnessBudget> {
        Ok(self.config.budget.build(&self.model, q)?)
    }

    /// Rollouts of the current policy for iteration `iteration`.
    pub fn collect(&self, iteration: usize) -> Result<RolloutBuffer> {
        let p = &self.config.params;
        let (n_env, t_len) = (p.num_envs, p.steps_per_env);
        let cap = n_env * t_len;
        let mut buf = RolloutBuffer {
            num_envs: n_env,
            steps_per_env: t_len,
            obs: Vec::with_capacity(cap),
            actions: Vec::with_capacity(cap),
            log_probs: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            tracking_errors: Vec::with_capacity(cap),
            jacobians: Vec::with_capacity(cap),
            budgets: Vec::new(),
            budget_index: Vec::with_capacity(cap),
            budget_rebuilds: 0,
            last_values: Vec::with_capacity(n_env),
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        let model = &self.model;
        for e in 0..n_env {
            let mut rng =
                ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, STREAM_ENV, iteration as u64, e as u64));
            let command = sample_command(model, &mut rng);
            let q: Vec<f64> = model
                .default_posture
                .iter()
                .map(|q0| q0 + p.init_spread * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            buf.budgets.push(self.build_budget_at(&q)?);
            let mut current = buf.budgets.len() - 1;
            let mut env = ArmEnv::new(model, &self.layout, command, SimState::at_rest(q), DisturbanceProfile::none());
            for _ in 0..t_len {
                let q_now = env.state().q.clone();
                if p.per_sample_budget || buf.budgets[current].needs_rebuild(&q_now) {
                    // Near-singular postures keep the previous budget.
                    if let Ok(b) = self.build_budget_at(&q_now) {
                        buf.budgets.push(b);
                        current = buf.budgets.len() - 1;
                        buf.budget_rebuilds += 1;
                    }
                }
                let obs = env.observation();
                let mean = self.policy.forward(&obs)?;
                let action = self.policy.sample(&mean, &mut rng);
                let log_prob = self.policy.log_prob(&mean, &action);
                let value = self.value.forward(&obs)?[0];
                let jac = self.policy.q_block_jacobian(&obs, &self.layout)?;
                let rec = env.step(&action)?;
                let r = reward(model, env.state(), &rec.tau, command);
                let x = fk(model, &env.state().q);
                buf.tracking_errors
                    .push(((x[0] - command[0]).powi(2) + (x[1] - command[1]).powi(2)).sqrt());
                buf.obs.push(obs);
                buf.actions.push(action);
                buf.log_probs.push(log_prob);
                buf.values.push(value);
                buf.rewards.push(r);
                buf.dones.push(false);
                buf.jacobians.push(jac);
                buf.budget_index.push(current);
            }
            buf.last_values.push(self.value.forward(&env.observation())?[0]);
        }
        if let Some(k) = buf.rewards.iter().position(|r| !r.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                detail: format!("reward at transition {k} is {}", buf.rewards[k]),
            });
        }
        buf.compute_gae(p.gamma, p.gae_lambda);
        Ok(buf)
    }

    /// ‖A_θ‖₂ for every transition, using the cached Jacobians.
    pub fn a_norms(&self, buf: &RolloutBuffer) -> Result<Vec<f64>> {
        let gains = &self.model.gains;
        buf.jacobians
            .iter()
            .zip(&buf.budget_index)
            .map(|(j, &b)| {
                let a = whitened_quantity(&buf.budgets[b], gains, j)?;
                Ok(spectral_norm(&a, POWER_ITERS, POWER_TOL).unwrap_or_else(|_| {
                    crate::linalg::top_singular_pair_relaxed(&a, POWER_ITERS, POWER_TOL).0.sigma
                }))
            })
            .collect()
    }

    fn penalty_for(&self, buf: &RolloutBuffer) -> Result<Option<Box<dyn Fn(Vec<usize>) -> Box<dyn JacobianPenalty>>>> {
        let pc = &self.config.penalty;
        if pc.weight == 0.0 {
            return Ok(None);
        }
        let obs_dim = self.layout.obs_dim();
        Ok(Some(match pc.kind {
            PenaltyKind::ScalarLcp => {
                let k = pc.k_lcp_scalar;
                Box::new(move |_| Box::new(ScalarLcp { k, obs_dim }) as Box<dyn JacobianPenalty>)
            }
            PenaltyKind::AnisoMaxeig => {
                let k = pc.k_matrix().expect("validated aniso config");
                Box::new(move |_| Box::new(AnisoMaxeig { k: k.clone(), obs_dim }) as Box<dyn JacobianPenalty>)
            }
            PenaltyKind::Silc => {
                let refs: Vec<&StiffnessBudget> = buf.budgets.iter().collect();
                let base = SilcPenalty::new(self.layout.q_block_latest(), &self.model.gains, &refs, Vec::new())
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
                let budget_index = buf.budget_index.clone();
                Box::new(move |idx: Vec<usize>| {
                    let assignment = idx.iter().map(|&i| budget_index[i]).collect();
                    Box::new(base.with_assignment(assignment).expect("indices in range")) as Box<dyn JacobianPenalty>
                })
            }
        }))
    }

    /// PPO epochs over `buf` with the configured penalty.
    pub fn update(&mut self, buf: &RolloutBuffer, iteration: usize, mode: UpdateMode) -> Result<UpdateStats> {
        let p = self.config.params.clone();
        let n = buf.len();
        if n == 0 {
            return Err(TrainError::InvalidConfig("empty rollout buffer".into()));
        }
        let mut adv = buf.advantages.clone();
        normalize_advantages(&mut adv);
        let penalty_factory = self.penalty_for(buf)?;
        let weight = self.config.penalty.weight;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, STREAM_SHUFFLE, iteration as u64, 0));
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = UpdateStats::default();
        let n_mean = self.policy.mean.num_params();
        let a_dim = self.policy.action_dim();
        let mb = p.minibatch_size.min(n);
        for _ in 0..p.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(mb) {
                let b = chunk.len() as f64;
                let mut g_pol = vec![0.0; n_mean + a_dim];
                let mut g_val = vec![0.0; self.value.num_params()];
                let log_std = self.policy.log_std.clone();
                let inv_var: Vec<f64> = log_std.iter().map(|s| (-2.0 * s).exp()).collect();
                let (mut pl, mut vl, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0usize);
                if mode == UpdateMode::Full {
                    for &i in chunk {
                        let trace = self.policy.mean.forward_trace(&buf.obs[i])?;
                        let mu = &trace.output;
                        let a = &buf.actions[i];
                        let logp = gaussian_log_prob(mu, &log_std, a);
                        let ratio = (logp - buf.log_probs[i]).exp();
                        let s1 = ratio * adv[i];
                        let rc = ratio.clamp(1.0 - p.clip_ratio, 1.0 + p.clip_ratio);
                        let s2 = rc * adv[i];
                        pl -= s1.min(s2);
                        kl += buf.log_probs[i] - logp;
                        if (ratio - 1.0).abs() > p.clip_ratio {
                            clipped += 1;
                        }
                        if s1 <= s2 {
                            let g = -ratio * adv[i] / b;
                            let d_mu: Vec<f64> = (0..a_dim).map(|j| g * (a[j] - mu[j]) * inv_var[j]).collect();
                            self.policy.mean.backward_into(&trace, &d_mu, &mut g_pol[..n_mean]);
                            for j in 0..a_dim {
                                g_pol[n_mean + j] += g * ((a[j] - mu[j]).powi(2) * inv_var[j] - 1.0);
                            }
                        }
                        let vt = self.value.forward_trace(&buf.obs[i])?;
                        let err = vt.output[0] - buf.returns[i];
                        vl += 0.5 * err * err;
                        self.value.backward_into(&vt, &[err / b], &mut g_val);
                    }
                    for j in 0..a_dim {
                        g_pol[n_mean + j] -= p.entropy_coef;
                    }
                }
                let mut pen_mean = 0.0;
                let mut active = 0.0;
                if let Some(factory) = &penalty_factory {
                    let penalty = factory(chunk.to_vec());
                    let obs: Vec<&[f64]> = chunk.iter().map(|&i| buf.obs[i].as_slice()).collect();
                    let pg = self.policy.penalty_param_gradient(&obs, penalty.as_ref(), weight)?;
                    for (g, d) in g_pol[..n_mean].iter_mut().zip(&pg.grad) {
                        *g += d;
                    }
                    pen_mean = pg.mean_penalty;
                    active = pg.active_fraction;
                }
                let loss = total_loss(pl / b, pen_mean, weight);
                if !loss.is_finite() || !vl.is_finite() || g_pol.iter().chain(&g_val).any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFiniteLoss {
                        iteration,
                        detail: format!("policy loss {}, value loss {}, penalty {}", pl / b, vl / b, pen_mean),
                    });
                }
                clip_grad_norm(&mut g_pol, p.max_grad_norm);
                let mut params: Vec<f64> = self.policy.mean.params().to_vec();
                params.extend(&self.policy.log_std);
                self.policy_opt.step(&mut params, &g_pol);
                self.policy.mean.params_mut().copy_from_slice(&params[..n_mean]);
                self.policy.log_std.copy_from_slice(&params[n_mean..]);
                self.policy.clamp_log_std();
                if mode == UpdateMode::Full {
                    clip_grad_norm(&mut g_val, p.max_grad_norm);
                    let mut vp = self.value.params().to_vec();
                    self.value_opt.step(&mut vp, &g_val);
                    self.value.params_mut().copy_from_slice(&vp);
                }
                stats.policy_loss += pl / b;
                stats.value_loss += vl / b;
                stats.approx_kl += kl / b;
                stats.clip_fraction += clipped as f64 / b;
                stats.penalty_mean += pen_mean;
                stats.violation_rate += active;
                stats.minibatches += 1;
            }
        }
        let m = stats.minibatches as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.approx_kl /= m;
        stats.clip_fraction /= m;
        stats.penalty_mean /= m;
        stats.violation_rate /= m;
        stats.entropy = self.policy.entropy();
        Ok(stats)
    }

    /// One collect + update cycle.
    pub fn iterate(&mut self) -> Result<IterationLog> {
        let it = self.iteration;
        let buf = self.collect(it)?;
        let norms = self.a_norms(&buf)?;
        let stats = self.update(&buf, it, UpdateMode::Full)?;
        self.iteration += 1;
        let n = buf.len() as f64;
        Ok(IterationLog {
            iteration: it,
            mean_reward: buf.rewards.iter().sum::<f64>() / n,
            mean_tracking_error: buf.tracking_errors.iter().sum::<f64>() / n,
            stats,
            a_norm_p50: percentile(&norms, 50.0),
            a_norm_p95: percentile(&norms, 95.0),
            a_norm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            budget_rebuilds: buf.budget_rebuilds,
            mean_log_std: self.policy.log_std.iter().sum::<f64>() / self.policy.log_std.len() as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub rows: Vec<IterationLog>,
}

fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:05}.json")
}

/// Keeps the log header and the rows of iterations `< keep`.
fn truncate_log(path: &Path, keep: usize) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let it: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| io_err(path, "bad iteration column"))?;
        if it < keep {
            rows.push(rec.iter().map(str::to_string).collect());
        }
    }
    Ok(rows)
}

/// Trains until `total_iterations`, logging one CSV row per iteration and
/// checkpointing every `checkpoint_every` iterations and at the end. When
/// `resume` is given, training continues from it and the log keeps only the
/// rows it already covered.
pub fn train(
    model: ArmModel,
    config: TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut learner = match resume {
        Some(ck) => {
            let mut l = Learner::from_checkpoint(ck)?;
            l.config.params.total_iterations = config.params.total_iterations;
            l
        }
        None => Learner::new(model, config)?,
    };
    let kept = if learner.iteration > 0 && log_path.exists() {
        truncate_log(&log_path, learner.iteration)?
    } else {
        Vec::new()
    };
    let mut wtr = csv::Writer::from_path(&log_path).map_err(|e| io_err(&log_path, e))?;
    wtr.write_record(LOG_HEADER).map_err(|e| io_err(&log_path, e))?;
    for r in &kept {
        wtr.write_record(r).map_err(|e| io_err(&log_path, e))?;
    }
    wtr.flush().map_err(|e| io_err(&log_path, e))?;
    let total = learner.config.params.total_iterations;
    let every = learner.config.params.checkpoint_every.max(1);
    let mut rows = Vec::new();
    let mut last_ck = out_dir.join(LATEST_CHECKPOINT);
    while learner.iteration < total {
        let row = learner.iterate()?;
        wtr.write_record(row.csv_record()).map_err(|e| io_err(&log_path, e))?;
        wtr.flush().map_err(|e| io_err(&log_path, e))?;
        progress(&row);
        rows.push(row);
        if learner.iteration % every == 0 || learner.iteration == total {
            let ck = learner.checkpoint();
            let path = out_dir.join(checkpoint_name(learner.iteration));
            ck.save(&path)?;
            ck.save(&out_dir.join(LATEST_CHECKPOINT))?;
            last_ck = path;
        }
    }
    if rows.is_empty() {
        learner.checkpoint().save(&out_dir.join(LATEST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint: last_ck,
        log: log_path,
        rows,
    })
}
