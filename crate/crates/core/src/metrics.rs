//! Evaluation metrics for rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{MlpPolicy, ObservationLayout, PolicyError};
use crate::sim::Rollout;
use crate::stiffness::{
    antisymmetric_residual, directional_budget_audit, equivalent_joint_stiffness,
    random_unit_directions, LowLevelGains, StiffnessBudget, StiffnessError,
};

pub const HF_F0: f64 = 5.0;
pub const HF_FN: f64 = 100.0;
pub const AUDIT_DIRECTIONS: usize = 8;
pub const AUDIT_SEED: u64 = 0x5eed_a0d1;
pub const SETTLING_BAND: f64 = 0.05;
/// Window for the final mean in [`settling_time`] (s).
pub const SETTLING_TAIL: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("signal too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("signal never settles")]
    NeverSettles,
    #[error("deflection {0:e} m is too small to measure a stiffness")]
    ExceedsMeasurable(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Stiffness(#[from] StiffnessError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean over `t >= 3` and channels of `|x_t − 3x_{t−1} + 3x_{t−2} − x_{t−3}| / dt³`.
pub fn jitter(signal: &[Vec<f64>], dt: f64) -> Result<f64> {
    if signal.len() < 4 {
        return Err(MetricsError::TooShort {
            needed: 4,
            got: signal.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(MetricsError::InvalidInput("dt must be positive".into()));
    }
    let ch = signal[0].len();
    let dt3 = dt * dt * dt;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 3..signal.len() {
        for c in 0..ch {
            let d = (signal[t][c] - signal[t - 3][c]) - 3.0 * (signal[t - 1][c] - signal[t - 2][c]);
            sum += d.abs() / dt3;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean over time and joints of `|τ_j·q̇_j|`.
pub fn energy(tau: &[Vec<f64>], qd: &[Vec<f64>]) -> Result<f64> {
    if tau.len() != qd.len() {
        return Err(MetricsError::LengthMismatch(tau.len(), qd.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in tau.iter().zip(qd) {
        if a.len() != b.len() {
            return Err(MetricsError::LengthMismatch(a.len(), b.len()));
        }
        for (x, y) in a.iter().zip(b) {
            sum += (x * y).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Band power of one or more axes: Hann-windowed one-sided periodogram with
/// the mean removed, integrated over `[f0, min(f_n, fs/2)]`.
pub fn hf_energy(axes: &[Vec<f64>], fs: f64, f0: f64, f_n: f64) -> Result<f64> {
    let mut total = 0.0;
    for x in axes {
        total += band_power(x, fs, f0, f_n)?;
    }
    Ok(total)
}

fn band_power(x: &[f64], fs: f64, f0: f64, f_n: f64) -> Result<f64> {
    let n = x.len();
    if n < 64 {
        return Err(MetricsError::TooShort { needed: 64, got: n });
    }
    if !(fs > 0.0) {
        return Err(MetricsError::InvalidInput("fs must be positive".into()));
    }
    let hi = f_n.min(fs / 2.0);
    let mean = x.iter().sum::<f64>() / n as f64;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect();
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .zip(&window)
        .map(|(v, w)| Complex::new((v - mean) * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = fs / n as f64;
    let mut power = 0.0;
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * df;
        if f < f0 || f > hi {
            continue;
        }
        // One-sided PSD (units²/Hz) times the bin width.
        let mut p = c.norm_sqr() / (fs * w2);
        if k != 0 && !(n % 2 == 0 && k == n / 2) {
            p *= 2.0;
        }
        power += p * df;
    }
    Ok(power)
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(data: &[f64], p: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, p)
}

fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

pub fn p95_p5(signal: &[f64]) -> Result<f64> {
    if signal.len() < 20 {
        return Err(MetricsError::TooShort {
            needed: 20,
            got: signal.len(),
        });
    }
    let mut v = signal.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(percentile_sorted(&v, 95.0) - percentile_sorted(&v, 5.0))
}

fn tail_mean(times: &[f64], signal: &[f64]) -> f64 {
    let t_end = *times.last().unwrap();
    let (s, c) = times
        .iter()
        .zip(signal)
        .filter(|(t, _)| **t >= t_end - SETTLING_TAIL)
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    s / c as f64
}

/// Time after `t_event` from which `signal` stays within `band_frac` of its
/// final one-second mean. The band is relative to the excursion from that
/// mean at `t_event`, or to the mean itself when it is larger.
pub fn settling_time(times: &[f64], signal: &[f64], t_event: f64, band_frac: f64) -> Result<f64> {
    if times.len() != signal.len() {
        return Err(MetricsError::LengthMismatch(times.len(), signal.len()));
    }
    let start = times
        .iter()
        .position(|&t| t >= t_event)
        .ok_or(MetricsError::TooShort { needed: 1, got: 0 })?;
    if times.len() - start < 2 {
        return Err(MetricsError::TooShort {
            needed: 2,
            got: times.len() - start,
        });
    }
    let final_mean = tail_mean(times, signal);
    let excursion = signal[start..]
        .iter()
        .map(|v| (v - final_mean).abs())
        .fold(0.0, f64::max);
    let reference = excursion.max(final_mean.abs());
    let band = band_frac * reference;
    if reference == 0.0 {
        return Ok(0.0);
    }
    // Last sample outside the band; settled from the sample after it.
    let last_out = (start..signal.len())
        .rev()
        .find(|&k| (signal[k] - final_mean).abs() > band);
    match last_out {
        None => Ok(0.0),
        Some(k) if k + 1 >= signal.len() => Err(MetricsError::NeverSettles),
        Some(k) => {
            let t_settle = times[k + 1] - t_event;
            let t_end = *times.last().unwrap();
            if times[k + 1] > t_end - SETTLING_TAIL {
                return Err(MetricsError::NeverSettles);
            }
            Ok(t_settle)
        }
    }
}

/// `|F| / |x_steady − x_pre|`.
pub fn estimate_task_stiffness(steady: f64, pre_load: f64, force: f64) -> Result<f64> {
    let d = (steady - pre_load).abs();
    if !(d > 1e-9) {
        return Err(MetricsError::ExceedsMeasurable(d));
    }
    Ok(force.abs() / d)
}

/// Deflection analysis of a constant-load window along one task axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadResponse {
    pub pre_load: f64,
    pub steady: f64,
    pub deflection: f64,
    pub settling_time: f64,
    pub stiffness: f64,
}

/// Mean position over the `window` seconds before `t_on` and before `t_off`.
pub fn load_response(
    times: &[f64],
    x: &[f64],
    t_on: f64,
    t_off: f64,
    force: f64,
    window: f64,
) -> Result<LoadResponse> {
    if times.len() != x.len() {
        return Err(MetricsError::LengthMismatch(times.len(), x.len()));
    }
    let mean_in = |a: f64, b: f64| -> Result<f64> {
        let (s, c) = times
            .iter()
            .zip(x)
            .filter(|(t, _)| **t >= a && **t < b)
            .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
        if c == 0 {
            return Err(MetricsError::TooShort { needed: 1, got: 0 });
        }
        Ok(s / c as f64)
    };
    let pre_load = mean_in(t_on - window, t_on)?;
    let steady = mean_in(t_off - window, t_off)?;
    let idx: Vec<usize> = (0..times.len())
        .filter(|&k| times[k] >= t_on && times[k] < t_off)
        .collect();
    let ts: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
    let xs: Vec<f64> = idx.iter().map(|&k| x[k] - pre_load).collect();
    let settle = settling_time(&ts, &xs, t_on, SETTLING_BAND)?;
    let stiffness = estimate_task_stiffness(steady, pre_load, force)?;
    Ok(LoadResponse {
        pre_load,
        steady,
        deflection: steady - pre_load,
        settling_time: settle,
        stiffness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub action_jitter: f64,
    pub dofvel_jitter: f64,
    pub torque_jitter: f64,
    pub energy: f64,
    pub budget_violation_rate: f64,
    pub max_budget_violation: f64,
    pub max_relative_budget_violation: f64,
    pub mean_antisymmetric_residual: f64,
    pub hf_energy: f64,
    pub p95_p5_x: f64,
    pub p95_p5_y: f64,
    pub settling_time: f64,
    pub estimated_task_stiffness_x: f64,
    pub estimated_task_stiffness_y: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 14] = [
        "action_jitter",
        "dofvel_jitter",
        "torque_jitter",
        "energy",
        "budget_violation_rate",
        "max_budget_violation",
        "max_relative_budget_violation",
        "mean_antisymmetric_residual",
        "hf_energy",
        "p95_p5_x",
        "p95_p5_y",
        "settling_time",
        "estimated_task_stiffness_x",
        "estimated_task_stiffness_y",
    ];

    pub fn csv_values(&self) -> [f64; 14] {
        [
            self.action_jitter,
            self.dofvel_jitter,
            self.torque_jitter,
            self.energy,
            self.budget_violation_rate,
            self.max_budget_violation,
            self.max_relative_budget_violation,
            self.mean_antisymmetric_residual,
            self.hf_energy,
            self.p95_p5_x,
            self.p95_p5_y,
            self.settling_time,
            self.estimated_task_stiffness_x,
            self.estimated_task_stiffness_y,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.csv_values()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("report serializes")
    }

    /// Flat object keyed by [`MetricsReport::CSV_HEADER`]; NaN becomes null.
    pub fn to_json_value(&self) -> serde_json::Value {
        number_or_null(self)
    }
}

fn number_or_null(r: &MetricsReport) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in MetricsReport::CSV_HEADER.iter().zip(r.csv_values()) {
        let val = serde_json::Number::from_f64(v)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null);
        map.insert((*k).to_string(), val);
    }
    serde_json::Value::Object(map)
}

/// One directional audit sample, as written to audit CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: usize,
    pub t: f64,
    pub direction: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutAudit {
    pub rows: Vec<AuditRow>,
    pub violation_rate: f64,
    pub max_violation: f64,
    pub max_relative_violation: f64,
    pub mean_antisymmetric_residual: f64,
    /// Violation rate of the quasi-static stiffness, where `J_π` is the sum
    /// of the q-block Jacobians over every stacked frame.
    pub stacked_violation_rate: f64,
}

/// One budget per rollout step, rebuilt by `build` whenever the posture
/// leaves the rebuild radius of the current budget.
pub fn budget_schedule<F>(rollout: &Rollout, mut build: F) -> Result<Vec<StiffnessBudget>>
where
    F: FnMut(&[f64]) -> std::result::Result<StiffnessBudget, StiffnessError>,
{
    let mut out: Vec<StiffnessBudget> = Vec::with_capacity(rollout.len());
    for step in &rollout.steps {
        let next = match out.last() {
            Some(b) if !b.needs_rebuild(&step.q) => b.clone(),
            _ => build(&step.q)?,
        };
        out.push(next);
    }
    Ok(out)
}

fn stacked_q_jacobian(
    policy: &MlpPolicy,
    obs: &[f64],
    layout: &ObservationLayout,
) -> Result<crate::linalg::Matrix> {
    let mut sum = policy.mean.jacobian_columns(obs, layout.q_block(0))?;
    for f in 1..layout.stack_depth {
        sum = sum.add(&policy.mean.jacobian_columns(obs, layout.q_block(f))?);
    }
    Ok(sum)
}

/// Directional audit at every step, with `J_π` recomputed from the stored
/// observations and [`AUDIT_DIRECTIONS`] directions per step. `budgets` holds
/// either one budget for the whole rollout or one per step.
pub fn audit_rollout(
    rollout: &Rollout,
    budgets: &[StiffnessBudget],
    gains: &LowLevelGains,
    policy: &MlpPolicy,
    layout: &ObservationLayout,
    seed: u64,
) -> Result<RolloutAudit> {
    if budgets.is_empty() || (budgets.len() != 1 && budgets.len() != rollout.len()) {
        return Err(MetricsError::LengthMismatch(budgets.len(), rollout.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut violated = 0usize;
    let mut stacked_violated = 0usize;
    let mut max_violation: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut asym = 0.0;
    for (k, step) in rollout.steps.iter().enumerate() {
        let budget = &budgets[if budgets.len() == 1 { 0 } else { k }];
        let j = policy.q_block_jacobian(&step.obs, layout)?;
        let k_eq = equivalent_joint_stiffness(gains, &j)?;
        asym += antisymmetric_residual(&k_eq);
        let dirs = random_unit_directions(gains.dim(), AUDIT_DIRECTIONS, &mut rng);
        let res = directional_budget_audit(&k_eq, budget.kq_max(), &dirs)?;
        max_violation = max_violation.max(res.max_violation);
        max_rel = max_rel.max(res.max_relative_violation);
        let k_static = equivalent_joint_stiffness(gains, &stacked_q_jacobian(policy, &step.obs, layout)?)?;
        let stacked = directional_budget_audit(&k_static, budget.kq_max(), &dirs)?;
        stacked_violated += stacked.samples.iter().filter(|s| s.violated).count();
        for (d, s) in res.samples.iter().enumerate() {
            violated += s.violated as usize;
            rows.push(AuditRow {
                step: k,
                t: step.t,
                direction: d,
                lhs: s.lhs,
                rhs: s.rhs,
                violated: s.violated,
            });
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(RolloutAudit {
        violation_rate: violated as f64 / n,
        max_violation,
        max_relative_violation: max_rel,
        mean_antisymmetric_residual: asym / rollout.len().max(1) as f64,
        stacked_violation_rate: stacked_violated as f64 / n,
        rows,
    })
}

fn column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

/// All metrics for one rollout. Settling time and stiffness come from the
/// first constant-load window when the rollout carries one, NaN otherwise.
pub fn report(
    rollout: &Rollout,
    budgets: &[StiffnessBudget],
    gains: &LowLevelGains,
    policy: &MlpPolicy,
    layout: &ObservationLayout,
) -> Result<MetricsReport> {
    if rollout.is_empty() {
        return Err(MetricsError::TooShort { needed: 1, got: 0 });
    }
    let dt = rollout.dt;
    let actions: Vec<Vec<f64>> = rollout.steps.iter().map(|s| s.action.clone()).collect();
    let qd: Vec<Vec<f64>> = rollout.steps.iter().map(|s| s.qd.clone()).collect();
    let tau: Vec<Vec<f64>> = rollout.steps.iter().map(|s| s.tau.clone()).collect();
    let xs: Vec<Vec<f64>> = rollout.steps.iter().map(|s| s.x.to_vec()).collect();
    let or_nan = |r: Result<f64>| r.unwrap_or(f64::NAN);
    let audit = audit_rollout(rollout, budgets, gains, policy, layout, AUDIT_SEED)?;
    let axes = vec![column(&xs, 0), column(&xs, 1)];

    let times = rollout.times();
    let mut settle = f64::NAN;
    let mut kx = f64::NAN;
    let mut ky = f64::NAN;
    if let Some((t_on, t_off, f)) = constant_load_window(rollout) {
        for (axis, out) in [(0usize, &mut kx), (1, &mut ky)] {
            if f[axis].abs() > 0.0 {
                if let Ok(r) = load_response(&times, &axes[axis], t_on, t_off, f[axis], 0.5) {
                    *out = r.stiffness;
                    if settle.is_nan() || f[axis].abs() >= f[1 - axis].abs() {
                        settle = r.settling_time;
                    }
                }
            }
        }
    }

    Ok(MetricsReport {
        action_jitter: or_nan(jitter(&actions, dt)),
        dofvel_jitter: or_nan(jitter(&qd, dt)),
        torque_jitter: or_nan(jitter(&tau, dt)),
        energy: energy(&tau, &qd)?,
        budget_violation_rate: audit.violation_rate,
        max_budget_violation: audit.max_violation,
        max_relative_budget_violation: audit.max_relative_violation,
        mean_antisymmetric_residual: audit.mean_antisymmetric_residual,
        hf_energy: or_nan(hf_energy(&axes, 1.0 / dt, HF_F0, HF_FN)),
        p95_p5_x: or_nan(p95_p5(&axes[0])),
        p95_p5_y: or_nan(p95_p5(&axes[1])),
        settling_time: settle,
        estimated_task_stiffness_x: kx,
        estimated_task_stiffness_y: ky,
    })
}

/// `(t_on, t_off, force)` of the first contiguous run of identical non-zero
/// external force lasting longer than one second.
pub fn constant_load_window(rollout: &Rollout) -> Option<(f64, f64, [f64; 2])> {
    let s = &rollout.steps;
    let mut k = 0;
    while k < s.len() {
        let f = s[k].ext_force;
        if f != [0.0, 0.0] {
            let start = k;
            while k < s.len() && s[k].ext_force == f {
                k += 1;
            }
            let t_on = s[start].t;
            let t_off = if k < s.len() { s[k].t } else { s[k - 1].t + rollout.dt };
            if t_off - t_on > 1.0 {
                return Some((t_on, t_off, f));
            }
        } else {
            k += 1;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_examples() {
        let c = vec![vec![1.5, -2.0]; 10];
        assert_eq!(jitter(&c, 0.02).unwrap(), 0.0);
        let dt = 0.5;
        let cubic: Vec<Vec<f64>> = (0..10).map(|t| vec![(t as f64 * dt).powi(3)]).collect();
        assert!((jitter(&cubic, dt).unwrap() - 6.0).abs() < 1e-12);
        assert!(jitter(&c[..3], 0.02).is_err());
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy(&[vec![0.0]], &[vec![5.0]]).unwrap(), 0.0);
        assert_eq!(energy(&vec![vec![2.0]; 4], &vec![vec![3.0]; 4]).unwrap(), 6.0);
        assert!(energy(&[vec![2.0]], &[]).is_err());
    }

    #[test]
    fn percentile_examples() {
        let ramp: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        assert!((p95_p5(&ramp).unwrap() - 0.90).abs() < 1e-12);
        assert_eq!(p95_p5(&[3.0; 20]).unwrap(), 0.0);
        assert!(p95_p5(&[0.0; 19]).is_err());
    }

    #[test]
    fn stiffness_examples() {
        assert!((estimate_task_stiffness(-0.04, 0.0, -40.0).unwrap() - 1000.0).abs() < 1e-9);
        assert!((estimate_task_stiffness(0.2, 0.3, 40.0).unwrap() - 400.0).abs() < 1e-9);
        assert!(matches!(
            estimate_task_stiffness(0.1, 0.1, 40.0),
            Err(MetricsError::ExceedsMeasurable(_))
        ));
    }

    #[test]
    fn settling_examples() {
        let times: Vec<f64> = (0..300).map(|k| k as f64 * 0.01).collect();
        let step = vec![1.0; 300];
        assert_eq!(settling_time(&times, &step, 0.0, 0.05).unwrap(), 0.0);
        let osc: Vec<f64> = times.iter().map(|t| (10.0 * t).sin()).collect();
        assert_eq!(settling_time(&times, &osc, 0.0, 0.05), Err(MetricsError::NeverSettles));
    }
}
