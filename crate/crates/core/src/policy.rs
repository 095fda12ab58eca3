//! Feedforward Gaussian policy with exact input Jacobians.
//!
//! The mean network is a plain MLP with a smooth activation. Besides the usual
//! forward/backward pair it propagates input tangents (giving the exact
//! Jacobian `∂π/∂o` for a chosen set of input columns) and reverse-propagates
//! through that tangent pass, which yields `∂/∂θ ⟨G, J(θ)⟩` for any fixed
//! cotangent `G`. That second-order pass is what Jacobian penalties need.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// `exp(log_std)` is kept inside `[1e-4, 10]`.
pub const LOG_STD_MIN: f64 = -9.210_340_371_976_182;
pub const LOG_STD_MAX: f64 = std::f64::consts::LN_10;

/// Hinge arguments closer than this to zero are reported as kinks.
pub const KINK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite observation entry at index {0}")]
    NonFiniteInput(usize),
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("empty observation batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`.
    #[inline]
    fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
        }
    }

    /// Supremum of `|σ'|`.
    pub fn max_slope(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }
}

/// Index layout of a stacked observation vector.
///
/// Frame 0 is the most recent. Each frame holds joint positions (offset from
/// the default posture, unscaled so the q-block Jacobian is `∂π/∂q` in 1/rad),
/// joint velocities, the task command and phase features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub n_joints: usize,
    pub command_dim: usize,
    pub phase_dim: usize,
    pub stack_depth: usize,
    pub qd_scale: f64,
    pub command_scale: f64,
}

impl ObservationLayout {
    pub fn new(n_joints: usize) -> Self {
        Self {
            n_joints,
            command_dim: 2,
            phase_dim: 2,
            stack_depth: 5,
            qd_scale: 0.1,
            command_scale: 1.0,
        }
    }

    pub fn frame_width(&self) -> usize {
        2 * self.n_joints + self.command_dim + self.phase_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.stack_depth * self.frame_width()
    }

    fn frame_start(&self, frame: usize) -> usize {
        assert!(frame < self.stack_depth, "frame {frame} out of range");
        frame * self.frame_width()
    }

    pub fn q_block(&self, frame: usize) -> Range<usize> {
        let s = self.frame_start(frame);
        s..s + self.n_joints
    }

    pub fn qd_block(&self, frame: usize) -> Range<usize> {
        let s = self.frame_start(frame) + self.n_joints;
        s..s + self.n_joints
    }

    pub fn command_block(&self, frame: usize) -> Range<usize> {
        let s = self.frame_start(frame) + 2 * self.n_joints;
        s..s + self.command_dim
    }

    pub fn phase_block(&self, frame: usize) -> Range<usize> {
        let s = self.frame_start(frame) + 2 * self.n_joints + self.command_dim;
        s..s + self.phase_dim
    }

    /// Joint positions of the most recent frame.
    pub fn q_block_latest(&self) -> Range<usize> {
        self.q_block(0)
    }

    /// Every field range, frame by frame.
    pub fn field_ranges(&self) -> Vec<Range<usize>> {
        (0..self.stack_depth)
            .flat_map(|f| {
                [
                    self.q_block(f),
                    self.qd_block(f),
                    self.command_block(f),
                    self.phase_block(f),
                ]
            })
            .filter(|r| !r.is_empty())
            .collect()
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.n_joints == 0 || self.stack_depth == 0 {
            return Err(PolicyError::InvalidShape(
                "layout needs at least one joint and one frame".into(),
            ));
        }
        if self.obs_dim() != obs_dim {
            return Err(PolicyError::DimensionMismatch {
                expected: obs_dim,
                got: self.obs_dim(),
            });
        }
        Ok(())
    }
}

/// Plain MLP: affine layers with a shared activation between them and a
/// linear output. Parameters are one flat vector, layer by layer, each layer
/// storing its `out×in` row-major weight followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `h_0 = x, h_1, …, h_{L-1}` (inputs to each affine layer).
    inputs: Vec<Vec<f64>>,
    /// `σ'(z_l)` for hidden layers.
    slopes: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(PolicyError::InvalidShape(format!(
                "layer dims {layer_dims:?} need >= 2 positive entries"
            )));
        }
        let n = param_count(&layer_dims);
        Ok(Self {
            layer_dims,
            activation,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(
        layer_dims: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::zeros(layer_dims, activation)?;
        if params.len() != m.params.len() {
            return Err(PolicyError::DimensionMismatch {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    /// Gaussian init with std `gain/sqrt(fan_in)`; the output layer is scaled
    /// by `out_gain`. Biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(layer_dims, activation)?;
        let n_layers = m.num_layers();
        for l in 0..n_layers {
            let (fan_in, _) = m.layer_shape(l);
            let gain = if l + 1 == n_layers { out_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            let (w, _) = m.layer_offsets(l);
            for p in &mut m.params[w] {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * std;
            }
        }
        Ok(m)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(fan_in, fan_out)` of affine layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l], self.layer_dims[l + 1])
    }

    /// Parameter ranges `(weights, bias)` of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let start = param_count(&self.layer_dims[..=l]);
        let (i, o) = self.layer_shape(l);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        &self.params[self.layer_offsets(l).0]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.layer_offsets(l).1]
    }

    /// Row-major `out×in` copy of a layer weight.
    pub fn weight_matrix(&self, l: usize) -> Matrix {
        let (i, o) = self.layer_shape(l);
        Matrix::new(o, i, self.weight(l).to_vec()).expect("weight shape")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteInput(i));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = self.layer_shape(l);
        let w = self.weight(l);
        let b = self.bias(l);
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let z = self.affine(l, &h);
            h = if l == last {
                z
            } else {
                z.into_iter().map(|v| self.activation.eval(v)).collect()
            };
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut slopes = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for l in 0..=last {
            let z = self.affine(l, &h);
            if l == last {
                h = z;
            } else {
                let mut d = Vec::with_capacity(z.len());
                h = z
                    .into_iter()
                    .map(|v| {
                        let (s, ds, _) = self.activation.eval3(v);
                        d.push(ds);
                        s
                    })
                    .collect();
                slopes.push(d);
                inputs.push(h.clone());
            }
        }
        Ok(Trace {
            inputs,
            slopes,
            output: h,
        })
    }

    /// Accumulates `(∂y/∂θ)ᵀ·d_out` into `grad`.
    pub fn backward_into(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(d_out.len(), self.output_dim());
        assert_eq!(grad.len(), self.num_params());
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = self.layer_shape(l);
            let (wr, br) = self.layer_offsets(l);
            let h = &trace.inputs[l];
            {
                let gw = &mut grad[wr.clone()];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (g, &hi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(h) {
                        *g += d * hi;
                    }
                }
            }
            for (g, &d) in grad[br].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wr];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &a) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * a;
                }
            }
            let slope = &trace.slopes[l - 1];
            delta = prev.iter().zip(slope).map(|(p, s)| p * s).collect();
        }
    }

    /// Exact Jacobian of the output w.r.t. the input columns `cols`
    /// (`output_dim × cols.len()`).
    pub fn jacobian_columns(&self, x: &[f64], cols: Range<usize>) -> Result<Matrix> {
        self.check_columns(&cols)?;
        let tp = self.tangent_pass(x, &cols)?;
        Ok(tp.jacobian)
    }

    fn check_columns(&self, cols: &Range<usize>) -> Result<()> {
        if cols.end > self.input_dim() || cols.start > cols.end {
            return Err(PolicyError::DimensionMismatch {
                expected: self.input_dim(),
                got: cols.end,
            });
        }
        Ok(())
    }

    /// Forward pass carrying tangents `T_l = ∂h_l/∂x[cols]`.
    fn tangent_pass(&self, x: &[f64], cols: &Range<usize>) -> Result<TangentPass> {
        self.check_input(x)?;
        let k = cols.len();
        let last = self.num_layers() - 1;
        let mut hs = vec![x.to_vec()];
        let mut d1 = Vec::with_capacity(last);
        let mut d2 = Vec::with_capacity(last);
        // u[l] = W_l·T_{l-1}, t[l] = diag(σ')·u[l]; both width_l × k, row-major.
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
        let mut ts: Vec<Vec<f64>> = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for l in 0..=last {
            let (fan_in, fan_out) = self.layer_shape(l);
            let w = self.weight(l);
            let mut u = vec![0.0; fan_out * k];
            if l == 0 {
                for o in 0..fan_out {
                    u[o * k..(o + 1) * k].copy_from_slice(&w[o * fan_in + cols.start..o * fan_in + cols.end]);
                }
            } else {
                let t_prev = &ts[l - 1];
                for o in 0..fan_out {
                    let urow = &mut u[o * k..(o + 1) * k];
                    for (i, &a) in w[o * fan_in..(o + 1) * fan_in].iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (uj, &tj) in urow.iter_mut().zip(&t_prev[i * k..(i + 1) * k]) {
                            *uj += a * tj;
                        }
                    }
                }
            }
            let z = self.affine(l, &h);
            if l == last {
                us.push(u);
                h = z;
            } else {
                let mut s1 = Vec::with_capacity(fan_out);
                let mut s2 = Vec::with_capacity(fan_out);
                h = z
                    .into_iter()
                    .map(|v| {
                        let (s, a, b) = self.activation.eval3(v);
                        s1.push(a);
                        s2.push(b);
                        s
                    })
                    .collect();
                let mut t = u.clone();
                for o in 0..fan_out {
                    for tj in &mut t[o * k..(o + 1) * k] {
                        *tj *= s1[o];
                    }
                }
                us.push(u);
                ts.push(t);
                d1.push(s1);
                d2.push(s2);
                hs.push(h.clone());
            }
        }
        let jacobian = Matrix::new(self.output_dim(), k, us[last].clone()).expect("jacobian shape");
        Ok(TangentPass {
            hs,
            d1,
            d2,
            us,
            ts,
            jacobian,
            output: h,
        })
    }

    /// Jacobian of `x[cols]` and the gradient `∂/∂θ ⟨G, J⟩` accumulated into
    /// `grad` for a cotangent `g` produced from that Jacobian.
    pub fn jacobian_vjp_into<F>(
        &self,
        x: &[f64],
        cols: Range<usize>,
        grad: &mut [f64],
        cotangent: F,
    ) -> Result<Matrix>
    where
        F: FnOnce(&Matrix) -> Option<Matrix>,
    {
        self.check_columns(&cols)?;
        assert_eq!(grad.len(), self.num_params());
        let tp = self.tangent_pass(x, &cols)?;
        let Some(g) = cotangent(&tp.jacobian) else {
            return Ok(tp.jacobian);
        };
        assert_eq!(g.shape(), tp.jacobian.shape(), "cotangent shape");
        let k = cols.len();
        let n_layers = self.num_layers();
        let last = n_layers - 1;

        // Adjoint of u_last is G itself.
        let mut u_bar = g.as_slice().to_vec();
        let mut h_bar: Vec<f64> = Vec::new();
        let mut z_bar: Vec<f64> = vec![0.0; self.output_dim()];
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = self.layer_shape(l);
            let (wr, br) = self.layer_offsets(l);
            if l < last {
                // Hidden layer: t = diag(σ')·u and h = σ(z).
                let s1 = &tp.d1[l];
                let s2 = &tp.d2[l];
                let u = &tp.us[l];
                let t_bar = &u_bar;
                let mut zb = vec![0.0; fan_out];
                let mut ub = vec![0.0; fan_out * k];
                for o in 0..fan_out {
                    let tb = &t_bar[o * k..(o + 1) * k];
                    let uo = &u[o * k..(o + 1) * k];
                    let mixed: f64 = tb.iter().zip(uo).map(|(a, b)| a * b).sum();
                    zb[o] = s1[o] * h_bar[o] + s2[o] * mixed;
                    for (dst, &src) in ub[o * k..(o + 1) * k].iter_mut().zip(tb) {
                        *dst = s1[o] * src;
                    }
                }
                z_bar = zb;
                u_bar = ub;
            }
            // u_l = W_l·T_{l-1} (or W_l[:, cols]) and z_l = W_l·h_{l-1} + b_l.
            let h_prev = &tp.hs[l];
            {
                let gw = &mut grad[wr.clone()];
                for o in 0..fan_out {
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    let zb = z_bar[o];
                    if zb != 0.0 {
                        for (gi, &hi) in row.iter_mut().zip(h_prev) {
                            *gi += zb * hi;
                        }
                    }
                    let ub = &u_bar[o * k..(o + 1) * k];
                    if l == 0 {
                        for (j, &v) in ub.iter().enumerate() {
                            row[cols.start + j] += v;
                        }
                    } else {
                        let t_prev = &tp.ts[l - 1];
                        for (i, gi) in row.iter_mut().enumerate() {
                            let tp_row = &t_prev[i * k..(i + 1) * k];
                            *gi += ub.iter().zip(tp_row).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            for (gb, &zb) in grad[br].iter_mut().zip(&z_bar) {
                *gb += zb;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wr];
            let mut tb_prev = vec![0.0; fan_in * k];
            let mut hb_prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let wrow = &w[o * fan_in..(o + 1) * fan_in];
                let ub = &u_bar[o * k..(o + 1) * k];
                let zb = z_bar[o];
                for (i, &a) in wrow.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    hb_prev[i] += a * zb;
                    for (dst, &src) in tb_prev[i * k..(i + 1) * k].iter_mut().zip(ub) {
                        *dst += a * src;
                    }
                }
            }
            u_bar = tb_prev;
            h_bar = hb_prev;
        }
        let _ = &tp.output;
        Ok(tp.jacobian)
    }
}

struct TangentPass {
    hs: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
    ts: Vec<Vec<f64>>,
    jacobian: Matrix,
    #[allow(dead_code)]
    output: Vec<f64>,
}

/// Gaussian policy: MLP mean, state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

/// One sample's penalty value, its gradient with respect to the Jacobian block
/// and whether the hinge argument sat within [`KINK_EPS`] of zero.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad: Option<Matrix>,
    pub at_kink: bool,
}

/// A penalty on a column block of the policy input Jacobian.
pub trait JacobianPenalty {
    /// Input columns the penalty looks at.
    fn columns(&self) -> Range<usize>;
    /// Evaluates sample `index` of the batch on its Jacobian block.
    fn evaluate(&self, index: usize, jacobian: &Matrix) -> PenaltyEval;
}

#[derive(Debug, Clone)]
pub struct PenaltyGradient {
    /// `weight · ∇θ mean(penalty)` over the mean-network parameters.
    pub grad: Vec<f64>,
    pub mean_penalty: f64,
    /// Fraction of samples with an active hinge.
    pub active_fraction: f64,
    /// Samples whose hinge argument was within [`KINK_EPS`] of zero.
    pub kinks: usize,
}

impl MlpPolicy {
    pub fn new(mean: Mlp, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != mean.output_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: mean.output_dim(),
                got: log_std.len(),
            });
        }
        let mut p = Self { mean, log_std };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let mean = Mlp::zeros(layer_dims, activation)?;
        let a = mean.output_dim();
        Self::new(mean, vec![0.0; a])
    }

    pub fn random<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mean = Mlp::random(layer_dims, activation, 0.01, rng)?;
        let a = mean.output_dim();
        Self::new(mean, vec![init_log_std; a])
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = if v.is_finite() {
                v.clamp(LOG_STD_MIN, LOG_STD_MAX)
            } else {
                0.0
            };
        }
    }

    /// Deterministic mean action.
    pub fn forward(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(obs)
    }

    /// Full `action_dim × obs_dim` Jacobian of the mean action.
    pub fn input_jacobian(&self, obs: &[f64]) -> Result<Matrix> {
        self.mean.jacobian_columns(obs, 0..self.obs_dim())
    }

    /// Jacobian restricted to the latest frame's joint positions.
    pub fn q_block_jacobian(&self, obs: &[f64], layout: &ObservationLayout) -> Result<Matrix> {
        layout.validate(self.obs_dim())?;
        self.mean.jacobian_columns(obs, layout.q_block_latest())
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(mean, &self.log_std, action)
    }

    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        self.log_std.iter().map(|s| s + c).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        mean.iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s.exp() * z
            })
            .collect()
    }

    /// `weight · ∇θ (1/N) Σ penalty(J(o_i))` by double backpropagation.
    pub fn penalty_param_gradient<P: JacobianPenalty + ?Sized>(
        &self,
        obs_batch: &[&[f64]],
        penalty: &P,
        weight: f64,
    ) -> Result<PenaltyGradient> {
        if obs_batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let mut grad = vec![0.0; self.mean.num_params()];
        let mut total = 0.0;
        let mut active = 0usize;
        let mut kinks = 0usize;
        let cols = penalty.columns();
        for (i, obs) in obs_batch.iter().enumerate() {
            self.mean.jacobian_vjp_into(obs, cols.clone(), &mut grad, |jac| {
                let eval = penalty.evaluate(i, jac);
                total += eval.value;
                if eval.value > 0.0 {
                    active += 1;
                }
                if eval.at_kink {
                    kinks += 1;
                }
                eval.grad
            })?;
        }
        let n = obs_batch.len() as f64;
        let scale = weight / n;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(PenaltyGradient {
            grad,
            mean_penalty: total / n,
            active_fraction: active as f64 / n,
            kinks,
        })
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - half_log_2pi
        })
        .sum()
}
