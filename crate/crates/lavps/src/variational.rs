//! Gaussian variational family, the per-timestep objective and Adam.
//!
//! One inner problem of the sampler fits a diagonal Gaussian N(μ, diag ρ) to
//! the unnormalized conditional
//!
//! ```text
//! π̄(x_s | x_0, x_t) ∝ ĝ_s(y | x_s, A) · q(x_s | x_0, x_t)
//! ```
//!
//! by minimizing the KL divergence up to the target's unknown normalizer.
//! With the reparameterization x_s = μ + √ρ ⊙ ε, a single Monte Carlo sample
//! gives the estimator
//!
//! ```text
//! L̂ = log N(x_s; μ, diag ρ) − log ĝ_s(y | x_s, A) − log N(x_s; bridge)
//! ```
//!
//! which is differentiable in (μ, ρ̃) where ρ = softplus(ρ̃) + ρ_floor keeps
//! the variances structurally positive. Both the objective and its pathwise
//! gradient are pure functions of (params, context, model, schedule, ε), so
//! shared noise gives exactly comparable values — the contract the sampler's
//! safeguard relies on.

use nalgebra::DVector;
use serde::Serialize;

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::operators::{guidance_log_likelihood, guidance_log_likelihood_grad, DegradationOperator};
use crate::schedule::NoiseSchedule;

/// Additive variance floor under the softplus parameterization; prevents
/// degenerate s ≈ t bridges from zeroing the entropy term.
pub const RHO_FLOOR: f64 = 1e-8;

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus on (0, ∞).
pub fn inv_softplus(y: f64) -> f64 {
    // ln(e^y − 1) = y + ln(1 − e^{−y}), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian variational parameters. The variance vector is stored
/// through its unconstrained coordinates ρ̃ with ρ = softplus(ρ̃) + ρ_floor.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    mu: DVector<f64>,
    rho_tilde: DVector<f64>,
}

impl VariationalParams {
    /// Build from moment-space values; variances below the floor are clamped
    /// onto it.
    pub fn from_moments(mu: DVector<f64>, rho: &DVector<f64>) -> Self {
        let rho_tilde = DVector::from_iterator(
            rho.len(),
            rho.iter().map(|&r| inv_softplus((r - RHO_FLOOR).max(1e-300))),
        );
        VariationalParams { mu, rho_tilde }
    }

    pub fn from_unconstrained(mu: DVector<f64>, rho_tilde: DVector<f64>) -> Self {
        VariationalParams { mu, rho_tilde }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn rho_tilde(&self) -> &DVector<f64> {
        &self.rho_tilde
    }

    /// The positive variance vector ρ = softplus(ρ̃) + ρ_floor.
    pub fn rho(&self) -> DVector<f64> {
        self.rho_tilde.map(|v| softplus(v) + RHO_FLOOR)
    }

    /// Reparameterized draw x_s = μ + √ρ ⊙ ε.
    pub fn sample_with(&self, eps: &DVector<f64>) -> DVector<f64> {
        let rho = self.rho();
        DVector::from_fn(self.mu.len(), |i, _| {
            self.mu[i] + rho[i].sqrt() * eps[i]
        })
    }

    /// Flat optimizer view [μ; ρ̃].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.mu.len());
        v.extend_from_slice(self.mu.as_slice());
        v.extend_from_slice(self.rho_tilde.as_slice());
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let d = flat.len() / 2;
        VariationalParams {
            mu: DVector::from_column_slice(&flat[..d]),
            rho_tilde: DVector::from_column_slice(&flat[d..]),
        }
    }
}

/// The context of one inner variational problem:
/// c = (x_0, x_t, s, t, y, A) with 1 ≤ s < t.
#[derive(Debug, Clone)]
pub struct Context {
    pub x0: DVector<f64>,
    pub x_t: DVector<f64>,
    pub s: usize,
    pub t: usize,
    pub y: DVector<f64>,
    pub op: DegradationOperator,
}

impl Context {
    pub fn new(
        x0: DVector<f64>,
        x_t: DVector<f64>,
        s: usize,
        t: usize,
        y: DVector<f64>,
        op: DegradationOperator,
    ) -> Result<Self> {
        if s < 1 || s >= t {
            return Err(Error::invalid(format!(
                "context requires 1 <= s < t, got s = {s}, t = {t}"
            )));
        }
        if x0.len() != op.in_dim() || x_t.len() != op.in_dim() || y.len() != op.out_dim() {
            return Err(Error::DimensionMismatch(
                "context vectors do not match the operator dimensions".into(),
            ));
        }
        Ok(Context { x0, x_t, s, t, y, op })
    }

    /// Loss-free dump used in training diagnostics.
    pub fn dump(&self) -> ContextDump {
        ContextDump {
            x0: self.x0.as_slice().to_vec(),
            x_t: self.x_t.as_slice().to_vec(),
            s: self.s,
            t: self.t,
            y: self.y.as_slice().to_vec(),
            op: self.op.clone(),
        }
    }
}

/// Serializable snapshot of a context, for abort diagnostics.
#[derive(Debug, Serialize)]
pub struct ContextDump {
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub s: usize,
    pub t: usize,
    pub y: Vec<f64>,
    pub op: DegradationOperator,
}

/// Zero-shot initialization: the bridge statistics of q(x_s | x_0, x_t),
/// independent of the observation and the operator.
pub fn zero_shot_init(sched: &NoiseSchedule, ctx: &Context) -> Result<VariationalParams> {
    let b = sched.bridge(ctx.s, ctx.t)?;
    let mu = b.mean_coeff_x0 * &ctx.x0 + b.mean_coeff_xt * &ctx.x_t;
    let rho = DVector::from_element(ctx.x0.len(), b.variance);
    Ok(VariationalParams::from_moments(mu, &rho))
}

/// Objective value plus pathwise gradients in (μ, ρ̃).
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub d_mu: DVector<f64>,
    pub d_rho_tilde: DVector<f64>,
}

fn bridge_terms(
    sched: &NoiseSchedule,
    ctx: &Context,
) -> Result<(DVector<f64>, f64)> {
    let b = sched.bridge(ctx.s, ctx.t)?;
    let mean = b.mean_coeff_x0 * &ctx.x0 + b.mean_coeff_xt * &ctx.x_t;
    Ok((mean, b.variance))
}

fn check_term(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::non_finite(term))
    }
}

/// Single-sample KL estimate (up to the target's normalizing constant):
/// log q(x_s) − log ĝ_s(y|x_s, A) − log N(x_s; bridge), x_s = μ + √ρ ⊙ ε.
pub fn objective(
    params: &VariationalParams,
    ctx: &Context,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    eps: &DVector<f64>,
) -> Result<f64> {
    objective_with(params, ctx, model, sched, eps, true)
}

/// Objective with the likelihood term optionally disabled (the σ_y → ∞
/// limit), used by prior-chain checks.
pub fn objective_with(
    params: &VariationalParams,
    ctx: &Context,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    eps: &DVector<f64>,
    likelihood: bool,
) -> Result<f64> {
    let d = params.dim() as f64;
    let rho = params.rho();
    let x_s = params.sample_with(eps);

    // log q(x_s) with x_s = μ + √ρ ε plugged in.
    let log_q = -0.5 * d * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * rho.iter().map(|r| r.ln()).sum::<f64>()
        - 0.5 * eps.norm_squared();
    check_term(log_q, "variational-entropy")?;

    let mut value = log_q;
    if likelihood {
        let lg = guidance_log_likelihood(&ctx.op, &ctx.y, model, sched, ctx.s, &x_s)?;
        value -= check_term(lg, "guidance-log-likelihood")?;
    }

    let (b_mean, b_var) = bridge_terms(sched, ctx)?;
    let log_b = -0.5 * d * (2.0 * std::f64::consts::PI * b_var).ln()
        - (&x_s - &b_mean).norm_squared() / (2.0 * b_var);
    value -= check_term(log_b, "bridge-log-density")?;
    check_term(value, "objective")
}

/// Objective value and its pathwise gradient w.r.t. (μ, ρ̃), with shared ε
/// (common random numbers). One denoiser evaluation per call.
pub fn objective_grad(
    params: &VariationalParams,
    ctx: &Context,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    eps: &DVector<f64>,
) -> Result<ObjectiveEval> {
    objective_grad_with(params, ctx, model, sched, eps, true)
}

pub fn objective_grad_with(
    params: &VariationalParams,
    ctx: &Context,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    eps: &DVector<f64>,
    likelihood: bool,
) -> Result<ObjectiveEval> {
    let d_usize = params.dim();
    let d = d_usize as f64;
    let rho = params.rho();
    let x_s = params.sample_with(eps);

    let log_q = -0.5 * d * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * rho.iter().map(|r| r.ln()).sum::<f64>()
        - 0.5 * eps.norm_squared();
    check_term(log_q, "variational-entropy")?;
    let mut value = log_q;

    // d(−log ĝ − log N_b)/dx_s accumulates here.
    let mut dx = DVector::zeros(d_usize);

    if likelihood {
        let (lg, glg) =
            guidance_log_likelihood_grad(&ctx.op, &ctx.y, model, sched, ctx.s, &x_s)?;
        value -= check_term(lg, "guidance-log-likelihood")?;
        dx -= &glg;
    }

    let (b_mean, b_var) = bridge_terms(sched, ctx)?;
    let log_b = -0.5 * d * (2.0 * std::f64::consts::PI * b_var).ln()
        - (&x_s - &b_mean).norm_squared() / (2.0 * b_var);
    value -= check_term(log_b, "bridge-log-density")?;
    dx += (&x_s - &b_mean) / b_var;

    check_term(value, "objective")?;

    // Entropy contributes −1/(2ρ) to d/dρ; the target terms contribute
    // dx·dx_s/dρ with dx_s/dρ = ε/(2√ρ). Chain through softplus for ρ̃.
    let d_mu = dx.clone();
    let d_rho_tilde = DVector::from_fn(d_usize, |i, _| {
        let d_rho = -0.5 / rho[i] + dx[i] * eps[i] / (2.0 * rho[i].sqrt());
        d_rho * sigmoid(params.rho_tilde()[i])
    });
    for g in d_mu.iter().chain(d_rho_tilde.iter()) {
        if !g.is_finite() {
            return Err(Error::non_finite("objective-gradient"));
        }
    }
    Ok(ObjectiveEval {
        value,
        d_mu,
        d_rho_tilde,
    })
}

/// Adam with bias correction, no weight decay.
/// Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` must have the state's
    /// length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One Adam step on variational parameters; returns the updated pair.
pub fn adam_step(
    mut state: AdamState,
    params: &VariationalParams,
    grad: &ObjectiveEval,
) -> (AdamState, VariationalParams) {
    let mut flat = params.to_flat();
    let mut g = Vec::with_capacity(flat.len());
    g.extend_from_slice(grad.d_mu.as_slice());
    g.extend_from_slice(grad.d_rho_tilde.as_slice());
    state.step(&mut flat, &g);
    (state, VariationalParams::from_flat(&flat))
}
