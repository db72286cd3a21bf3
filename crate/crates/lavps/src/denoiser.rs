//! The denoiser abstraction used by all samplers.
//!
//! A denoiser approximates E[X_0 | X_t = x_t]. Two kinds are available:
//!
//! - `analytic`: the exact mixture denoiser from the `prior` module;
//! - `learned`: a small tanh MLP over (x_t, time features), trained with the
//!   weighted ℓ2 denoising loss Σ_t w_t E[‖D_t(X_t) − X_0‖²].
//!
//! Both kinds expose a vector-Jacobian product in the input, which is what
//! likelihood guidance differentiates through. The module also implements
//! the deterministic DDIM refinement used by the samplers' backward Gibbs
//! step, and a thread-local call counter that the benchmark harness uses to
//! account for denoiser evaluations exactly.

use std::cell::Cell;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{embed_time, Mlp, TIME_EMBED_DIM};
use crate::prior::{exact_denoiser, exact_denoiser_vjp, GaussianMixture};
use crate::schedule::NoiseSchedule;
use crate::variational::AdamState;

/// Hidden width of the learned denoiser MLP (two hidden layers).
pub const DENOISER_HIDDEN: usize = 128;

thread_local! {
    static DENOISE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of denoiser evaluations performed by the current thread so far.
/// Each `denoise` or `denoise_vjp_with` call counts once.
pub fn thread_denoise_calls() -> u64 {
    DENOISE_CALLS.with(|c| c.get())
}

fn bump_calls() {
    DENOISE_CALLS.with(|c| c.set(c.get() + 1));
}

/// Either the exact mixture denoiser or a trainable MLP.
#[derive(Debug, Clone)]
pub enum DenoiserModel {
    Analytic { mixture: GaussianMixture },
    Learned { net: Mlp, dim: usize },
}

impl DenoiserModel {
    pub fn analytic(mixture: GaussianMixture) -> Self {
        DenoiserModel::Analytic { mixture }
    }

    /// Fresh learned denoiser with seed-determined initialization.
    pub fn learned_init(dim: usize, rng: &mut impl Rng) -> Self {
        let net = Mlp::new(&[dim + TIME_EMBED_DIM, DENOISER_HIDDEN, DENOISER_HIDDEN, dim], rng);
        DenoiserModel::Learned { net, dim }
    }

    pub fn from_net(net: Mlp, dim: usize) -> Result<Self> {
        if net.in_dim() != dim + TIME_EMBED_DIM || net.out_dim() != dim {
            return Err(Error::DimensionMismatch(
                "denoiser network shape does not match its dimension".into(),
            ));
        }
        Ok(DenoiserModel::Learned { net, dim })
    }

    pub fn dim(&self) -> usize {
        match self {
            DenoiserModel::Analytic { mixture } => mixture.dim(),
            DenoiserModel::Learned { dim, .. } => *dim,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, DenoiserModel::Learned { .. })
    }

    /// Flat parameter vector of the learned kind (empty for analytic).
    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            DenoiserModel::Analytic { .. } => Vec::new(),
            DenoiserModel::Learned { net, .. } => net.params_flat(),
        }
    }

    fn check_input(&self, sched: &NoiseSchedule, t: usize, x_t: &DVector<f64>) -> Result<()> {
        if t < 1 || t > sched.t_max() {
            return Err(Error::invalid(format!(
                "denoise requires 1 <= t <= T, got t = {t}, T = {}",
                sched.t_max()
            )));
        }
        if x_t.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "denoise input has length {}, model dimension is {}",
                x_t.len(),
                self.dim()
            )));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("denoiser-input"));
        }
        Ok(())
    }

    fn net_input(dim: usize, sched: &NoiseSchedule, t: usize, x_t: &DVector<f64>) -> DVector<f64> {
        let mut input = Vec::with_capacity(dim + TIME_EMBED_DIM);
        input.extend_from_slice(x_t.as_slice());
        embed_time(t, sched.t_max(), &mut input);
        DVector::from_vec(input)
    }

    /// D_t(x_t): the approximate conditional mean of X_0 given X_t = x_t.
    pub fn denoise(&self, sched: &NoiseSchedule, t: usize, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(sched, t, x_t)?;
        bump_calls();
        match self {
            DenoiserModel::Analytic { mixture } => exact_denoiser(mixture, sched, t, x_t),
            DenoiserModel::Learned { net, dim } => {
                Ok(net.forward(&Self::net_input(*dim, sched, t, x_t)))
            }
        }
    }

    /// Forward pass plus a vector-Jacobian product in the input. The
    /// cotangent is computed from the forward output by `make_cotangent`,
    /// so callers can build residual-dependent pullbacks in one evaluation.
    /// Returns (D_t(x_t), J_Dᵀ·cotangent).
    pub fn denoise_vjp_with(
        &self,
        sched: &NoiseSchedule,
        t: usize,
        x_t: &DVector<f64>,
        make_cotangent: impl FnOnce(&DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_input(sched, t, x_t)?;
        bump_calls();
        match self {
            DenoiserModel::Analytic { mixture } => {
                let value = exact_denoiser(mixture, sched, t, x_t)?;
                let cot = make_cotangent(&value)?;
                let (_, pull) = exact_denoiser_vjp(mixture, sched, t, x_t, &cot)?;
                Ok((value, pull))
            }
            DenoiserModel::Learned { net, dim } => {
                let (value, cache) = net.forward_cached(&Self::net_input(*dim, sched, t, x_t));
                let cot = make_cotangent(&value)?;
                let (_, dinput) = net.backward(&cache, &cot);
                Ok((value, dinput.rows(0, *dim).into_owned()))
            }
        }
    }
}

/// Training configuration for the learned denoiser. `weights` holds w_t for
/// t = 1..=T (index 0 is t = 1); at least one must be positive.
#[derive(Debug, Clone)]
pub struct DenoiserTrainConfig {
    pub weights: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl DenoiserTrainConfig {
    /// Uniform weights w_t ≡ 1, the default.
    pub fn uniform(t_max: usize, batch: usize, steps: usize, lr: f64) -> Self {
        DenoiserTrainConfig {
            weights: vec![1.0; t_max],
            batch,
            steps,
            lr,
        }
    }

    fn validate(&self, t_max: usize) -> Result<()> {
        if self.weights.len() != t_max {
            return Err(Error::invalid(format!(
                "denoiser weights must have length T = {t_max}, got {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("denoiser weights must be nonnegative"));
        }
        if !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::invalid("at least one denoiser weight must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("denoiser batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("denoiser learning rate must be positive"));
        }
        Ok(())
    }
}

/// Result of `train_denoiser`: the model plus the per-step loss curve.
#[derive(Debug)]
pub struct DenoiserTrainResult {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
}

/// Batch loss and flat parameter gradients of the weighted ℓ2 denoising loss
/// on an explicit minibatch. Exposed so gradient checks can pin the batch.
pub fn denoiser_loss_and_grads(
    net: &Mlp,
    sched: &NoiseSchedule,
    batch: &[(DVector<f64>, usize, DVector<f64>)], // (x0, t, x_t)
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let dim = batch[0].0.len();
    let bsz = batch.len();
    let mut inputs = nalgebra::DMatrix::zeros(dim + TIME_EMBED_DIM, bsz);
    for (j, (_, t, x_t)) in batch.iter().enumerate() {
        inputs.set_column(j, &DenoiserModel::net_input(dim, sched, *t, x_t));
    }
    let (out, cache) = net.forward_batch_cached(&inputs);
    let mut loss = 0.0;
    let mut dout = nalgebra::DMatrix::zeros(dim, bsz);
    for (j, (x0, t, _)) in batch.iter().enumerate() {
        let w = weights[*t - 1];
        for i in 0..dim {
            let r = out[(i, j)] - x0[i];
            loss += w * r * r / bsz as f64;
            dout[(i, j)] = 2.0 * w * r / bsz as f64;
        }
    }
    let (grads, _) = net.backward_batch(&cache, &dout);
    (loss, grads)
}

/// Train a learned denoiser on draws from the mixture by stochastic Adam on
/// the weighted ℓ2 denoising loss. Timesteps are drawn uniformly from the
/// support of the weights; each squared error is multiplied by w_t. `cfg.lr`
/// is the peak learning rate of a cosine-decayed schedule.
pub fn train_denoiser(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut impl Rng,
) -> Result<DenoiserTrainResult> {
    cfg.validate(sched.t_max())?;
    let dim = gm.dim();
    let mut model = DenoiserModel::learned_init(dim, rng);
    let support: Vec<usize> = (1..=sched.t_max())
        .filter(|&t| cfg.weights[t - 1] > 0.0)
        .collect();

    let DenoiserModel::Learned { net, .. } = &mut model else {
        unreachable!()
    };
    let mut params = net.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        adam.lr = cfg.lr * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let batch: Vec<(DVector<f64>, usize, DVector<f64>)> = (0..cfg.batch)
            .map(|_| {
                let x0 = gm.sample(rng);
                let t = support[rng.gen_range(0..support.len())];
                let eps = crate::rng::standard_normal(rng, dim);
                let x_t = sched.alpha(t) * &x0 + sched.sigma(t) * eps;
                (x0, t, x_t)
            })
            .collect();
        let (loss, grads) = denoiser_loss_and_grads(net, sched, &batch, &cfg.weights);
        if !loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                message: "denoiser loss became non-finite".into(),
            });
        }
        adam.step(&mut params, &grads);
        net.set_params_flat(&params)?;
        losses.push(loss);
    }
    Ok(DenoiserTrainResult { model, losses })
}

/// Deterministic DDIM refinement from time `s` down to 0 on an M-point grid
/// uniform in timestep index: u_j = round(s·(M−j)/M). Each step maps
/// x ← α_next·D(x, u) + σ_next·(x − α_u·D(x, u))/σ_u; the final step has
/// σ_0 = 0 and returns the denoiser output exactly.
pub fn ddim_refine(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x_s: &DVector<f64>,
    s: usize,
    m_steps: usize,
) -> Result<DVector<f64>> {
    if s < 1 || s > sched.t_max() {
        return Err(Error::invalid(format!(
            "ddim requires 1 <= s <= T, got s = {s}"
        )));
    }
    if m_steps < 1 || m_steps > s {
        return Err(Error::invalid(format!(
            "ddim requires 1 <= M <= s to build a strictly decreasing grid, got M = {m_steps}, s = {s}"
        )));
    }
    let grid: Vec<usize> = (0..=m_steps)
        .map(|j| ((s * (m_steps - j)) as f64 / m_steps as f64).round() as usize)
        .collect();
    let mut x = x_s.clone();
    for j in 0..m_steps {
        let (u, u_next) = (grid[j], grid[j + 1]);
        let d = model.denoise(sched, u, &x)?;
        if u_next == 0 {
            x = d;
        } else {
            let (a_u, s_u) = (sched.alpha(u), sched.sigma(u));
            let (a_n, s_n) = (sched.alpha(u_next), sched.sigma(u_next));
            x = a_n * &d + s_n * (&x - a_u * &d) / s_u;
        }
    }
    Ok(x)
}
