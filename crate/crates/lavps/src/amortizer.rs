//! The inference model and its objective-based training loop.
//!
//! The inference model maps a context c = (x_0, x_t, s, t, y, A) to
//! variational parameters in a single forward pass. It is parameterized as a
//! residual on top of the zero-shot (bridge) initialization:
//!
//! ```text
//! μ_φ(c) = μ_bridge(x_0, x_t) + f_mean(c)
//! ρ̃_φ(c) = ρ̃_bridge + f_var(c)        (unconstrained variance coordinates)
//! ```
//!
//! with the output head zero-initialized, so before any training step the
//! model reproduces the zero-shot initialization exactly. Training minimizes
//! the expected single-sample variational objective over a context
//! distribution matched to what the sampler encounters at inference: clean
//! draws are degraded through a sampled operator, noised to a grid timestep
//! t, and the conditioning point x_0 is the *denoised* x_t, not the clean
//! draw. Gradients flow through (μ_φ, ρ̃_φ) only; the denoiser that builds
//! the context is treated as data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::nn::{embed_time, Mlp, TIME_EMBED_DIM};
use crate::operators::{OperatorFamily, OperatorKind};
use crate::prior::GaussianMixture;
use crate::rng::standard_normal;
use crate::schedule::{coarse_grid, NoiseSchedule};
use crate::variational::{objective_grad, zero_shot_init, AdamState, Context, VariationalParams};

/// Hidden width of the inference-model MLP (three hidden layers).
pub const AMORTIZER_HIDDEN: usize = 256;

/// How the operator and observation enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// Concatenate the adjoint lift Aᵀy with a fixed-length operator
    /// descriptor (the default).
    ObservationConcat,
    /// Learned operator embeddings; reserved, not implemented.
    OperatorFeatures,
}

/// Midpoint-weight rules for drawing s given t on the coarse grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MidpointWeights {
    /// All mass on the immediately preceding grid point (the default).
    PrevStep,
    /// Uniform over the grid predecessors {t_1, …, t_{k−1}}.
    Uniform,
}

impl MidpointWeights {
    /// Draw s for the grid point at index k (t = grid[k], k >= 2).
    pub fn draw(&self, grid: &[usize], k: usize, rng: &mut impl Rng) -> usize {
        match self {
            MidpointWeights::PrevStep => grid[k - 1],
            MidpointWeights::Uniform => grid[1 + rng.gen_range(0..k - 1)],
        }
    }
}

/// The trained inference model λ_φ.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub net: Mlp,
    dim: usize,
    mode: ConditioningMode,
    /// Largest timestep of the subset 𝒯 the model was trained for.
    t_subset_max: usize,
    /// T of the schedule the model was trained against.
    t_max: usize,
}

/// Fixed-length operator descriptor: a length-d profile of the operator plus
/// a kind one-hot and the noise level.
fn operator_descriptor(op: &crate::operators::DegradationOperator, out: &mut Vec<f64>) {
    let d = op.in_dim();
    let start = out.len();
    match op.kind() {
        OperatorKind::Mask { keep, .. } => {
            out.resize(start + d, 0.0);
            for &i in keep {
                out[start + i] = 1.0;
            }
            out.extend_from_slice(&[1.0, 0.0, 0.0]);
        }
        OperatorKind::BlockDownsample { factor, .. } => {
            out.resize(start + d, 1.0 / *factor as f64);
            out.extend_from_slice(&[0.0, 1.0, 0.0]);
        }
        OperatorKind::CircularConv { kernel, .. } => {
            out.resize(start + d, 0.0);
            for (j, k) in kernel.iter().enumerate() {
                out[start + j] = *k;
            }
            out.extend_from_slice(&[0.0, 0.0, 1.0]);
        }
    }
    out.push(op.sigma_y());
}

/// Input feature length for dimension d:
/// x0, x_t, embed(t), embed(s), Aᵀy, descriptor (d + 3 + 1).
pub fn input_dim(d: usize) -> usize {
    4 * d + 2 * TIME_EMBED_DIM + 4
}

fn build_features(ctx: &Context, sched: &NoiseSchedule) -> Result<DVector<f64>> {
    let d = ctx.x0.len();
    let mut f = Vec::with_capacity(input_dim(d));
    f.extend_from_slice(ctx.x0.as_slice());
    f.extend_from_slice(ctx.x_t.as_slice());
    embed_time(ctx.t, sched.t_max(), &mut f);
    embed_time(ctx.s, sched.t_max(), &mut f);
    let lift = ctx.op.adjoint(&ctx.y)?;
    f.extend_from_slice(lift.as_slice());
    operator_descriptor(&ctx.op, &mut f);
    debug_assert_eq!(f.len(), input_dim(d));
    Ok(DVector::from_vec(f))
}

impl InferenceModel {
    /// Fresh model with a zero-initialized residual head, so `infer` equals
    /// the zero-shot initialization before any training.
    pub fn init(
        dim: usize,
        mode: ConditioningMode,
        t_max: usize,
        t_subset_max: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mode == ConditioningMode::OperatorFeatures {
            return Err(Error::invalid(
                "operator-features conditioning is reserved and not implemented",
            ));
        }
        let mut net = Mlp::new(
            &[
                input_dim(dim),
                AMORTIZER_HIDDEN,
                AMORTIZER_HIDDEN,
                AMORTIZER_HIDDEN,
                2 * dim,
            ],
            rng,
        );
        net.zero_output_layer();
        Ok(InferenceModel {
            net,
            dim,
            mode,
            t_subset_max,
            t_max,
        })
    }

    pub fn from_parts(
        net: Mlp,
        dim: usize,
        mode: ConditioningMode,
        t_max: usize,
        t_subset_max: usize,
    ) -> Result<Self> {
        if net.in_dim() != input_dim(dim) || net.out_dim() != 2 * dim {
            return Err(Error::DimensionMismatch(
                "inference network shape does not match its dimension".into(),
            ));
        }
        Ok(InferenceModel {
            net,
            dim,
            mode,
            t_subset_max,
            t_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn t_subset_max(&self) -> usize {
        self.t_subset_max
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Warm-start prediction: bridge statistics plus the learned residual.
    pub fn infer(&self, sched: &NoiseSchedule, ctx: &Context) -> Result<VariationalParams> {
        let zs = zero_shot_init(sched, ctx)?;
        let feats = build_features(ctx, sched)?;
        let resid = self.net.forward(&feats);
        let mu = zs.mu() + resid.rows(0, self.dim);
        let rho_tilde = zs.rho_tilde() + resid.rows(self.dim, self.dim);
        Ok(VariationalParams::from_unconstrained(mu, rho_tilde))
    }
}

/// Training configuration for the inference model. The timestep subset is
/// 𝒯 = {1, …, ⌈(1 − r_switch)·T⌉}; contexts are drawn on the K-point
/// sampling grid restricted to 𝒯, matching what the sampler feeds the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmortizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub r_switch: f64,
    pub omega: MidpointWeights,
    /// Number of coarse grid intervals (the sampler's K).
    pub grid_k: usize,
}

/// ⌈(1 − r_switch)·T⌉, the largest timestep the inference model serves.
pub fn timestep_subset_max(r_switch: f64, t_max: usize) -> usize {
    ((1.0 - r_switch) * t_max as f64).ceil() as usize
}

impl AmortizerTrainConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_switch) {
            return Err(Error::config("amortizer.r_switch", "must lie in [0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::config("amortizer.batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("amortizer.lr", "must be positive"));
        }
        let bound = timestep_subset_max(self.r_switch, sched.t_max());
        if bound == 0 {
            return Err(Error::config(
                "amortizer.r_switch",
                "timestep subset is empty; decrease r_switch",
            ));
        }
        if self.eligible_grid_indices(sched)?.is_empty() {
            return Err(Error::config(
                "amortizer.grid_k",
                "no grid timestep with a valid midpoint falls inside the subset",
            ));
        }
        Ok(())
    }

    /// Grid indices k (2 ≤ k ≤ K−1) whose timestep lies in 𝒯; these are the
    /// (s, t) pairs the sampler queries the model at.
    pub fn eligible_grid_indices(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        let grid = coarse_grid(sched.t_max(), self.grid_k)?;
        let bound = timestep_subset_max(self.r_switch, sched.t_max());
        Ok((2..self.grid_k).filter(|&k| grid[k] <= bound).collect())
    }
}

/// One draw from the training context distribution: degrade a clean draw,
/// noise it to a grid timestep, and condition on its denoised point.
pub fn sample_context(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    model_theta: &DenoiserModel,
    fam: &OperatorFamily,
    cfg: &AmortizerTrainConfig,
    rng: &mut impl Rng,
) -> Result<Context> {
    let grid = coarse_grid(sched.t_max(), cfg.grid_k)?;
    let eligible = cfg.eligible_grid_indices(sched)?;
    if eligible.is_empty() {
        return Err(Error::config(
            "amortizer.grid_k",
            "no eligible grid timesteps in the subset",
        ));
    }

    let x = gm.sample(rng);
    let op = fam.sample(rng)?;
    let y = op.observe(&x, rng)?;
    let k = eligible[rng.gen_range(0..eligible.len())];
    let t = grid[k];
    let s = cfg.omega.draw(&grid, k, rng);
    let tr = sched.transition(0, t)?;
    let x_t = tr.alpha_ts * &x + tr.var_ts.sqrt() * standard_normal(rng, gm.dim());
    let x0 = model_theta.denoise(sched, t, &x_t)?;
    Context::new(x0, x_t, s, t, y, op)
}

/// Result of `train_amortizer`: the model plus the per-step loss curve.
#[derive(Debug)]
pub struct AmortizerTrainResult {
    pub model: InferenceModel,
    pub losses: Vec<f64>,
}

/// Train the inference model by stochastic Adam (cosine-decayed peak lr) on
/// the expected single-sample variational objective, with a fresh ε per
/// context. The denoiser is read-only throughout.
pub fn train_amortizer(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    model_theta: &DenoiserModel,
    fam: &OperatorFamily,
    cfg: &AmortizerTrainConfig,
    rng: &mut impl Rng,
) -> Result<AmortizerTrainResult> {
    cfg.validate(sched)?;
    let dim = gm.dim();
    if fam.dim() != dim {
        return Err(Error::DimensionMismatch(
            "operator family dimension does not match the prior".into(),
        ));
    }
    let bound = timestep_subset_max(cfg.r_switch, sched.t_max());
    let mut model = InferenceModel::init(
        dim,
        ConditioningMode::ObservationConcat,
        sched.t_max(),
        bound,
        rng,
    )?;
    let mut params = model.net.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        adam.lr = cfg.lr * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());

        let contexts: Vec<Context> = (0..cfg.batch)
            .map(|_| sample_context(gm, sched, model_theta, fam, cfg, rng))
            .collect::<Result<_>>()?;
        let eps_batch: Vec<DVector<f64>> =
            (0..cfg.batch).map(|_| standard_normal(rng, dim)).collect();

        let mut inputs = DMatrix::zeros(input_dim(dim), cfg.batch);
        for (j, ctx) in contexts.iter().enumerate() {
            inputs.set_column(j, &build_features(ctx, sched)?);
        }
        let (resid, cache) = model.net.forward_batch_cached(&inputs);

        let mut loss = 0.0;
        let mut dout = DMatrix::zeros(2 * dim, cfg.batch);
        for (j, ctx) in contexts.iter().enumerate() {
            let zs = zero_shot_init(sched, ctx)?;
            let col = resid.column(j);
            let mu = zs.mu() + col.rows(0, dim);
            let rho_tilde = zs.rho_tilde() + col.rows(dim, dim);
            let warm = VariationalParams::from_unconstrained(mu, rho_tilde);
            let eval = objective_grad(&warm, ctx, model_theta, sched, &eps_batch[j]).map_err(
                |e| Error::TrainingAborted {
                    step,
                    message: format!(
                        "objective failed: {e}; offending context: {}",
                        serde_json::to_string(&ctx.dump()).unwrap_or_default()
                    ),
                },
            )?;
            loss += eval.value / cfg.batch as f64;
            for i in 0..dim {
                dout[(i, j)] = eval.d_mu[i] / cfg.batch as f64;
                dout[(dim + i, j)] = eval.d_rho_tilde[i] / cfg.batch as f64;
            }
        }
        if !loss.is_finite() {
            let dump = serde_json::to_string(&contexts[0].dump()).unwrap_or_default();
            return Err(Error::TrainingAborted {
                step,
                message: format!("amortizer loss became non-finite; first context: {dump}"),
            });
        }
        let (grads, _) = model.net.backward_batch(&cache, &dout);
        adam.step(&mut params, &grads);
        model.net.set_params_flat(&params)?;
        losses.push(loss);
    }
    Ok(AmortizerTrainResult { model, losses })
}
