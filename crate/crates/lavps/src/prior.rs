//! Analytic Gaussian-mixture data distribution.
//!
//! The mixture plays the role of the clean-data distribution and doubles as
//! the oracle layer: noising a mixture keeps it a mixture, conditioning on a
//! linear Gaussian observation keeps it a mixture, and the conditional mean
//! E[X_0 | X_t = x] has a closed form. Everything downstream (learned
//! denoisers, variational fits, full samplers) is tested against this module.
//!
//! Responsibilities are computed in log-space with log-sum-exp, covariance
//! solves go through Cholesky, and construction rejects condition numbers
//! above 1e12 so the oracle outputs stay trustworthy.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::operators::DegradationOperator;
use crate::schedule::NoiseSchedule;

/// Dense-linear-algebra cap for the exact oracle path.
pub const MAX_ORACLE_DIM: usize = 64;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<Cholesky<f64, nalgebra::Dyn>>,
}

/// Exact posterior of a mixture prior under a linear Gaussian observation,
/// itself a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct PosteriorOracle {
    pub mixture: GaussianMixture,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::invalid(
                "mixture needs matching, nonempty weights/means/covs",
            ));
        }
        let dim = means[0].len();
        if dim == 0 || dim > MAX_ORACLE_DIM {
            return Err(Error::invalid(format!(
                "mixture dimension must be in 1..={MAX_ORACLE_DIM}, got {dim}"
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be nonnegative and finite"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!(
                "mixture weights must sum to 1 within {WEIGHT_SUM_TOL}, got {sum}"
            )));
        }
        let mut chols = Vec::with_capacity(k);
        for (i, c) in covs.iter().enumerate() {
            if c.nrows() != dim || c.ncols() != dim || means[i].len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "component {i} has inconsistent shape"
                )));
            }
            if (c - c.transpose()).abs().max() > 1e-10 {
                return Err(Error::invalid(format!("covariance {i} is not symmetric")));
            }
            let eig = symmetrize(c).symmetric_eigen();
            let max_ev = eig.eigenvalues.max();
            let min_ev = eig.eigenvalues.min();
            if min_ev <= 0.0 {
                return Err(Error::invalid(format!(
                    "covariance {i} is not positive definite"
                )));
            }
            if max_ev / min_ev > MAX_CONDITION {
                return Err(Error::invalid(format!(
                    "covariance {i} has condition number above {MAX_CONDITION:.0e}"
                )));
            }
            let chol = Cholesky::new(symmetrize(c)).ok_or_else(|| {
                Error::invalid(format!("covariance {i} has no Cholesky factorization"))
            })?;
            chols.push(chol);
        }
        let log_weights = weights
            .iter()
            .map(|&w| if w == 0.0 { f64::NEG_INFINITY } else { w.ln() })
            .collect();
        Ok(GaussianMixture {
            dim,
            log_weights,
            weights,
            means,
            covs,
            chols,
        })
    }

    /// Single standard Gaussian N(0, I_d).
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(
            vec![1.0],
            vec![DVector::zeros(dim)],
            vec![DMatrix::identity(dim, dim)],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Mixture mean Σ_k w_k m_k.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (w, mk) in self.weights.iter().zip(&self.means) {
            m += *w * mk;
        }
        m
    }

    /// Mixture covariance Σ_k w_k (C_k + m_k m_kᵀ) − m mᵀ.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for ((w, mk), ck) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            c += *w * (ck + mk * mk.transpose());
        }
        c - &m * m.transpose()
    }

    /// One i.i.d. draw: pick a component by weight, then a Gaussian draw.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let z = DVector::from_fn(self.dim, |_, _| rng.sample(StandardNormal));
        &self.means[comp] + self.chols[comp].l() * z
    }

    /// `n` i.i.d. draws.
    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Log-density of the mixture at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = (0..self.n_components())
            .map(|k| self.log_weights[k] + gaussian_log_density(x, &self.means[k], &self.chols[k]))
            .collect();
        log_sum_exp(&logs)
    }
}

/// log N(x; mean, C) given the Cholesky factorization of C.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&sol))
}

pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// The mixture of x_t = α_t x_0 + σ_t ε: component k maps to
/// N(α_t m_k, α_t² C_k + σ_t² I) with unchanged weights.
pub fn noised_marginal(gm: &GaussianMixture, sched: &NoiseSchedule, t: usize) -> Result<GaussianMixture> {
    if t > sched.t_max() {
        return Err(Error::invalid(format!("t = {t} exceeds T = {}", sched.t_max())));
    }
    if t == 0 {
        return Ok(gm.clone());
    }
    let a = sched.alpha(t);
    let s2 = sched.sigma(t) * sched.sigma(t);
    let eye = DMatrix::identity(gm.dim, gm.dim);
    let means = gm.means.iter().map(|m| a * m).collect();
    let covs = gm
        .covs
        .iter()
        .map(|c| a * a * c + s2 * &eye)
        .collect();
    GaussianMixture::new(gm.weights.clone(), means, covs)
}

/// Per-component pieces of the exact denoiser at (t, x), cached so the
/// input-gradient (VJP) can reuse the forward factorizations.
struct DenoiserParts {
    resp: Vec<f64>,
    cond_means: Vec<DVector<f64>>,
    /// −S_k⁻¹ (x − α m_k), the gradient of component k's noised log-density.
    grads: Vec<DVector<f64>>,
    /// B_k = α C_k S_k⁻¹; symmetric because S_k = α²C_k + σ²I commutes with C_k.
    affine: Vec<DMatrix<f64>>,
}

fn denoiser_parts(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
) -> Result<DenoiserParts> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::invalid(format!(
            "denoiser requires 1 <= t <= T, got t = {t}"
        )));
    }
    if x_t.len() != gm.dim {
        return Err(Error::DimensionMismatch(format!(
            "x_t has length {}, mixture dimension is {}",
            x_t.len(),
            gm.dim
        )));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("denoiser-input"));
    }
    let a = sched.alpha(t);
    let s2 = sched.sigma(t) * sched.sigma(t);
    let eye = DMatrix::identity(gm.dim, gm.dim);

    let k = gm.n_components();
    let mut logs = Vec::with_capacity(k);
    let mut cond_means = Vec::with_capacity(k);
    let mut grads = Vec::with_capacity(k);
    let mut affine = Vec::with_capacity(k);
    for i in 0..k {
        let noised_mean = a * &gm.means[i];
        let noised_cov = a * a * &gm.covs[i] + s2 * &eye;
        let chol = Cholesky::new(symmetrize(&noised_cov))
            .ok_or_else(|| Error::invalid("noised covariance lost positive definiteness"))?;
        logs.push(gm.log_weights[i] + gaussian_log_density(x_t, &noised_mean, &chol));
        let diff = x_t - &noised_mean;
        let sol = chol.solve(&diff);
        cond_means.push(&gm.means[i] + a * &gm.covs[i] * &sol);
        grads.push(-&sol);
        affine.push(a * &gm.covs[i] * chol.inverse());
    }
    let lse = log_sum_exp(&logs);
    let resp = logs.iter().map(|&l| (l - lse).exp()).collect();
    Ok(DenoiserParts {
        resp,
        cond_means,
        grads,
        affine,
    })
}

/// Exact conditional mean E[X_0 | X_t = x_t] for the mixture prior:
/// Σ_k r_k(x_t)·[m_k + α_t C_k (α_t² C_k + σ_t² I)⁻¹ (x_t − α_t m_k)].
pub fn exact_denoiser(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let parts = denoiser_parts(gm, sched, t, x_t)?;
    let mut out = DVector::zeros(gm.dim);
    for (r, u) in parts.resp.iter().zip(&parts.cond_means) {
        out += *r * u;
    }
    Ok(out)
}

/// Exact denoiser together with a vector-Jacobian product: returns
/// (D(x_t), Jᵀv) for the cotangent `v`. The Jacobian is
/// J = Σ_k r_k B_k + Σ_k u_k (∇r_k)ᵀ with B_k = α C_k S_k⁻¹ and
/// ∇r_k = r_k (g_k − ḡ).
pub fn exact_denoiser_vjp(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    cotangent: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let parts = denoiser_parts(gm, sched, t, x_t)?;
    let mut value = DVector::zeros(gm.dim);
    let mut grad_bar = DVector::zeros(gm.dim);
    for ((r, u), g) in parts.resp.iter().zip(&parts.cond_means).zip(&parts.grads) {
        value += *r * u;
        grad_bar += *r * g;
    }
    let mut pullback = DVector::zeros(gm.dim);
    for (((r, u), g), b) in parts
        .resp
        .iter()
        .zip(&parts.cond_means)
        .zip(&parts.grads)
        .zip(&parts.affine)
    {
        pullback += *r * (b.transpose() * cotangent);
        pullback += (*r * cotangent.dot(u)) * (g - &grad_bar);
    }
    Ok((value, pullback))
}

/// Exact posterior of the mixture prior under y = A x + σ_y ε: conjugate
/// per-component conditioning in precision form Λ_k = C_k⁻¹ + AᵀA/σ_y², with
/// weights reweighted by each component's marginal evidence
/// N(y; A m_k, A C_k Aᵀ + σ_y² I).
pub fn exact_posterior(
    gm: &GaussianMixture,
    op: &DegradationOperator,
    y: &DVector<f64>,
) -> Result<PosteriorOracle> {
    let sigma_y = op.sigma_y();
    if sigma_y <= 0.0 {
        return Err(Error::invalid("exact posterior requires sigma_y > 0"));
    }
    if op.in_dim() != gm.dim {
        return Err(Error::DimensionMismatch(format!(
            "operator input dim {} != mixture dim {}",
            op.in_dim(),
            gm.dim
        )));
    }
    if y.len() != op.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation length {} != operator output dim {}",
            y.len(),
            op.out_dim()
        )));
    }
    let a = op.dense_matrix();
    let ata = a.transpose() * &a;
    let sy2 = sigma_y * sigma_y;
    let eye_out = DMatrix::identity(op.out_dim(), op.out_dim());

    let kn = gm.n_components();
    let mut log_w = Vec::with_capacity(kn);
    let mut means = Vec::with_capacity(kn);
    let mut covs = Vec::with_capacity(kn);
    for i in 0..kn {
        let prior_prec = gm.chols[i].inverse();
        let precision = &prior_prec + &ata / sy2;
        let prec_chol = Cholesky::new(symmetrize(&precision))
            .ok_or_else(|| Error::invalid("posterior precision not positive definite"))?;
        let cov = prec_chol.inverse();
        let rhs = &prior_prec * &gm.means[i] + a.transpose() * y / sy2;
        let mean = prec_chol.solve(&rhs);

        let ev_cov = &a * &gm.covs[i] * a.transpose() + sy2 * &eye_out;
        let ev_chol = Cholesky::new(symmetrize(&ev_cov))
            .ok_or_else(|| Error::invalid("evidence covariance not positive definite"))?;
        let ev_mean = &a * &gm.means[i];
        log_w.push(gm.log_weights[i] + gaussian_log_density(y, &ev_mean, &ev_chol));
        means.push(mean);
        covs.push(symmetrize(&cov));
    }
    let lse = log_sum_exp(&log_w);
    let mut weights: Vec<f64> = log_w.iter().map(|&l| (l - lse).exp()).collect();
    // Renormalize away the last few ulps so construction passes its own check.
    let s: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= s;
    }
    Ok(PosteriorOracle {
        mixture: GaussianMixture::new(weights, means, covs)?,
    })
}
