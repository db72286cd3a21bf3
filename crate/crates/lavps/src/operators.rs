//! Linear degradation operators, Gaussian likelihoods and operator families.
//!
//! An operator is a linear map A together with an observation noise level
//! σ_y, defining the likelihood g(y | x) = N(y; A x, σ_y² I). Three
//! structured kinds are supported: index masks (inpainting), non-overlapping
//! block averaging (super-resolution) and circular convolution (deblurring).
//! Every structured kind also exposes its explicit dense matrix, used by the
//! exact-posterior oracle and by agreement tests.
//!
//! Operator families are sampling laws over operators, used to draw the
//! degradations amortized over during inference-model training and to build
//! in/out-of-distribution evaluation splits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Structured linear map kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorKind {
    /// Keep the listed coordinates (strictly increasing indices).
    Mask { dim: usize, keep: Vec<usize> },
    /// Average non-overlapping blocks of length `factor`.
    BlockDownsample { dim: usize, factor: usize },
    /// Circular convolution: (A x)_i = Σ_j kernel_j x_{(i−j) mod d}.
    CircularConv { dim: usize, kernel: Vec<f64> },
}

impl OperatorKind {
    /// Mask keeping every coordinate (the identity).
    pub fn keep_all(dim: usize) -> Self {
        OperatorKind::Mask {
            dim,
            keep: (0..dim).collect(),
        }
    }

    /// Mask keeping the given indices; rejects empty, duplicate or
    /// out-of-range keep sets.
    pub fn mask(dim: usize, keep: Vec<usize>) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::invalid(
                "mask must keep at least one coordinate (all-masked operators are degenerate)",
            ));
        }
        let mut sorted = keep.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != keep.len() || *sorted.last().unwrap() >= dim {
            return Err(Error::invalid("mask keep set must be unique indices below dim"));
        }
        Ok(OperatorKind::Mask { dim, keep: sorted })
    }
}

/// A linear degradation with observation noise level σ_y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationOperator {
    #[serde(flatten)]
    kind: OperatorKind,
    sigma_y: f64,
}

impl DegradationOperator {
    pub fn new(kind: OperatorKind, sigma_y: f64) -> Result<Self> {
        if !(sigma_y > 0.0) || !sigma_y.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_y must be positive and finite, got {sigma_y}"
            )));
        }
        match &kind {
            OperatorKind::Mask { dim, keep } => {
                let checked = OperatorKind::mask(*dim, keep.clone())?;
                if checked != kind {
                    return Err(Error::invalid("mask keep set must be sorted and unique"));
                }
            }
            OperatorKind::BlockDownsample { dim, factor } => {
                if *factor == 0 || dim % factor != 0 {
                    return Err(Error::invalid(format!(
                        "block downsample factor {factor} must divide dim {dim}"
                    )));
                }
            }
            OperatorKind::CircularConv { dim, kernel } => {
                if kernel.is_empty() || kernel.len() > *dim {
                    return Err(Error::invalid("conv kernel must be nonempty and at most dim long"));
                }
                if kernel.iter().any(|k| !k.is_finite()) {
                    return Err(Error::invalid("conv kernel must be finite"));
                }
            }
        }
        Ok(DegradationOperator { kind, sigma_y })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn in_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Mask { dim, .. } => *dim,
            OperatorKind::BlockDownsample { dim, .. } => *dim,
            OperatorKind::CircularConv { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Mask { keep, .. } => keep.len(),
            OperatorKind::BlockDownsample { dim, factor } => dim / factor,
            OperatorKind::CircularConv { dim, .. } => *dim,
        }
    }

    /// Apply A.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "apply expects length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(match &self.kind {
            OperatorKind::Mask { keep, .. } => {
                DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i]))
            }
            OperatorKind::BlockDownsample { dim, factor } => {
                let out = dim / factor;
                DVector::from_fn(out, |j, _| {
                    let mut s = 0.0;
                    for i in 0..*factor {
                        s += x[j * factor + i];
                    }
                    s / *factor as f64
                })
            }
            OperatorKind::CircularConv { dim, kernel } => DVector::from_fn(*dim, |i, _| {
                let mut s = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    s += k * x[(i + dim - (j % dim)) % dim];
                }
                s
            }),
        })
    }

    /// Apply Aᵀ.
    pub fn adjoint(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.out_dim() {
            return Err(Error::DimensionMismatch(format!(
                "adjoint expects length {}, got {}",
                self.out_dim(),
                v.len()
            )));
        }
        Ok(match &self.kind {
            OperatorKind::Mask { dim, keep } => {
                let mut out = DVector::zeros(*dim);
                for (j, &i) in keep.iter().enumerate() {
                    out[i] = v[j];
                }
                out
            }
            OperatorKind::BlockDownsample { dim, factor } => {
                let mut out = DVector::zeros(*dim);
                for j in 0..dim / factor {
                    let val = v[j] / *factor as f64;
                    for i in 0..*factor {
                        out[j * factor + i] = val;
                    }
                }
                out
            }
            OperatorKind::CircularConv { dim, kernel } => DVector::from_fn(*dim, |i, _| {
                let mut s = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    s += k * v[(i + (j % dim)) % dim];
                }
                s
            }),
        })
    }

    /// The explicit matrix of A (out_dim × in_dim).
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let (dp, d) = (self.out_dim(), self.in_dim());
        let mut a = DMatrix::zeros(dp, d);
        for col in 0..d {
            let mut e = DVector::zeros(d);
            e[col] = 1.0;
            let ae = self.apply(&e).expect("basis vector has the right length");
            for row in 0..dp {
                a[(row, col)] = ae[row];
            }
        }
        a
    }

    /// Draw y = A x + σ_y ε.
    pub fn observe(&self, x: &DVector<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
        let mut y = self.apply(x)?;
        for v in y.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += self.sigma_y * e;
        }
        Ok(y)
    }
}

/// log N(y; A x0, σ_y² I) = −d'/2·log(2πσ_y²) − ‖y − A x0‖²/(2σ_y²).
pub fn log_likelihood(
    op: &DegradationOperator,
    y: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<f64> {
    let ax = op.apply(x0)?;
    if y.len() != ax.len() {
        return Err(Error::DimensionMismatch(format!(
            "observation length {} != operator output dim {}",
            y.len(),
            ax.len()
        )));
    }
    let dp = y.len() as f64;
    let sy2 = op.sigma_y * op.sigma_y;
    let resid = y - ax;
    Ok(-0.5 * dp * (2.0 * std::f64::consts::PI * sy2).ln() - resid.norm_squared() / (2.0 * sy2))
}

/// The Dirac-approximated guidance likelihood
/// log ĝ_t(y | x_t, A) = log g(y | D_t(x_t), A).
pub fn guidance_log_likelihood(
    op: &DegradationOperator,
    y: &DVector<f64>,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
) -> Result<f64> {
    let x0 = model.denoise(sched, t, x_t)?;
    log_likelihood(op, y, &x0)
}

/// Guidance log-likelihood together with its gradient in x_t, obtained by
/// pulling Aᵀ(y − A D(x_t))/σ_y² back through the denoiser.
pub fn guidance_log_likelihood_grad(
    op: &DegradationOperator,
    y: &DVector<f64>,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let sy2 = op.sigma_y * op.sigma_y;
    let (x0, pull) = model.denoise_vjp_with(sched, t, x_t, |x0| {
        let resid = y - op.apply(x0)?;
        op.adjoint(&resid).map(|v| v / sy2)
    })?;
    let value = log_likelihood(op, y, &x0)?;
    Ok((value, pull))
}

/// Sampling laws over degradation operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorFamily {
    /// Degenerate family: always the given operator (amortization on a
    /// single fixed task).
    Fixed { op: DegradationOperator },
    /// Remove each coordinate independently with probability p ~ U(p_range).
    BernoulliMask {
        dim: usize,
        p_range: (f64, f64),
        sigma_y: f64,
    },
    /// Remove a random axis-aligned rectangle from an h×w grid; each side is
    /// a uniformly drawn fraction of the grid side, rounded to pixels.
    RectangleMask {
        height: usize,
        width: usize,
        side_frac: (f64, f64),
        sigma_y: f64,
    },
    /// Circular convolution with a normalized smooth random kernel: a
    /// Gaussian bump of spread ~ U(spread_range) centered randomly inside a
    /// length-`length` window.
    SmoothedKernel {
        dim: usize,
        length: usize,
        spread_range: (f64, f64),
        sigma_y: f64,
    },
}

const MAX_RESAMPLE: usize = 10_000;

impl OperatorFamily {
    pub fn validate(&self) -> Result<()> {
        let check_range = |key: &str, (lo, hi): (f64, f64), max: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 || hi > max {
                return Err(Error::config(
                    key,
                    format!("range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= {max}"),
                ));
            }
            Ok(())
        };
        match self {
            OperatorFamily::Fixed { .. } => {}
            OperatorFamily::BernoulliMask { dim, p_range, sigma_y } => {
                if *dim == 0 {
                    return Err(Error::config("bernoulli-mask.dim", "must be positive"));
                }
                check_range("bernoulli-mask.p_range", *p_range, 1.0)?;
                if !(*sigma_y > 0.0) {
                    return Err(Error::config("bernoulli-mask.sigma_y", "must be positive"));
                }
            }
            OperatorFamily::RectangleMask { height, width, side_frac, sigma_y } => {
                if *height == 0 || *width == 0 {
                    return Err(Error::config("rectangle-mask.grid", "sides must be positive"));
                }
                check_range("rectangle-mask.side_frac", *side_frac, 1.0)?;
                if !(*sigma_y > 0.0) {
                    return Err(Error::config("rectangle-mask.sigma_y", "must be positive"));
                }
            }
            OperatorFamily::SmoothedKernel { dim, length, spread_range, sigma_y } => {
                if *length == 0 || length > dim {
                    return Err(Error::config(
                        "smoothed-kernel.length",
                        format!("must be in 1..=dim, got {length} with dim {dim}"),
                    ));
                }
                check_range("smoothed-kernel.spread_range", *spread_range, f64::MAX)?;
                if spread_range.0 <= 0.0 {
                    return Err(Error::config(
                        "smoothed-kernel.spread_range",
                        "lower bound must be positive",
                    ));
                }
                if !(*sigma_y > 0.0) {
                    return Err(Error::config("smoothed-kernel.sigma_y", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            OperatorFamily::Fixed { op } => op.in_dim(),
            OperatorFamily::BernoulliMask { dim, .. } => *dim,
            OperatorFamily::RectangleMask { height, width, .. } => height * width,
            OperatorFamily::SmoothedKernel { dim, .. } => *dim,
        }
    }

    /// Draw one operator. Degenerate all-masked draws are resampled; a run
    /// of more than `MAX_RESAMPLE` rejections is an error.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<DegradationOperator> {
        self.validate()?;
        match self {
            OperatorFamily::Fixed { op } => Ok(op.clone()),
            OperatorFamily::BernoulliMask { dim, p_range, sigma_y } => {
                for _ in 0..MAX_RESAMPLE {
                    let p = rng.gen_range(p_range.0..=p_range.1);
                    let keep: Vec<usize> = (0..*dim).filter(|_| rng.gen::<f64>() >= p).collect();
                    if keep.is_empty() {
                        continue;
                    }
                    return DegradationOperator::new(OperatorKind::Mask { dim: *dim, keep }, *sigma_y);
                }
                Err(Error::invalid(
                    "bernoulli-mask family produced only degenerate all-masked operators",
                ))
            }
            OperatorFamily::RectangleMask { height, width, side_frac, sigma_y } => {
                for _ in 0..MAX_RESAMPLE {
                    let fh = rng.gen_range(side_frac.0..=side_frac.1);
                    let fw = rng.gen_range(side_frac.0..=side_frac.1);
                    let rh = ((fh * *height as f64).round() as usize).min(*height);
                    let rw = ((fw * *width as f64).round() as usize).min(*width);
                    let top = rng.gen_range(0..=(*height - rh));
                    let left = rng.gen_range(0..=(*width - rw));
                    let keep: Vec<usize> = (0..height * width)
                        .filter(|idx| {
                            let (r, c) = (idx / width, idx % width);
                            !(r >= top && r < top + rh && c >= left && c < left + rw)
                        })
                        .collect();
                    if keep.is_empty() {
                        continue;
                    }
                    return DegradationOperator::new(
                        OperatorKind::Mask { dim: height * width, keep },
                        *sigma_y,
                    );
                }
                Err(Error::invalid(
                    "rectangle-mask family produced only degenerate all-masked operators",
                ))
            }
            OperatorFamily::SmoothedKernel { dim, length, spread_range, sigma_y } => {
                let spread = rng.gen_range(spread_range.0..=spread_range.1);
                let center = rng.gen_range(0.0..*length as f64);
                let mut kernel: Vec<f64> = (0..*length)
                    .map(|i| (-0.5 * ((i as f64 - center) / spread).powi(2)).exp())
                    .collect();
                let s: f64 = kernel.iter().sum();
                for k in kernel.iter_mut() {
                    *k /= s;
                }
                DegradationOperator::new(OperatorKind::CircularConv { dim: *dim, kernel }, *sigma_y)
            }
        }
    }
}
