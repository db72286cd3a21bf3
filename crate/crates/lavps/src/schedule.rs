//! Diffusion time discretization and Gaussian transition statistics.
//!
//! A schedule is the pair of sequences (α_t, σ_t) for t = 0..T with α_0 = 1,
//! σ_0 = 0 and strictly decreasing signal-to-noise ratio α_t²/σ_t². From the
//! schedule this module derives:
//!
//! - forward transition coefficients α_{t|s} = α_t/α_s and
//!   σ²_{t|s} = σ_t² − α²_{t|s} σ_s², so that
//!   q(x_t | x_s) = N(x_t; α_{t|s} x_s, σ²_{t|s} I);
//! - bridge statistics of q(x_s | x_0, x_t) ∝ q(x_s|x_0) q(x_t|x_s), the
//!   Gaussian law of an intermediate state conditioned on both endpoints,
//!   which seeds every inner variational problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported schedule shapes. Only the linear-flow schedule
/// (α_t = 1 − t/T, σ_t = t/T) ships; the enum exists for extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearFlow,
}

/// The (α_t, σ_t) sequences, indexed 0..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Coefficients of the forward transition q(x_t | x_s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    /// α_{t|s} = α_t / α_s.
    pub alpha_ts: f64,
    /// σ²_{t|s} = σ_t² − α²_{t|s} σ_s².
    pub var_ts: f64,
}

/// Mean coefficients and variance of the bridge q(x_s | x_0, x_t):
/// mean = `mean_coeff_x0`·x_0 + `mean_coeff_xt`·x_t, covariance `variance`·I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeStats {
    /// γ_{t|s}·α_{s|0} with γ_{t|s} = σ²_{t|s}/σ²_{t|0}.
    pub mean_coeff_x0: f64,
    /// (1 − γ_{t|s})/α_{t|s}, computed as α_{t|s}·σ²_{s|0}/σ²_{t|0} so the
    /// α_t = 0 endpoint stays finite.
    pub mean_coeff_xt: f64,
    /// σ²_{s|0,t} = σ²_{t|s}·σ²_{s|0}/σ²_{t|0}.
    pub variance: f64,
}

/// Build a schedule with `t_max` forward steps.
pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::invalid(format!(
            "schedule requires T >= 2, got T = {t_max}"
        )));
    }
    let (alpha, sigma) = match kind {
        ScheduleKind::LinearFlow => {
            let tf = t_max as f64;
            let alpha: Vec<f64> = (0..=t_max).map(|t| (t_max - t) as f64 / tf).collect();
            let sigma: Vec<f64> = (0..=t_max).map(|t| t as f64 / tf).collect();
            (alpha, sigma)
        }
    };
    let sched = NoiseSchedule {
        t_max,
        alpha,
        sigma,
    };
    sched.check_invariants()?;
    Ok(sched)
}

impl NoiseSchedule {
    /// Number of forward steps T.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Signal-to-noise ratio α_t²/σ_t², defined for t >= 1.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha[t];
        let s = self.sigma[t];
        (a * a) / (s * s)
    }

    fn check_invariants(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        if (self.alpha[0] - 1.0).abs() > TOL || self.sigma[0].abs() > TOL {
            return Err(Error::invalid("schedule endpoints must satisfy alpha[0]=1, sigma[0]=0"));
        }
        for t in 0..self.t_max {
            if self.alpha[t] <= 0.0 {
                return Err(Error::invalid(format!("alpha[{t}] must be positive before T")));
            }
        }
        for t in 1..=self.t_max {
            if self.sigma[t] <= 0.0 {
                return Err(Error::invalid(format!("sigma[{t}] must be positive for t >= 1")));
            }
        }
        for t in 1..self.t_max {
            if self.snr(t + 1) >= self.snr(t) {
                return Err(Error::invalid(format!(
                    "snr must be strictly decreasing; violated between t = {t} and t = {}",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    fn check_ordering(&self, s: usize, t: usize) -> Result<()> {
        if s > t || t > self.t_max {
            return Err(Error::invalid(format!(
                "timesteps must satisfy 0 <= s <= t <= T, got s = {s}, t = {t}, T = {}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Forward transition coefficients for q(x_t | x_s), 0 <= s <= t <= T.
    ///
    /// Rejects s > t and queries with α_s = 0 (a degenerate endpoint).
    pub fn transition(&self, s: usize, t: usize) -> Result<TransitionCoeffs> {
        self.check_ordering(s, t)?;
        if self.alpha[s] == 0.0 {
            return Err(Error::invalid(format!(
                "transition from s = {s} has alpha[s] = 0 (degenerate endpoint)"
            )));
        }
        if s == t {
            return Ok(TransitionCoeffs {
                alpha_ts: 1.0,
                var_ts: 0.0,
            });
        }
        let alpha_ts = self.alpha[t] / self.alpha[s];
        let var_ts = self.sigma[t] * self.sigma[t] - alpha_ts * alpha_ts * self.sigma[s] * self.sigma[s];
        Ok(TransitionCoeffs {
            alpha_ts,
            var_ts: var_ts.max(0.0),
        })
    }

    /// Statistics of the bridge q(x_s | x_0, x_t), 0 <= s <= t <= T, t >= 1.
    pub fn bridge(&self, s: usize, t: usize) -> Result<BridgeStats> {
        self.check_ordering(s, t)?;
        if t == 0 {
            return Err(Error::invalid("bridge requires t >= 1"));
        }
        let var_ts = self.transition(s, t)?.var_ts;
        let alpha_ts = self.transition(s, t)?.alpha_ts;
        let var_t0 = self.sigma[t] * self.sigma[t]; // σ²_{t|0} = σ_t² since σ_0 = 0
        let var_s0 = self.sigma[s] * self.sigma[s];
        let gamma = var_ts / var_t0;
        Ok(BridgeStats {
            mean_coeff_x0: gamma * self.alpha[s],
            mean_coeff_xt: alpha_ts * var_s0 / var_t0,
            variance: var_ts * var_s0 / var_t0,
        })
    }
}

/// Map a coarse index grid of K+1 points onto integer timesteps 0..=T by
/// uniform rounding: t_k = round(k·T/K). Requires 2 <= K <= T so the grid is
/// strictly increasing with t_0 = 0 and t_K = T.
pub fn coarse_grid(t_max: usize, k_steps: usize) -> Result<Vec<usize>> {
    if k_steps < 2 || k_steps > t_max {
        return Err(Error::invalid(format!(
            "coarse grid requires 2 <= K <= T, got K = {k_steps}, T = {t_max}"
        )));
    }
    let grid: Vec<usize> = (0..=k_steps)
        .map(|k| ((k * t_max) as f64 / k_steps as f64).round() as usize)
        .collect();
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("coarse grid failed to be strictly increasing"));
        }
    }
    Ok(grid)
}
