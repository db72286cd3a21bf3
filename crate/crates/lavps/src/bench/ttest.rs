//! Paired one-sided non-inferiority t-test.
//!
//! For paired per-instance scores (lower is better) with differences
//! δ_i = baseline_i − candidate_i and margin Δ > 0, the hypotheses are
//! H0: δ ≤ −Δ (candidate worse by at least Δ) against H1: δ > −Δ. The
//! statistic is T = (δ̄ + Δ)/(s̄/√n), rejected when T exceeds the
//! (1 − α)-quantile of the Student t distribution with n − 1 degrees of
//! freedom. Zero-variance differences resolve by the sign of δ̄ + Δ
//! (T = ±∞); the 0/0 boundary case is reported as an explicit error.

use serde::{Serialize, Serializer};

use super::student_t::student_t_quantile;
use crate::error::{Error, Result};

fn serialize_possibly_infinite<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NonInferiorityResult {
    pub n: usize,
    pub mean_delta: f64,
    pub sd_delta: f64,
    pub margin: f64,
    pub alpha: f64,
    #[serde(serialize_with = "serialize_possibly_infinite")]
    pub t_stat: f64,
    pub t_critical: f64,
    pub reject_h0: bool,
    /// True when the differences had zero variance and the statistic was
    /// resolved by the T = ±∞ convention.
    pub degenerate: bool,
}

/// Run the paired test on equal-length score vectors (lower is better).
pub fn non_inferiority_test(
    scores_baseline: &[f64],
    scores_candidate: &[f64],
    margin: f64,
    alpha: f64,
) -> Result<NonInferiorityResult> {
    let n = scores_baseline.len();
    if n != scores_candidate.len() {
        return Err(Error::invalid(format!(
            "paired test needs equal lengths, got {n} and {}",
            scores_candidate.len()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("paired test needs n >= 2"));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("non-inferiority margin must be positive"));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let deltas: Vec<f64> = scores_baseline
        .iter()
        .zip(scores_candidate)
        .map(|(b, c)| b - c)
        .collect();
    let t_critical = student_t_quantile(1.0 - alpha, (n - 1) as f64)?;

    // Zero-variance detection must be exact: a mean computed as Σδ/n can
    // differ from n identical deltas by an ulp, so compare the deltas
    // directly.
    let all_equal = deltas.windows(2).all(|w| w[0] == w[1]);
    let (mean, sd, t_stat, degenerate) = if all_equal {
        let mean = deltas[0];
        let shifted = mean + margin;
        if shifted == 0.0 {
            return Err(Error::invalid(
                "degenerate test: zero variance with mean delta exactly at the margin boundary",
            ));
        }
        let t = if shifted > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        (mean, 0.0, t, true)
    } else {
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var =
            deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        (mean, sd, (mean + margin) / (sd / (n as f64).sqrt()), false)
    };
    Ok(NonInferiorityResult {
        n,
        mean_delta: mean,
        sd_delta: sd,
        margin,
        alpha,
        t_stat,
        t_critical,
        reject_h0: t_stat > t_critical,
        degenerate,
    })
}
