//! Student-t quantiles from first principles.
//!
//! The CDF goes through the regularized incomplete beta function, evaluated
//! by the standard continued fraction (modified Lentz), and the quantile
//! inverts the CDF by bisection to 1e-10. Self-contained so the statistical
//! report never depends on an external distribution library.

use crate::error::{Error, Result};

/// ln Γ(x) by the Lanczos approximation (g = 7, n = 9), valid for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return Err(Error::invalid(format!(
            "incomplete beta needs x in [0,1], a,b > 0; got x={x}, a={a}, b={b}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(x, a, b) / a)
    } else {
        Ok(1.0 - front * beta_cf(1.0 - x, b, a) / b)
    }
}

/// CDF of the Student t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(x: f64, dof: f64) -> Result<f64> {
    if !(dof > 0.0) {
        return Err(Error::invalid("student t needs dof > 0"));
    }
    let z = dof / (dof + x * x);
    let half_tail = 0.5 * incomplete_beta(z, 0.5 * dof, 0.5)?;
    Ok(if x >= 0.0 { 1.0 - half_tail } else { half_tail })
}

/// p-quantile of the Student t distribution, by bisection to 1e-10.
pub fn student_t_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::invalid(format!("quantile needs p in (0,1), got {p}")));
    }
    if !(dof > 0.0) {
        return Err(Error::invalid("student t needs dof > 0"));
    }
    // Symmetric distribution: solve on the positive half.
    if p < 0.5 {
        return Ok(-student_t_quantile(1.0 - p, dof)?);
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while student_t_cdf(hi, dof)? < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::invalid("t quantile bracket exceeded 1e12"));
        }
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, dof)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
