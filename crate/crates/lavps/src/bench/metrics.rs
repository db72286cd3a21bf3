//! Per-run metrics and their CSV serialization.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Peak-to-peak signal range; signals are normalized to [−1, 1].
const PSNR_PEAK: f64 = 2.0;

/// Mean squared error per coordinate.
pub fn mse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

/// Peak signal-to-noise ratio in dB for [−1, 1]-normalized signals.
pub fn psnr(mse: f64) -> f64 {
    10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
}

/// Per-axis 1-D Wasserstein-1 distance between two equally sized empirical
/// samples: mean absolute difference of the sorted axis values.
pub fn sliced_w1_per_axis(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid(
            "sliced W1 needs two nonempty sample sets of equal size",
        ));
    }
    let d = xs[0].len();
    let n = xs.len();
    let mut out = Vec::with_capacity(d);
    for axis in 0..d {
        let mut a: Vec<f64> = xs.iter().map(|v| v[axis]).collect();
        let mut b: Vec<f64> = ys.iter().map(|v| v[axis]).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out.push(
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n as f64,
        );
    }
    Ok(out)
}

/// One benchmark row. `sw1` is present only when the exact posterior oracle
/// was consulted; `wallclock_s` is zero unless timing was requested, since
/// measured time breaks byte-identical reruns.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub instance_id: String,
    pub method: String,
    pub config_id: String,
    pub mse: f64,
    pub psnr: f64,
    pub sw1: Option<f64>,
    pub grad_steps: usize,
    pub denoiser_calls: u64,
    pub wallclock_s: f64,
}

pub const CSV_HEADER: &str =
    "instance_id,method,config_id,mse,psnr,sw1,grad_steps,denoiser_calls,wallclock_s";

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.instance_id,
            self.method,
            self.config_id,
            self.mse,
            self.psnr,
            self.sw1.map(|v| v.to_string()).unwrap_or_default(),
            self.grad_steps,
            self.denoiser_calls,
            self.wallclock_s,
        )
    }
}

/// Parse a metrics CSV produced by this crate (used by the stats command).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<RunMetrics>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("empty metrics csv"))?;
    if header != CSV_HEADER {
        return Err(Error::invalid(format!(
            "unexpected metrics csv header: `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::invalid(format!(
                "metrics csv line {} has {} fields, expected 9",
                lineno + 2,
                f.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad {what} `{s}` on line {}", lineno + 2)))
        };
        rows.push(RunMetrics {
            instance_id: f[0].to_string(),
            method: f[1].to_string(),
            config_id: f[2].to_string(),
            mse: parse(f[3], "mse")?,
            psnr: parse(f[4], "psnr")?,
            sw1: if f[5].is_empty() {
                None
            } else {
                Some(parse(f[5], "sw1")?)
            },
            grad_steps: f[6]
                .parse()
                .map_err(|_| Error::invalid(format!("bad grad_steps on line {}", lineno + 2)))?,
            denoiser_calls: f[7]
                .parse()
                .map_err(|_| Error::invalid(format!("bad denoiser_calls on line {}", lineno + 2)))?,
            wallclock_s: parse(f[8], "wallclock_s")?,
        });
    }
    Ok(rows)
}
