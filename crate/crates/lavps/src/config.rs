//! Experiment configuration: one TOML file drives training, sampling and
//! the benchmark harness.
//!
//! Validation errors name the offending key and value. Parsing, serializing
//! and re-parsing a config is the identity on its contents.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::amortizer::{AmortizerTrainConfig, MidpointWeights};
use crate::denoiser::DenoiserTrainConfig;
use crate::error::{Error, Result};
use crate::operators::{DegradationOperator, OperatorFamily};
use crate::prior::GaussianMixture;
use crate::samplers::{SamplerConfig, SamplerMode};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t: usize,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
}

fn default_train_steps() -> usize {
    4000
}
fn default_batch() -> usize {
    64
}
fn default_train_lr() -> f64 {
    2e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizerSpec {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
    pub r_switch: f64,
    #[serde(default = "default_omega")]
    pub omega: MidpointWeights,
}

fn default_omega() -> MidpointWeights {
    MidpointWeights::PrevStep
}

/// The sampler sweep: the cartesian product of these lists is the set of
/// benchmark configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSweep {
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_reps")]
    pub gibbs_reps: usize,
    pub modes: Vec<SamplerMode>,
    pub g_start: Vec<usize>,
    pub g_end: Vec<usize>,
    pub eta: Vec<f64>,
    pub ddim_steps: Vec<usize>,
    pub r_switch: Vec<f64>,
    #[serde(default = "default_omega")]
    pub omega: MidpointWeights,
}

fn default_k_steps() -> usize {
    100
}
fn default_reps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    #[serde(default = "default_n_validation")]
    pub n_validation: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-instance posterior samples for the sliced-W1 column (0 = skip).
    #[serde(default)]
    pub posterior_samples: usize,
    /// Write measured wall-clock into outputs. Breaks byte-identical reruns.
    #[serde(default)]
    pub measure_wallclock: bool,
    /// Baseline config id for the paired tests; defaults to the first
    /// configuration of the sweep.
    #[serde(default)]
    pub baseline_config: Option<String>,
}

fn default_n_validation() -> usize {
    32
}
fn default_n_test() -> usize {
    300
}
fn default_margin() -> f64 {
    0.003
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_validation: default_n_validation(),
            n_test: default_n_test(),
            margin: default_margin(),
            alpha: default_alpha(),
            posterior_samples: 0,
            measure_wallclock: false,
            baseline_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub prior: PriorSpec,
    /// Fixed in-distribution operator (exactly one of `operator` /
    /// `operator_family` must be present).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<DegradationOperator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_family: Option<OperatorFamily>,
    /// Out-of-distribution family for robustness evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_family: Option<OperatorFamily>,
    pub denoiser: DenoiserSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amortizer: Option<AmortizerSpec>,
    pub sampler: SamplerSweep,
    #[serde(default)]
    pub bench: BenchSpec,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config("<toml>", format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config("<toml>", format!("serialize error: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.t < 2 {
            return Err(Error::config("schedule.t", format!("needs T >= 2, got {}", self.schedule.t)));
        }
        let d = self
            .prior
            .means
            .first()
            .map(|m| m.len())
            .unwrap_or(0);
        if d == 0 {
            return Err(Error::config("prior.means", "must be nonempty"));
        }
        if let Some(op) = &self.operator {
            if op.sigma_y() <= 0.0 {
                return Err(Error::config(
                    "operator.sigma_y",
                    format!("must be positive, got {}", op.sigma_y()),
                ));
            }
            if op.in_dim() != d {
                return Err(Error::config(
                    "operator.dim",
                    format!("operator dim {} != prior dim {d}", op.in_dim()),
                ));
            }
        }
        match (&self.operator, &self.operator_family) {
            (None, None) => {
                return Err(Error::config(
                    "operator",
                    "exactly one of `operator` / `operator_family` is required",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "operator_family",
                    "exactly one of `operator` / `operator_family` is allowed",
                ))
            }
            _ => {}
        }
        if let Some(fam) = &self.operator_family {
            fam.validate()?;
            if fam.dim() != d {
                return Err(Error::config(
                    "operator_family.dim",
                    format!("family dim {} != prior dim {d}", fam.dim()),
                ));
            }
        }
        if let Some(fam) = &self.ood_family {
            fam.validate()?;
            if fam.dim() != d {
                return Err(Error::config(
                    "ood_family.dim",
                    format!("family dim {} != prior dim {d}", fam.dim()),
                ));
            }
        }
        let sw = &self.sampler;
        for (key, empty) in [
            ("sampler.modes", sw.modes.is_empty()),
            ("sampler.g_start", sw.g_start.is_empty()),
            ("sampler.g_end", sw.g_end.is_empty()),
            ("sampler.eta", sw.eta.is_empty()),
            ("sampler.ddim_steps", sw.ddim_steps.is_empty()),
            ("sampler.r_switch", sw.r_switch.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "grid must be nonempty"));
            }
        }
        if sw.modes.contains(&SamplerMode::Lavps) && self.amortizer.is_none() {
            return Err(Error::config(
                "amortizer",
                "lavps mode in the sweep requires an [amortizer] section",
            ));
        }
        if let Some(am) = &self.amortizer {
            if !(0.0..=1.0).contains(&am.r_switch) {
                return Err(Error::config("amortizer.r_switch", "must lie in [0, 1]"));
            }
            // The inference model serves exactly the timestep subset it was
            // trained for, so lavps sweep entries must share its r_switch.
            if sw.modes.contains(&SamplerMode::Lavps)
                && sw.r_switch.iter().any(|&r| r != am.r_switch)
            {
                return Err(Error::config(
                    "sampler.r_switch",
                    format!(
                        "lavps configurations must use the amortizer's r_switch ({});                          sweep other values in separate configs with their own checkpoints",
                        am.r_switch
                    ),
                ));
            }
        }
        // The sweep configs must validate against the schedule.
        let sched = self.build_schedule()?;
        for (id, cfg) in self.sampler_grid() {
            cfg.validate(&sched)
                .map_err(|e| Error::config("sampler", format!("config `{id}`: {e}")))?;
        }
        if self.bench.n_validation == 0 && self.bench.n_test == 0 {
            return Err(Error::config("bench.n_validation", "needs at least one instance"));
        }
        self.build_prior()?;
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule.t, self.schedule.kind)
    }

    pub fn build_prior(&self) -> Result<GaussianMixture> {
        let means: Vec<DVector<f64>> = self
            .prior
            .means
            .iter()
            .map(|m| DVector::from_vec(m.clone()))
            .collect();
        let covs: Vec<DMatrix<f64>> = self
            .prior
            .covs
            .iter()
            .map(|c| {
                let rows = c.len();
                let cols = c.first().map(|r| r.len()).unwrap_or(0);
                let flat: Vec<f64> = c.iter().flatten().copied().collect();
                DMatrix::from_row_slice(rows, cols, &flat)
            })
            .collect();
        GaussianMixture::new(self.prior.weights.clone(), means, covs)
            .map_err(|e| Error::config("prior", e.to_string()))
    }

    /// The in-distribution operator family (a fixed operator wraps into the
    /// degenerate family).
    pub fn in_family(&self) -> OperatorFamily {
        match (&self.operator, &self.operator_family) {
            (Some(op), None) => OperatorFamily::Fixed { op: op.clone() },
            (None, Some(fam)) => fam.clone(),
            _ => unreachable!("validated"),
        }
    }

    /// Amortizer training config bound to the sweep's sampling grid.
    pub fn amortizer_train_config(&self) -> Option<AmortizerTrainConfig> {
        self.amortizer.as_ref().map(|a| AmortizerTrainConfig {
            steps: a.steps,
            batch: a.batch,
            lr: a.lr,
            r_switch: a.r_switch,
            omega: a.omega,
            grid_k: self.sampler.k_steps,
        })
    }

    pub fn denoiser_train_config(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            weights: vec![1.0; self.schedule.t],
            batch: self.denoiser.batch,
            steps: self.denoiser.steps,
            lr: self.denoiser.lr,
        }
    }

    /// Expand the sweep into (config id, sampler config) pairs. Ids are
    /// deterministic: `{mode}-gs{g_start}-ge{g_end}-eta{eta}-m{M}-rs{r_switch}`.
    pub fn sampler_grid(&self) -> Vec<(String, SamplerConfig)> {
        let sw = &self.sampler;
        let mut out = Vec::new();
        for &mode in &sw.modes {
            for &g_start in &sw.g_start {
                for &g_end in &sw.g_end {
                    for &eta in &sw.eta {
                        for &m in &sw.ddim_steps {
                            for &r_switch in &sw.r_switch {
                                let tag = match mode {
                                    SamplerMode::Mgdm => "mgdm",
                                    SamplerMode::Lavps => "lavps",
                                };
                                let id = format!(
                                    "{tag}-gs{g_start}-ge{g_end}-eta{eta}-m{m}-rs{r_switch}"
                                );
                                out.push((
                                    id,
                                    SamplerConfig {
                                        mode,
                                        k_steps: sw.k_steps,
                                        gibbs_reps: sw.gibbs_reps,
                                        ddim_steps: m,
                                        eta,
                                        g_start,
                                        g_end,
                                        r_switch,
                                        omega: sw.omega,
                                        likelihood_off: false,
                                    },
                                ));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
