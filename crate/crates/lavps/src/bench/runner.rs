//! The experiment harness: instances, the work pool, and output files.
//!
//! An experiment draws instances (prior sample, operator, observation) for a
//! validation and a test split (plus an out-of-distribution split when an
//! OOD family is configured), runs every sweep configuration on every
//! instance, and writes three artifacts:
//!
//! - `metrics.csv`: one row per (instance, configuration);
//! - `pareto.csv`: the non-dominated (mean quality, mean cost)
//!   configurations over the validation split, sorted by cost;
//! - `stats.json`: paired non-inferiority tests of every configuration
//!   against the baseline configuration on the test split.
//!
//! Per-run traces go to `traces/{instance}-{config}.jsonl`. Everything is
//! derived from the root seed; with `measure_wallclock` off (the default)
//! reruns are byte-identical. Instances run on a work pool capped by the
//! `LAVPS_THREADS` environment variable; results are reduced in job order,
//! so the thread count never affects the outputs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;

use crate::amortizer::InferenceModel;
use crate::config::ExperimentConfig;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::operators::{DegradationOperator, OperatorFamily};
use crate::prior::{exact_posterior, GaussianMixture};
use crate::rng::derive_seed;
use crate::samplers::{
    expected_denoiser_calls, lavps_sample, mgdm_sample, SamplerConfig, SamplerMode,
    SamplerStreams,
};
use crate::schedule::NoiseSchedule;

use super::metrics::{mse, psnr, sliced_w1_per_axis, RunMetrics, CSV_HEADER};
use super::pareto::{pareto_front, ParetoPoint};
use super::ttest::non_inferiority_test;

const INSTANCE_TAG: u64 = 0x696e_7374;
const RUN_TAG: u64 = 0x72756e;

/// Models consumed by the harness.
pub struct Models {
    pub denoiser: DenoiserModel,
    pub amortizer: Option<InferenceModel>,
}

/// Paths of the written artifacts plus any per-run failures.
#[derive(Debug)]
pub struct BenchOutputs {
    pub metrics_csv: PathBuf,
    pub pareto_csv: PathBuf,
    pub stats_json: PathBuf,
    pub failures: Vec<String>,
}

struct Instance {
    id: String,
    split: Split,
    x_star: DVector<f64>,
    op: DegradationOperator,
    y: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Validation,
    Test,
    Ood,
}

fn make_instances(
    cfg: &ExperimentConfig,
    prior: &GaussianMixture,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let splits: Vec<(Split, &str, usize, OperatorFamily)> = {
        let mut v = vec![
            (Split::Validation, "val", cfg.bench.n_validation, cfg.in_family()),
            (Split::Test, "test", cfg.bench.n_test, cfg.in_family()),
        ];
        if let Some(ood) = &cfg.ood_family {
            v.push((Split::Ood, "ood", cfg.bench.n_test, ood.clone()));
        }
        v
    };
    for (split_idx, (split, name, count, family)) in splits.into_iter().enumerate() {
        for i in 0..count {
            let mut rng = crate::rng::stream(cfg.seed, &[INSTANCE_TAG, split_idx as u64, i as u64]);
            let x_star = prior.sample(&mut rng);
            let op = family.sample(&mut rng)?;
            let y = op.observe(&x_star, &mut rng)?;
            out.push(Instance {
                id: format!("{name}-{i:04}"),
                split,
                x_star,
                op,
                y,
            });
        }
    }
    Ok(out)
}

fn worker_count() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("LAVPS_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(available),
        Err(_) => available,
    }
    .max(1)
}

struct Job<'a> {
    instance: &'a Instance,
    split_idx: u64,
    inst_idx: u64,
    config_id: &'a str,
    cfg_idx: u64,
    sampler: &'a SamplerConfig,
}

fn run_job(
    job: &Job<'_>,
    exp: &ExperimentConfig,
    sched: &NoiseSchedule,
    prior: &GaussianMixture,
    models: &Models,
    traces_dir: &Path,
) -> Result<RunMetrics> {
    let seed = derive_seed(
        exp.seed,
        &[RUN_TAG, job.split_idx, job.inst_idx, job.cfg_idx],
    );
    let mut streams = SamplerStreams::from_seed(seed);
    let inst = job.instance;
    let started = std::time::Instant::now();
    let (x0, trace) = match job.sampler.mode {
        SamplerMode::Mgdm => mgdm_sample(
            &models.denoiser,
            sched,
            &inst.op,
            &inst.y,
            job.sampler,
            &mut streams,
        )?,
        SamplerMode::Lavps => {
            let inf = models.amortizer.as_ref().ok_or_else(|| {
                Error::config("amortizer", "lavps configuration without an inference model")
            })?;
            lavps_sample(
                &models.denoiser,
                inf,
                sched,
                &inst.op,
                &inst.y,
                job.sampler,
                &mut streams,
            )?
        }
    };
    let wallclock = started.elapsed().as_secs_f64();
    debug_assert_eq!(
        trace.denoiser_calls,
        expected_denoiser_calls(job.sampler, sched)?
    );

    // Optional posterior-fidelity column: extra sampler reps against
    // exact-posterior oracle draws.
    let sw1 = if exp.bench.posterior_samples > 0 {
        let n = exp.bench.posterior_samples;
        let mut samples = vec![x0.clone()];
        for rep in 1..n {
            let rep_seed = derive_seed(
                exp.seed,
                &[RUN_TAG, job.split_idx, job.inst_idx, job.cfg_idx, rep as u64],
            );
            let mut rep_streams = SamplerStreams::from_seed(rep_seed);
            let (xr, _) = match job.sampler.mode {
                SamplerMode::Mgdm => mgdm_sample(
                    &models.denoiser,
                    sched,
                    &inst.op,
                    &inst.y,
                    job.sampler,
                    &mut rep_streams,
                )?,
                SamplerMode::Lavps => lavps_sample(
                    &models.denoiser,
                    models.amortizer.as_ref().expect("checked above"),
                    sched,
                    &inst.op,
                    &inst.y,
                    job.sampler,
                    &mut rep_streams,
                )?,
            };
            samples.push(xr);
        }
        let oracle = exact_posterior(prior, &inst.op, &inst.y)?;
        let mut orng = crate::rng::stream(
            exp.seed,
            &[RUN_TAG, job.split_idx, job.inst_idx, job.cfg_idx, 0xfeed],
        );
        let oracle_draws = oracle.mixture.sample_n(n, &mut orng);
        let w1 = sliced_w1_per_axis(&samples, &oracle_draws)?;
        Some(w1.iter().sum::<f64>() / w1.len() as f64)
    } else {
        None
    };

    let trace_path = traces_dir.join(format!("{}-{}.jsonl", inst.id, job.config_id));
    std::fs::write(&trace_path, trace.to_jsonl(exp.bench.measure_wallclock))?;

    let m = mse(&x0, &inst.x_star);
    Ok(RunMetrics {
        instance_id: inst.id.clone(),
        method: match job.sampler.mode {
            SamplerMode::Mgdm => "mgdm".into(),
            SamplerMode::Lavps => "lavps".into(),
        },
        config_id: job.config_id.to_string(),
        mse: m,
        psnr: psnr(m),
        sw1,
        grad_steps: trace.total_grad_steps(),
        denoiser_calls: trace.denoiser_calls,
        wallclock_s: if exp.bench.measure_wallclock {
            wallclock
        } else {
            0.0
        },
    })
}

/// Run the configured experiment and write `metrics.csv`, `pareto.csv` and
/// `stats.json` under `out_dir`.
pub fn run_experiment(
    exp: &ExperimentConfig,
    models: &Models,
    out_dir: &Path,
) -> Result<BenchOutputs> {
    exp.validate()?;
    let sched = exp.build_schedule()?;
    let prior = exp.build_prior()?;
    if models.denoiser.dim() != prior.dim() {
        return Err(Error::DimensionMismatch(
            "denoiser dimension does not match the prior".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let traces_dir = out_dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;

    let instances = make_instances(exp, &prior)?;
    let grid = exp.sampler_grid();
    let mut jobs = Vec::new();
    for (inst_idx, instance) in instances.iter().enumerate() {
        let split_idx = match instance.split {
            Split::Validation => 0u64,
            Split::Test => 1,
            Split::Ood => 2,
        };
        for (cfg_idx, (config_id, sampler)) in grid.iter().enumerate() {
            jobs.push(Job {
                instance,
                split_idx,
                inst_idx: inst_idx as u64,
                config_id,
                cfg_idx: cfg_idx as u64,
                sampler,
            });
        }
    }

    let results: Mutex<Vec<Option<std::result::Result<RunMetrics, String>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let next_job = AtomicUsize::new(0);
    let workers = worker_count().min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next_job.fetch_add(1, Ordering::Relaxed);
                if idx >= jobs.len() {
                    break;
                }
                let outcome = run_job(&jobs[idx], exp, &sched, &prior, models, &traces_dir)
                    .map_err(|e| format!("{}/{}: {e}", jobs[idx].instance.id, jobs[idx].config_id));
                results.lock().expect("results lock")[idx] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("results lock");

    let mut rows: Vec<RunMetrics> = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for outcome in results.into_iter().flatten() {
        match outcome {
            Ok(row) => rows.push(row),
            Err(msg) => failures.push(msg),
        }
    }

    // metrics.csv in job order.
    let metrics_csv = out_dir.join("metrics.csv");
    {
        let mut text = String::from(CSV_HEADER);
        for r in &rows {
            text.push('\n');
            text.push_str(&r.csv_row());
        }
        text.push('\n');
        std::fs::write(&metrics_csv, text)?;
    }

    // pareto.csv over validation means per configuration.
    let pareto_csv = out_dir.join("pareto.csv");
    {
        let mut points = Vec::new();
        for (config_id, _) in &grid {
            let vals: Vec<&RunMetrics> = rows
                .iter()
                .filter(|r| r.instance_id.starts_with("val-") && &r.config_id == config_id)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let q = vals.iter().map(|r| r.mse).sum::<f64>() / vals.len() as f64;
            let c = vals.iter().map(|r| r.denoiser_calls as f64).sum::<f64>() / vals.len() as f64;
            points.push(ParetoPoint {
                config_id: config_id.clone(),
                quality: q,
                cost: c,
            });
        }
        let front = pareto_front(&points);
        let mut text = String::from("config_id,mean_quality,mean_cost");
        for p in &front {
            text.push_str(&format!("\n{},{},{}", p.config_id, p.quality, p.cost));
        }
        text.push('\n');
        std::fs::write(&pareto_csv, text)?;
    }

    // stats.json: paired tests against the baseline configuration on the
    // test split.
    let stats_json = out_dir.join("stats.json");
    {
        let baseline_id = exp
            .bench
            .baseline_config
            .clone()
            .unwrap_or_else(|| grid[0].0.clone());
        let collect = |config_id: &str| -> Vec<(String, f64)> {
            let mut v: Vec<(String, f64)> = rows
                .iter()
                .filter(|r| r.instance_id.starts_with("test-") && r.config_id == config_id)
                .map(|r| (r.instance_id.clone(), r.mse))
                .collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        let base_scores = collect(&baseline_id);
        let mut comparisons = Vec::new();
        for (config_id, _) in &grid {
            if config_id == &baseline_id {
                continue;
            }
            let cand_scores = collect(config_id);
            // Pair by instance id; skip instances missing on either side.
            let mut b = Vec::new();
            let mut c = Vec::new();
            for (id, score) in &base_scores {
                if let Some((_, cs)) = cand_scores.iter().find(|(cid, _)| cid == id) {
                    b.push(*score);
                    c.push(*cs);
                }
            }
            let entry = if b.len() >= 2 {
                match non_inferiority_test(&b, &c, exp.bench.margin, exp.bench.alpha) {
                    Ok(r) => serde_json::json!({
                        "baseline": baseline_id,
                        "candidate": config_id,
                        "result": r,
                    }),
                    Err(e) => serde_json::json!({
                        "baseline": baseline_id,
                        "candidate": config_id,
                        "error": e.to_string(),
                    }),
                }
            } else {
                serde_json::json!({
                    "baseline": baseline_id,
                    "candidate": config_id,
                    "error": "fewer than two paired test instances",
                })
            };
            comparisons.push(entry);
        }
        let report = serde_json::json!({
            "margin": exp.bench.margin,
            "alpha": exp.bench.alpha,
            "metric": "mse",
            "comparisons": comparisons,
        });
        std::fs::write(&stats_json, serde_json::to_string_pretty(&report).unwrap())?;
    }

    Ok(BenchOutputs {
        metrics_csv,
        pareto_csv,
        stats_json,
        failures,
    })
}
