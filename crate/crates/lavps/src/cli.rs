//! Command-line interface: train models, sample, benchmark, and run the
//! non-inferiority statistics.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
//! The benchmark work pool is capped by the `LAVPS_THREADS` environment
//! variable.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, Models};
use crate::checkpoint;
use crate::config::{DenoiserKind, ExperimentConfig};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::samplers::{lavps_sample, mgdm_sample, SamplerMode, SamplerStreams};

#[derive(Parser, Debug)]
#[command(
    name = "lavps",
    about = "Variational diffusion posterior sampling (MGDM) and its amortized variant (LAVPS) \
             on analytic Gaussian-mixture benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the learned denoiser and write a checkpoint.
    TrainDenoiser {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the inference model (amortizer) and write a checkpoint.
    TrainAmortizer {
        #[command(flatten)]
        common: CommonArgs,
        /// Denoiser checkpoint (omit when the config uses the analytic kind).
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Reconstruct one generated instance and write the trace.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        amortizer: Option<PathBuf>,
        /// Sampler method.
        #[arg(long, value_parser = ["mgdm", "lavps"], default_value = "mgdm")]
        method: String,
        /// Sweep configuration id (default: first of the requested method).
        #[arg(long)]
        config_id: Option<String>,
        /// Instance index within the generated stream.
        #[arg(long, default_value_t = 0)]
        instance: u64,
    },
    /// Run the full benchmark and write metrics/pareto/stats files.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        amortizer: Option<PathBuf>,
    },
    /// Paired non-inferiority test between two metrics CSVs.
    Stats {
        /// Baseline metrics CSV.
        #[arg(long)]
        baseline: PathBuf,
        /// Candidate metrics CSV.
        #[arg(long)]
        candidate: PathBuf,
        /// Non-inferiority margin Δ.
        #[arg(long, default_value_t = 0.003)]
        margin: f64,
        /// Test level α.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Run with explicit arguments; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the error path with code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

/// Entry point for the binary.
pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_denoiser(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
) -> Result<DenoiserModel> {
    match (&cfg.denoiser.kind, ckpt) {
        (DenoiserKind::Analytic, None) => Ok(DenoiserModel::analytic(cfg.build_prior()?)),
        (DenoiserKind::Analytic, Some(_)) => Err(Error::config(
            "denoiser.kind",
            "config uses the analytic denoiser; drop --denoiser",
        )),
        (DenoiserKind::Learned, Some(path)) => checkpoint::load_denoiser(path),
        (DenoiserKind::Learned, None) => Err(Error::config(
            "denoiser.kind",
            "config uses a learned denoiser; pass --denoiser <checkpoint>",
        )),
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::TrainDenoiser { common } => {
            let cfg = load_config(&common)?;
            if cfg.denoiser.kind != DenoiserKind::Learned {
                return Err(Error::config(
                    "denoiser.kind",
                    "analytic denoisers need no training",
                ));
            }
            let sched = cfg.build_schedule()?;
            let prior = cfg.build_prior()?;
            let mut rng = crate::rng::stream(cfg.seed, &[0x7464]); // "td"
            let res = crate::denoiser::train_denoiser(
                &prior,
                &sched,
                &cfg.denoiser_train_config(),
                &mut rng,
            )?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("denoiser.lvps");
            checkpoint::save_denoiser(&path, &res.model)?;
            let n = res.losses.len();
            eprintln!(
                "trained denoiser: {} steps, loss {:.6} -> {:.6}; wrote {}",
                n,
                res.losses.first().copied().unwrap_or(f64::NAN),
                res.losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
            Ok(0)
        }
        Command::TrainAmortizer { common, denoiser } => {
            let cfg = load_config(&common)?;
            let spec = cfg.amortizer_train_config().ok_or_else(|| {
                Error::config("amortizer", "config has no [amortizer] section")
            })?;
            let sched = cfg.build_schedule()?;
            let prior = cfg.build_prior()?;
            let theta = resolve_denoiser(&cfg, denoiser.as_deref())?;
            let fam = cfg.in_family();
            let mut rng = crate::rng::stream(cfg.seed, &[0x7461]); // "ta"
            let res =
                crate::amortizer::train_amortizer(&prior, &sched, &theta, &fam, &spec, &mut rng)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("amortizer.lvps");
            checkpoint::save_amortizer(&path, &res.model)?;
            let n = res.losses.len();
            eprintln!(
                "trained amortizer: {} steps, loss {:.6} -> {:.6}; wrote {}",
                n,
                res.losses.first().copied().unwrap_or(f64::NAN),
                res.losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
            Ok(0)
        }
        Command::Sample {
            common,
            denoiser,
            amortizer,
            method,
            config_id,
            instance,
        } => {
            let cfg = load_config(&common)?;
            let sched = cfg.build_schedule()?;
            let prior = cfg.build_prior()?;
            let theta = resolve_denoiser(&cfg, denoiser.as_deref())?;
            let mode = if method == "lavps" {
                SamplerMode::Lavps
            } else {
                SamplerMode::Mgdm
            };
            let grid = cfg.sampler_grid();
            let (picked_id, sampler) = match &config_id {
                Some(id) => grid
                    .iter()
                    .find(|(gid, _)| gid == id)
                    .cloned()
                    .ok_or_else(|| Error::config("config_id", format!("unknown id `{id}`")))?,
                None => grid
                    .iter()
                    .find(|(_, c)| c.mode == mode)
                    .cloned()
                    .ok_or_else(|| {
                        Error::config("sampler.modes", format!("no {method} config in the sweep"))
                    })?,
            };
            if sampler.mode != mode {
                return Err(Error::config(
                    "config_id",
                    format!("`{picked_id}` is not a {method} configuration"),
                ));
            }

            let mut inst_rng = crate::rng::stream(cfg.seed, &[0x696e_7374, 0, instance]);
            let x_star = prior.sample(&mut inst_rng);
            let op = cfg.in_family().sample(&mut inst_rng)?;
            let y = op.observe(&x_star, &mut inst_rng)?;

            let run_seed = derive_seed(cfg.seed, &[0x72756e, 0, instance, 0]);
            let mut streams = SamplerStreams::from_seed(run_seed);
            let (x0, trace) = match mode {
                SamplerMode::Mgdm => mgdm_sample(&theta, &sched, &op, &y, &sampler, &mut streams)?,
                SamplerMode::Lavps => {
                    let path = amortizer.ok_or_else(|| {
                        Error::config("amortizer", "lavps sampling needs --amortizer <checkpoint>")
                    })?;
                    let inf = checkpoint::load_amortizer(&path)?;
                    lavps_sample(&theta, &inf, &sched, &op, &y, &sampler, &mut streams)?
                }
            };

            std::fs::create_dir_all(&common.out_dir)?;
            let m = bench::mse(&x0, &x_star);
            let report = serde_json::json!({
                "instance": instance,
                "config_id": picked_id,
                "method": method,
                "x_star": x_star.as_slice(),
                "y": y.as_slice(),
                "operator": op,
                "reconstruction": x0.as_slice(),
                "mse": m,
                "psnr": bench::psnr(m),
                "grad_steps": trace.total_grad_steps(),
                "denoiser_calls": trace.denoiser_calls,
            });
            let rec_path = common.out_dir.join("reconstruction.json");
            std::fs::write(&rec_path, serde_json::to_string_pretty(&report).unwrap())?;
            let trace_path = common.out_dir.join("trace.jsonl");
            std::fs::write(&trace_path, trace.to_jsonl(cfg.bench.measure_wallclock))?;
            eprintln!(
                "wrote {} and {} (mse {m:.6})",
                rec_path.display(),
                trace_path.display()
            );
            Ok(0)
        }
        Command::Bench {
            common,
            denoiser,
            amortizer,
        } => {
            let cfg = load_config(&common)?;
            let theta = resolve_denoiser(&cfg, denoiser.as_deref())?;
            let needs_amortizer = cfg
                .sampler_grid()
                .iter()
                .any(|(_, c)| c.mode == SamplerMode::Lavps);
            let inf = match (needs_amortizer, amortizer) {
                (true, Some(path)) => Some(checkpoint::load_amortizer(&path)?),
                (true, None) => {
                    return Err(Error::config(
                        "amortizer",
                        "sweep includes lavps configurations; pass --amortizer <checkpoint>",
                    ))
                }
                (false, _) => None,
            };
            let models = Models {
                denoiser: theta,
                amortizer: inf,
            };
            let out = bench::run_experiment(&cfg, &models, &common.out_dir)?;
            eprintln!(
                "wrote {}, {}, {}",
                out.metrics_csv.display(),
                out.pareto_csv.display(),
                out.stats_json.display()
            );
            if out.failures.is_empty() {
                Ok(0)
            } else {
                for f in &out.failures {
                    eprintln!("failed run: {f}");
                }
                Ok(2)
            }
        }
        Command::Stats {
            baseline,
            candidate,
            margin,
            alpha,
            out,
        } => {
            let btext = std::fs::read_to_string(&baseline)?;
            let ctext = std::fs::read_to_string(&candidate)?;
            let brows = bench::parse_metrics_csv(&btext)?;
            let crows = bench::parse_metrics_csv(&ctext)?;
            if brows.len() != crows.len() || brows.is_empty() {
                return Err(Error::invalid(format!(
                    "paired stats need matching nonempty CSVs, got {} and {} rows",
                    brows.len(),
                    crows.len()
                )));
            }
            let mut b = brows.clone();
            let mut c = crows.clone();
            b.sort_by(|x, y| x.instance_id.cmp(&y.instance_id));
            c.sort_by(|x, y| x.instance_id.cmp(&y.instance_id));
            for (x, y) in b.iter().zip(&c) {
                if x.instance_id != y.instance_id {
                    return Err(Error::invalid(format!(
                        "instance ids do not pair up: `{}` vs `{}`",
                        x.instance_id, y.instance_id
                    )));
                }
            }
            let bs: Vec<f64> = b.iter().map(|r| r.mse).collect();
            let cs: Vec<f64> = c.iter().map(|r| r.mse).collect();
            let result = bench::non_inferiority_test(&bs, &cs, margin, alpha)?;
            let text = serde_json::to_string_pretty(&result).unwrap();
            match out {
                Some(path) => std::fs::write(&path, &text)?,
                None => println!("{text}"),
            }
            eprintln!(
                "non-inferiority: T = {}, critical = {:.4}, reject H0 = {}",
                result.t_stat, result.t_critical, result.reject_h0
            );
            Ok(0)
        }
    }
}
