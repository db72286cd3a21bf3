//! Benchmark harness: metrics, Pareto extraction, the paired
//! non-inferiority test, and the experiment runner.

pub mod metrics;
pub mod pareto;
pub mod runner;
pub mod student_t;
pub mod ttest;

pub use metrics::{mse, parse_metrics_csv, psnr, sliced_w1_per_axis, RunMetrics, CSV_HEADER};
pub use pareto::{pareto_front, pareto_indices, ParetoPoint};
pub use runner::{run_experiment, BenchOutputs, Models};
pub use student_t::{incomplete_beta, student_t_cdf, student_t_quantile};
pub use ttest::{non_inferiority_test, NonInferiorityResult};
