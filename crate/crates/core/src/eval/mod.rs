//! Metrics, perturbation sweeps, cross-dataset aggregation and reports.

pub mod aggregate;
pub mod metrics;
pub mod report;
pub mod sweep;

pub use aggregate::{average_ranks, friedman_test, relative_percent_change, FriedmanResult, Metric, RankTable};
pub use metrics::{brier_ipcw, concordance_index, integrated_brier, negll_metric};
pub use report::emit_report;
pub use sweep::{attack_sweep, censoring_km, Attack, MetricRecord, SweepConfig, DEFAULT_EPS_GRID};
