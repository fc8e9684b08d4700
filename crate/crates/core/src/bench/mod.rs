//! Throughput sweeps over rule counts, a two-point platform cost model and
//! an energy cost estimate.

mod config;
mod energy;
mod model;
mod native;
mod report;
mod stream;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{parse_bench_config, BenchConfig};
pub use energy::{estimate_energy, EnergyEstimate};
pub use model::{calibrate_profile, model_throughput, PlatformProfile, CUBIEBOARD_POWER_WATTS};
pub use native::{run_native_bench, run_native_bench_trials, DEFAULT_TRIALS};
pub use report::{emit_report, format_mbps, run_model_sweep};
pub use stream::{generate_stream, BenchPath, SegmentKind, StreamPacket, StreamSpec, TCP_HEADER_BYTES};

pub const DEFAULT_SWEEP: [u64; 10] = [0, 100, 200, 400, 800, 1600, 3200, 6400, 12800, 20000];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("energy: {0}")]
    Energy(String),
    #[error("invalid stream: {0}")]
    Stream(String),
    #[error("rule counts must be sorted ascending")]
    UnsortedSweep,
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("ruleset: {0}")]
    Ruleset(#[from] crate::ruleset::RulesetError),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Native,
    Model,
}

impl BenchMode {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::Native => "native",
            BenchMode::Model => "model",
        }
    }
}

impl std::str::FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(BenchMode::Native),
            "model" => Ok(BenchMode::Model),
            other => Err(format!("unknown mode `{other}` (native|model)")),
        }
    }
}

/// Audit data recorded for one native sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NativeAudit {
    /// Throughput of every trial, in run order.
    pub trials_mbps: Vec<f64>,
    /// Sum of rules traversed over all packets of one replay.
    pub rules_traversed: u64,
    pub data_traversed_min: u64,
    pub data_traversed_max: u64,
    pub ruleset_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n_rules: u64,
    pub throughput_mbps: f64,
    pub audit: Option<NativeAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub platform: String,
    pub points: Vec<BenchPoint>,
    pub packets_processed: u64,
    pub wall_time: Duration,
    pub ruleset_version: u64,
}

impl BenchReport {
    pub fn throughputs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.throughput_mbps).collect()
    }

    pub fn point(&self, n_rules: u64) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.n_rules == n_rules)
    }
}

pub(crate) fn check_sweep(rule_counts: &[u64]) -> Result<(), BenchError> {
    if rule_counts.windows(2).all(|w| w[0] <= w[1]) {
        Ok(())
    } else {
        Err(BenchError::UnsortedSweep)
    }
}
