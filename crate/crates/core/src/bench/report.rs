use std::fmt::Write as _;
use std::time::Instant;

use super::{check_sweep, model_throughput, BenchError, BenchMode, BenchPoint, BenchReport, PlatformProfile};
use crate::net::LinkPreset;

/// Evaluates the cost model of `profile` at every requested rule count.
pub fn run_model_sweep(profile: &PlatformProfile, rule_counts: &[u64]) -> Result<BenchReport, BenchError> {
    check_sweep(rule_counts)?;
    let started = Instant::now();
    let points = rule_counts
        .iter()
        .map(|&n| BenchPoint { n_rules: n, throughput_mbps: model_throughput(profile, n), audit: None })
        .collect();
    Ok(BenchReport {
        mode: BenchMode::Model,
        platform: profile.name.clone(),
        points,
        packets_processed: 0,
        wall_time: started.elapsed(),
        ruleset_version: 0,
    })
}

/// Six decimals with trailing zeros removed: `58`, `29.741379`.
pub fn format_mbps(v: f64) -> String {
    if !v.is_finite() {
        return "NA".to_string();
    }
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

pub fn emit_report(report: &BenchReport, presets: Option<&[LinkPreset]>) -> String {
    let mut out = String::from("n_rules,throughput_mbps,mode,platform\n");
    for p in &report.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.n_rules,
            format_mbps(p.throughput_mbps),
            report.mode.name(),
            report.platform
        );
    }
    for preset in presets.unwrap_or(&[]) {
        let _ = writeln!(out, "preset,{},{}", preset.name(), preset.bandwidth_text());
    }
    out
}
