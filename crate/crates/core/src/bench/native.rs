use std::hint::black_box;
use std::time::{Duration, Instant};

use super::{check_sweep, generate_stream, BenchError, BenchMode, BenchPoint, BenchReport, NativeAudit, SegmentKind, StreamSpec};
use crate::engine::Engine;
use crate::net::{FlowKey, Proto};
use crate::ruleset::{generate_random_rules, RuleGenSpec, Ruleset};

pub const DEFAULT_TRIALS: usize = 3;

/// Sweeps `rule_counts` with the default number of trials per point.
pub fn run_native_bench(
    engine: &mut Engine,
    spec: &StreamSpec,
    rule_counts: &[u64],
    seed: u64,
) -> Result<BenchReport, BenchError> {
    run_native_bench_trials(engine, spec, rule_counts, seed, DEFAULT_TRIALS)
}

/// For each rule count, installs that many non-matching random rules on
/// the stream's chain (the chain policy accepts the flow), replays the
/// stream `trials` times against a clean connection table and records the
/// median payload throughput.
pub fn run_native_bench_trials(
    engine: &mut Engine,
    spec: &StreamSpec,
    rule_counts: &[u64],
    seed: u64,
    trials: usize,
) -> Result<BenchReport, BenchError> {
    check_sweep(rule_counts)?;
    spec.validate().map_err(BenchError::Stream)?;
    if trials == 0 {
        return Err(BenchError::NoTrials);
    }
    let stream = generate_stream(spec);
    let payload_bits = spec.total_bytes as f64 * 8.0;
    let flow = FlowKey::new(Proto::Tcp, spec.client, spec.server);
    let chain = spec.path.chain();
    let started = Instant::now();
    let mut packets_processed = 0u64;
    let mut points = Vec::with_capacity(rule_counts.len());

    for (i, &n) in rule_counts.iter().enumerate() {
        let rules = generate_random_rules(&RuleGenSpec::new(n as usize, seed.wrapping_add(n), chain), &flow);
        let rs = Ruleset::new().extend_chain(chain, rules)?.with_version(i as u64 + 1);
        let digest = rs.checksum().to_hex();
        engine.swap_ruleset(rs).map_err(crate::ruleset::RulesetError::from)?;

        let mut trial_mbps = Vec::with_capacity(trials);
        let mut audit = NativeAudit {
            trials_mbps: Vec::new(),
            rules_traversed: 0,
            data_traversed_min: u64::MAX,
            data_traversed_max: 0,
            ruleset_sha256: digest,
        };
        for t in 0..trials {
            engine.clear_connections();
            let elapsed = if t == 0 {
                let t0 = Instant::now();
                for sp in &stream {
                    let d = engine.process_packet(&sp.packet);
                    audit.rules_traversed += d.rules_traversed;
                    if matches!(sp.kind, SegmentKind::Data { .. }) {
                        audit.data_traversed_min = audit.data_traversed_min.min(d.rules_traversed);
                        audit.data_traversed_max = audit.data_traversed_max.max(d.rules_traversed);
                    }
                }
                t0.elapsed()
            } else {
                let t0 = Instant::now();
                for sp in &stream {
                    black_box(engine.process_packet(black_box(&sp.packet)));
                }
                t0.elapsed()
            };
            packets_processed += stream.len() as u64;
            trial_mbps.push(payload_bits / elapsed.max(Duration::from_nanos(1)).as_secs_f64() / 1e6);
        }
        if audit.data_traversed_min == u64::MAX {
            audit.data_traversed_min = 0;
        }
        audit.trials_mbps = trial_mbps.clone();
        trial_mbps.sort_by(f64::total_cmp);
        let median = trial_mbps[trial_mbps.len() / 2];
        log::debug!("native n={n} median={median:.3} Mbps trials={:?}", audit.trials_mbps);
        points.push(BenchPoint { n_rules: n, throughput_mbps: median, audit: Some(audit) });
    }
    engine.clear_connections();

    Ok(BenchReport {
        mode: BenchMode::Native,
        platform: "host".to_string(),
        points,
        packets_processed,
        wall_time: started.elapsed(),
        ruleset_version: engine.ruleset().version(),
    })
}
