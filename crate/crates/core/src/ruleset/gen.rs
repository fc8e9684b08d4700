use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::net::Ipv4Addr;

use super::{MatchSpec, PortRange, Rule, Target};
use crate::net::{CidrBlock, Endpoint, FlowKey, Proto};

/// Parameters for the random-rule generator. Output is a pure function of
/// this record and the flow it is generated against.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleGenSpec {
    pub count: usize,
    pub seed: u64,
    /// Probability that a rule can match packets of the flow. Every other
    /// rule has a source block that excludes both flow endpoints.
    pub matchable_fraction: f64,
    pub chain: String,
}

impl RuleGenSpec {
    pub fn new(count: usize, seed: u64, chain: &str) -> Self {
        RuleGenSpec { count, seed, matchable_fraction: 0.0, chain: chain.to_string() }
    }
}

fn random_block(rng: &mut ChaCha8Rng) -> CidrBlock {
    let len = rng.random_range(8..=32u8);
    CidrBlock::new(Ipv4Addr::from(rng.random::<u32>()), len)
}

fn random_range(rng: &mut ChaCha8Rng) -> PortRange {
    if rng.random_bool(0.5) {
        PortRange::single(rng.random_range(1..=65535))
    } else {
        let lo: u16 = rng.random_range(1..=65000);
        let hi = lo.saturating_add(rng.random_range(0..=535));
        PortRange { lo, hi }
    }
}

fn range_around(rng: &mut ChaCha8Rng, port: u16) -> PortRange {
    let lo = port.saturating_sub(rng.random_range(0..=64));
    let hi = port.saturating_add(rng.random_range(0..=64));
    PortRange { lo, hi }
}

fn non_matching(rng: &mut ChaCha8Rng, flow: &FlowKey) -> MatchSpec {
    let src = loop {
        let b = random_block(rng);
        if !b.contains(flow.endpoint_lo.addr) && !b.contains(flow.endpoint_hi.addr) {
            break b;
        }
    };
    let proto = match rng.random_range(0..4) {
        0 => None,
        1 => Some(Proto::Udp),
        _ => Some(Proto::Tcp),
    };
    let dst = rng.random_bool(0.5).then(|| random_block(rng));
    let dport = proto.filter(|p| p.has_ports() && rng.random_bool(0.7)).map(|_| random_range(rng));
    MatchSpec { proto, src: Some(src), dst, dport, ..MatchSpec::default() }
}

fn matching(rng: &mut ChaCha8Rng, flow: &FlowKey) -> MatchSpec {
    let (from, to): (Endpoint, Endpoint) = if rng.random_bool(0.5) {
        (flow.endpoint_lo, flow.endpoint_hi)
    } else {
        (flow.endpoint_hi, flow.endpoint_lo)
    };
    let proto = rng.random_bool(0.8).then_some(flow.proto);
    let src = CidrBlock::new(from.addr, rng.random_range(8..=32));
    let dst = rng.random_bool(0.5).then(|| CidrBlock::new(to.addr, rng.random_range(8..=32)));
    let dport = proto
        .filter(|p| p.has_ports() && rng.random_bool(0.5))
        .map(|_| range_around(rng, to.port));
    MatchSpec { proto, src: Some(src), dst, dport, ..MatchSpec::default() }
}

/// Generates `spec.count` ACCEPT rules. Deterministic in `spec.seed`.
pub fn generate_random_rules(spec: &RuleGenSpec, flow: &FlowKey) -> Vec<Rule> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.matchable_fraction.clamp(0.0, 1.0);
    (0..spec.count)
        .map(|_| {
            let m = if rng.random_bool(p) { matching(&mut rng, flow) } else { non_matching(&mut rng, flow) };
            let mut r = Rule::new(m, Target::Accept);
            r.raw_text = r.line(&spec.chain);
            r
        })
        .collect()
}
