//! The packet path.
//!
//! Inbound packets (an ingress interface is set) traverse nat PREROUTING,
//! then filter INPUT when addressed to this host, otherwise filter FORWARD
//! followed by nat POSTROUTING. Locally generated packets traverse filter
//! OUTPUT then nat POSTROUTING. The nat chains are consulted only for the
//! first packet of a connection; later packets reuse the rewrite cached on
//! the connection entry. Every chain is a linear first-match scan.

pub mod conntrack;
mod nat;
mod stats;

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::net::{Endpoint, FlowKey, Packet, Proto};
use crate::ruleset::{
    ConnState, MatchSpec, NatTo, Policy, Rule, Ruleset, Table, Target, ValidationError, FORWARD,
    INPUT, OUTPUT, POSTROUTING, PREROUTING,
};

pub use conntrack::{ConnEntry, Direction, NatRewrite, TcpState, Timeouts, Tuple};
pub use nat::PortPool;
pub use stats::{PolicyHits, RuleStats, StatsSnapshot};

/// Time source, as an offset from the Unix epoch.
pub trait Clock: Send {
    fn now(&self) -> Duration;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default()
    }
}

/// Settable clock for tests and replays. Clones share the same time.
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: Duration) -> Self {
        let c = ManualClock::default();
        c.set(start);
        c
    }

    pub fn set(&self, t: Duration) {
        self.0.store(t.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        self.0.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub conn_capacity: usize,
    pub timeouts: Timeouts,
    /// Source address MASQUERADE rewrites to.
    pub masquerade_addr: Ipv4Addr,
    pub nat_port_lo: u16,
    pub nat_port_hi: u16,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            conn_capacity: 65536,
            timeouts: Timeouts::default(),
            masquerade_addr: Ipv4Addr::new(203, 0, 113, 1),
            nat_port_lo: 32768,
            nat_port_hi: 60999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Accept,
    Drop,
    Reject,
    /// End of a user chain or RETURN: the caller resumes.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub matched_rule_index: Option<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainEvaluation {
    pub verdict: Verdict,
    pub rules_traversed: u64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    DeliveredLocal,
    Forwarded,
    Dropped,
    Rejected,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::DeliveredLocal => "DELIVERED_LOCAL",
            Outcome::Forwarded => "FORWARDED",
            Outcome::Dropped => "DROPPED",
            Outcome::Rejected => "REJECTED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Log,
    RejectNotify,
    NatApplied,
    NatFailure,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Log => "LOG",
            EventKind::RejectNotify => "REJECT_NOTIFY",
            EventKind::NatApplied => "NAT_APPLIED",
            EventKind::NatFailure => "NAT_FAILURE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disposition {
    pub outcome: Outcome,
    /// The packet as it left the engine (after any NAT).
    pub final_packet: Packet,
    /// Number of rule-match evaluations performed for this packet.
    pub rules_traversed: u64,
    pub events: Vec<Event>,
    pub conn_state: ConnState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceStep {
    Rule { chain: String, index: usize, matched: bool, text: String },
    Policy { chain: String, policy: Policy },
}

impl MatchSpec {
    pub fn matches(&self, p: &Packet, state: ConnState) -> bool {
        if let Some(proto) = self.proto {
            if proto != p.proto {
                return false;
            }
        }
        if let Some(b) = &self.src {
            if !b.contains(p.src) {
                return false;
            }
        }
        if let Some(b) = &self.dst {
            if !b.contains(p.dst) {
                return false;
            }
        }
        if let Some(r) = &self.sport {
            if !r.contains(p.sport) {
                return false;
            }
        }
        if let Some(r) = &self.dport {
            if !r.contains(p.dport) {
                return false;
            }
        }
        if let Some(name) = &self.in_iface {
            if p.in_iface.as_ref().map(|i| i.as_str()) != Some(name.as_str()) {
                return false;
            }
        }
        if let Some(name) = &self.out_iface {
            if p.out_iface.as_ref().map(|i| i.as_str()) != Some(name.as_str()) {
                return false;
            }
        }
        if let Some(states) = &self.conn_states {
            if !states.contains(state) {
                return false;
            }
        }
        true
    }
}

pub fn match_rule(r: &Rule, p: &Packet, state: ConnState) -> bool {
    r.match_spec.matches(p, state)
}

#[derive(Debug, Clone)]
enum Action {
    Accept,
    Drop,
    Reject,
    Log,
    Snat(NatTo),
    Dnat(NatTo),
    Masquerade,
    Jump(usize),
    Return,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    spec: MatchSpec,
    action: Action,
    text: String,
}

#[derive(Debug, Clone)]
struct CompiledChain {
    name: String,
    policy: Option<Policy>,
    rules: Vec<CompiledRule>,
}

/// Ruleset lowered for the packet path: chains in a vector, jumps resolved
/// to indices.
#[derive(Debug, Clone)]
struct Program {
    chains: Vec<CompiledChain>,
    by_name: HashMap<String, usize>,
    input: usize,
    forward: usize,
    output: usize,
    prerouting: usize,
    postrouting: usize,
}

impl Program {
    fn compile(rs: &Ruleset) -> Program {
        let mut chains = Vec::new();
        let mut by_name = HashMap::new();
        for table in [Table::Filter, Table::Nat] {
            for c in rs.chains(table) {
                by_name.insert(c.name.clone(), chains.len());
                chains.push(c);
            }
        }
        let compiled = chains
            .into_iter()
            .map(|c| CompiledChain {
                name: c.name.clone(),
                policy: c.policy,
                rules: c
                    .rules
                    .iter()
                    .map(|r| CompiledRule {
                        spec: r.match_spec.clone(),
                        action: match &r.target {
                            Target::Accept => Action::Accept,
                            Target::Drop => Action::Drop,
                            Target::Reject => Action::Reject,
                            Target::Log => Action::Log,
                            Target::Snat(to) => Action::Snat(*to),
                            Target::Dnat(to) => Action::Dnat(*to),
                            Target::Masquerade => Action::Masquerade,
                            Target::Jump(name) => Action::Jump(by_name[name]),
                            Target::Return => Action::Return,
                        },
                        text: r.line(&c.name),
                    })
                    .collect(),
            })
            .collect();
        Program {
            chains: compiled,
            input: by_name[INPUT],
            forward: by_name[FORWARD],
            output: by_name[OUTPUT],
            prerouting: by_name[PREROUTING],
            postrouting: by_name[POSTROUTING],
            by_name,
        }
    }
}

#[derive(Debug, Clone)]
struct Counters {
    rules: Vec<Vec<(u64, u64)>>,
    policy: Vec<u64>,
    packets: u64,
    bytes: u64,
}

impl Counters {
    fn for_program(p: &Program) -> Counters {
        Counters {
            rules: p.chains.iter().map(|c| vec![(0, 0); c.rules.len()]).collect(),
            policy: vec![0; p.chains.len()],
            packets: 0,
            bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stop {
    Accept,
    Drop,
    Reject,
    Snat(NatTo),
    Dnat(NatTo),
    Masquerade,
}

struct Walk<'a> {
    program: &'a Program,
    counters: &'a mut Counters,
    traversed: u64,
    events: Vec<Event>,
    trace: Option<&'a mut Vec<TraceStep>>,
}

impl Walk<'_> {
    /// `None` when the chain ran off its end or hit RETURN.
    fn run(&mut self, ci: usize, p: &Packet, state: ConnState) -> Option<(Stop, (usize, usize))> {
        let program = self.program;
        let chain = &program.chains[ci];
        for (ri, rule) in chain.rules.iter().enumerate() {
            self.traversed += 1;
            let hit = rule.spec.matches(p, state);
            if let Some(t) = self.trace.as_deref_mut() {
                t.push(TraceStep::Rule {
                    chain: chain.name.clone(),
                    index: ri,
                    matched: hit,
                    text: rule.text.clone(),
                });
            }
            if !hit {
                continue;
            }
            let c = &mut self.counters.rules[ci][ri];
            c.0 += 1;
            c.1 += u64::from(p.size_bytes);
            let stop = match &rule.action {
                Action::Accept => Stop::Accept,
                Action::Drop => Stop::Drop,
                Action::Reject => Stop::Reject,
                Action::Snat(to) => Stop::Snat(*to),
                Action::Dnat(to) => Stop::Dnat(*to),
                Action::Masquerade => Stop::Masquerade,
                Action::Log => {
                    self.events.push(Event {
                        kind: EventKind::Log,
                        detail: format!("chain={} rule={} {}", chain.name, ri, p),
                    });
                    continue;
                }
                Action::Jump(target) => match self.run(*target, p, state) {
                    Some(hit) => return Some(hit),
                    None => continue,
                },
                Action::Return => return None,
            };
            return Some((stop, (ci, ri)));
        }
        None
    }

    fn run_builtin(&mut self, ci: usize, p: &Packet, state: ConnState) -> (Stop, Option<(usize, usize)>) {
        match self.run(ci, p, state) {
            Some((stop, at)) => (stop, Some(at)),
            None => {
                self.counters.policy[ci] += 1;
                let chain = &self.program.chains[ci];
                let policy = chain.policy.unwrap_or(Policy::Accept);
                if let Some(t) = self.trace.as_deref_mut() {
                    t.push(TraceStep::Policy { chain: chain.name.clone(), policy });
                }
                let stop = match policy {
                    Policy::Accept => Stop::Accept,
                    Policy::Drop => Stop::Drop,
                };
                (stop, None)
            }
        }
    }
}

enum Located {
    Found(FlowKey, Direction),
    /// An entry exists but is expired, or is closed and being reopened.
    Stale(FlowKey),
    Absent,
}

pub struct Engine {
    ruleset: Arc<Ruleset>,
    program: Program,
    counters: Counters,
    conns: HashMap<FlowKey, ConnEntry>,
    /// Post-NAT flow key to the original key of the entry it belongs to.
    aliases: HashMap<FlowKey, FlowKey>,
    pool: PortPool,
    config: EngineConfig,
    clock: Box<dyn Clock>,
    started: Duration,
    evictions: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("ruleset_version", &self.ruleset.version())
            .field("conns", &self.conns.len())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(ruleset: Ruleset) -> Result<Engine, ValidationError> {
        Engine::with_config(ruleset, EngineConfig::default(), Box::new(SystemClock))
    }

    pub fn with_config(
        ruleset: Ruleset,
        config: EngineConfig,
        clock: Box<dyn Clock>,
    ) -> Result<Engine, ValidationError> {
        ruleset.validate()?;
        let program = Program::compile(&ruleset);
        let counters = Counters::for_program(&program);
        let started = clock.now();
        Ok(Engine {
            ruleset: Arc::new(ruleset),
            program,
            counters,
            conns: HashMap::new(),
            aliases: HashMap::new(),
            pool: PortPool::new(config.masquerade_addr, config.nat_port_lo, config.nat_port_hi),
            config,
            clock,
            started,
            evictions: 0,
        })
    }

    pub fn ruleset(&self) -> &Ruleset {
        &self.ruleset
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn conn_count(&self) -> usize {
        self.conns.len()
    }

    pub fn conn_entry(&self, p: &Packet) -> Option<&ConnEntry> {
        let k = p.flow_key();
        self.conns.get(&k).or_else(|| self.aliases.get(&k).and_then(|o| self.conns.get(o)))
    }

    pub fn conn_entries(&self) -> impl Iterator<Item = &ConnEntry> {
        self.conns.values()
    }

    pub fn nat_ports_in_use(&self) -> usize {
        self.pool.in_use()
    }

    /// Replaces the active ruleset. Counters restart from zero; tracked
    /// connections, including their NAT rewrites, carry over. An invalid
    /// ruleset leaves the engine untouched.
    pub fn swap_ruleset(&mut self, rs: Ruleset) -> Result<(), ValidationError> {
        rs.validate()?;
        let program = Program::compile(&rs);
        self.counters = Counters::for_program(&program);
        self.program = program;
        self.ruleset = Arc::new(rs);
        Ok(())
    }

    fn locate(&self, p: &Packet, now: Duration) -> Located {
        let k = p.flow_key();
        let key = if self.conns.contains_key(&k) {
            k
        } else if let Some(orig) = self.aliases.get(&k) {
            *orig
        } else {
            return Located::Absent;
        };
        let e = &self.conns[&key];
        if now.saturating_sub(e.last_seen) > self.config.timeouts.for_entry(e) {
            return Located::Stale(key);
        }
        if e.key.proto == Proto::Tcp && e.state == TcpState::Closed && p.tcp_flags.is_syn_only() {
            return Located::Stale(key);
        }
        let dir = if k == key { e.direction_of(p) } else { Direction::Reply };
        Located::Found(key, dir)
    }

    pub fn conntrack_classify(&self, p: &Packet) -> ConnState {
        match self.locate(p, self.clock.now()) {
            Located::Found(k, dir) => conntrack::classify(Some((&self.conns[&k], dir)), p),
            _ => conntrack::classify(None, p),
        }
    }

    fn remove_entry(&mut self, key: &FlowKey) {
        if let Some(e) = self.conns.remove(key) {
            if let Some(n) = e.nat_rewrite {
                let tk = FlowKey::new(e.key.proto, n.translated.src, n.translated.dst);
                if tk != e.key {
                    self.aliases.remove(&tk);
                }
                if n.translated.src != n.original.src {
                    self.pool.release(e.key.proto, n.translated.src);
                }
            }
        }
    }

    fn evict_one(&mut self) {
        let t = self.config.timeouts;
        let victim = self
            .conns
            .values()
            .min_by_key(|e| (e.last_seen + t.for_entry(e), e.key))
            .map(|e| e.key);
        if let Some(k) = victim {
            self.remove_entry(&k);
            self.evictions += 1;
        }
    }

    /// Drops entries idle longer than their state's timeout.
    pub fn expire_connections(&mut self, now: Duration) -> usize {
        let t = self.config.timeouts;
        let stale: Vec<FlowKey> = self
            .conns
            .values()
            .filter(|e| now.saturating_sub(e.last_seen) > t.for_entry(e))
            .map(|e| e.key)
            .collect();
        for k in &stale {
            self.remove_entry(k);
        }
        stale.len()
    }

    /// Forgets every tracked connection and releases all NAT ports.
    pub fn clear_connections(&mut self) {
        self.conns.clear();
        self.aliases.clear();
        self.pool = PortPool::new(self.config.masquerade_addr, self.config.nat_port_lo, self.config.nat_port_hi);
    }

    /// Accounts an accepted packet against the connection table.
    fn conntrack_update(&mut self, p: &Packet, found: Option<(FlowKey, Direction)>, nat: Option<NatRewrite>, now: Duration) {
        match found {
            Some((k, dir)) => {
                if let Some(e) = self.conns.get_mut(&k) {
                    e.last_seen = now;
                    if p.proto == Proto::Tcp {
                        e.state = conntrack::next_state(e.state, dir, p.tcp_flags);
                    }
                }
            }
            None if conntrack::opens_entry(p) => {
                while self.conns.len() >= self.config.conn_capacity.max(1) {
                    self.evict_one();
                }
                let key = p.flow_key();
                if let Some(n) = &nat {
                    let tk = FlowKey::new(p.proto, n.translated.src, n.translated.dst);
                    if tk != key {
                        self.aliases.insert(tk, key);
                    }
                }
                self.conns.insert(
                    key,
                    ConnEntry {
                        key,
                        state: conntrack::initial_state(p),
                        initiator: p.src_endpoint(),
                        nat_rewrite: nat,
                        created: now,
                        last_seen: now,
                    },
                );
            }
            None => {}
        }
    }

    /// Evaluates a single chain in isolation, without touching the
    /// connection table.
    pub fn evaluate_chain(&mut self, chain: &str, p: &Packet, state: ConnState) -> Option<ChainEvaluation> {
        let ci = *self.program.by_name.get(chain)?;
        let builtin = self.program.chains[ci].policy.is_some();
        let mut walk = Walk {
            program: &self.program,
            counters: &mut self.counters,
            traversed: 0,
            events: Vec::new(),
            trace: None,
        };
        let (stop, at) = if builtin {
            let (s, at) = walk.run_builtin(ci, p, state);
            (Some(s), at)
        } else {
            match walk.run(ci, p, state) {
                Some((s, at)) => (Some(s), Some(at)),
                None => (None, None),
            }
        };
        let kind = match stop {
            None => VerdictKind::Continue,
            Some(Stop::Drop) => VerdictKind::Drop,
            Some(Stop::Reject) => VerdictKind::Reject,
            Some(_) => VerdictKind::Accept,
        };
        let program = &self.program;
        Some(ChainEvaluation {
            verdict: Verdict {
                kind,
                matched_rule_index: at.map(|(c, r)| (program.chains[c].name.clone(), r)),
            },
            rules_traversed: walk.traversed,
            events: walk.events,
        })
    }

    pub fn process_packet(&mut self, p: &Packet) -> Disposition {
        self.process(p, None)
    }

    /// Like [`Engine::process_packet`], also recording every rule decision.
    pub fn trace_packet(&mut self, p: &Packet) -> (Disposition, Vec<TraceStep>) {
        let mut steps = Vec::new();
        let d = self.process(p, Some(&mut steps));
        (d, steps)
    }

    fn process(&mut self, p: &Packet, trace: Option<&mut Vec<TraceStep>>) -> Disposition {
        let now = self.clock.now();
        self.counters.packets += 1;
        self.counters.bytes += u64::from(p.size_bytes);

        let found = match self.locate(p, now) {
            Located::Found(k, d) => Some((k, d)),
            Located::Stale(k) => {
                self.remove_entry(&k);
                None
            }
            Located::Absent => None,
        };
        let state = conntrack::classify(found.map(|(k, d)| (&self.conns[&k], d)), p);
        let cached = found.and_then(|(k, d)| self.conns[&k].nat_rewrite.map(|n| (n, d)));
        let fresh = found.is_none() && state == ConnState::New;
        let inbound = p.in_iface.is_some();

        let mut pkt = p.clone();
        let mut walk = Walk {
            program: &self.program,
            counters: &mut self.counters,
            traversed: 0,
            events: Vec::new(),
            trace,
        };
        let done = |walk: Walk<'_>, outcome: Outcome, pkt: Packet| Disposition {
            outcome,
            final_packet: pkt,
            rules_traversed: walk.traversed,
            events: walk.events,
            conn_state: state,
        };

        // Pre-routing: reverse NAT for replies, cached or fresh DNAT.
        match cached {
            Some((n, Direction::Reply)) => {
                set_src(&mut pkt, n.original.dst);
                set_dst(&mut pkt, n.original.src);
            }
            Some((n, Direction::Original)) if inbound => set_dst(&mut pkt, n.translated.dst),
            _ => {}
        }
        let mut dnat_applied = false;
        if fresh && inbound {
            match walk.run_builtin(self.program.prerouting, &pkt, state).0 {
                Stop::Dnat(to) => {
                    let port = to.port.unwrap_or(pkt.dport);
                    set_dst(&mut pkt, Endpoint::new(to.addr, port));
                    dnat_applied = true;
                    walk.events.push(Event {
                        kind: EventKind::NatApplied,
                        detail: format!("DNAT {} -> {}", p.dst_endpoint(), pkt.dst_endpoint()),
                    });
                }
                Stop::Drop | Stop::Reject => return done(walk, Outcome::Dropped, pkt),
                _ => {}
            }
        }

        let filter = if !inbound {
            self.program.output
        } else if pkt.dst_is_local {
            self.program.input
        } else {
            self.program.forward
        };
        match walk.run_builtin(filter, &pkt, state).0 {
            Stop::Drop => return done(walk, Outcome::Dropped, pkt),
            Stop::Reject => {
                walk.events.push(Event {
                    kind: EventKind::RejectNotify,
                    detail: format!("notify {} of rejected {}", p.src, p),
                });
                return done(walk, Outcome::Rejected, pkt);
            }
            _ => {}
        }

        let mut snat_applied = false;
        let outcome = if filter == self.program.input {
            Outcome::DeliveredLocal
        } else {
            match cached {
                Some((n, Direction::Original)) => set_src(&mut pkt, n.translated.src),
                _ if fresh => {
                    let to = match walk.run_builtin(self.program.postrouting, &pkt, state).0 {
                        Stop::Snat(to) => Some(to),
                        Stop::Masquerade => Some(NatTo { addr: self.config.masquerade_addr, port: None }),
                        Stop::Drop | Stop::Reject => return done(walk, Outcome::Dropped, pkt),
                        _ => None,
                    };
                    if let Some(to) = to {
                        let preferred = to.port.unwrap_or(pkt.sport);
                        match self.pool.allocate(pkt.proto, to.addr, preferred) {
                            Some(port) => {
                                let before = pkt.src_endpoint();
                                set_src(&mut pkt, Endpoint::new(to.addr, port));
                                snat_applied = true;
                                walk.events.push(Event {
                                    kind: EventKind::NatApplied,
                                    detail: format!("SNAT {} -> {}", before, pkt.src_endpoint()),
                                });
                            }
                            None => {
                                walk.events.push(Event {
                                    kind: EventKind::NatFailure,
                                    detail: format!("no free port on {} for {}", to.addr, p),
                                });
                                return done(walk, Outcome::Dropped, pkt);
                            }
                        }
                    }
                }
                _ => {}
            }
            Outcome::Forwarded
        };

        let new_nat = (dnat_applied || snat_applied).then(|| NatRewrite {
            original: Tuple::of(p),
            translated: Tuple::of(&pkt),
        });
        if let Some(n) = &new_nat {
            let tk = FlowKey::new(p.proto, n.translated.src, n.translated.dst);
            if tk != p.flow_key() && (self.conns.contains_key(&tk) || self.aliases.contains_key(&tk)) {
                if snat_applied {
                    self.pool.release(p.proto, n.translated.src);
                }
                walk.events.push(Event {
                    kind: EventKind::NatFailure,
                    detail: format!("translated tuple of {} collides with a tracked flow", p),
                });
                return done(walk, Outcome::Dropped, pkt);
            }
        }

        let d = done(walk, outcome, pkt);
        self.conntrack_update(p, found, new_nat, now);
        d
    }

    pub fn snapshot_counters(&self) -> StatsSnapshot {
        let now = self.clock.now();
        let mut rules = Vec::new();
        let mut policy_hits = Vec::new();
        for (ci, chain) in self.program.chains.iter().enumerate() {
            for (ri, (packets, bytes)) in self.counters.rules[ci].iter().enumerate() {
                rules.push(RuleStats { chain: chain.name.clone(), index: ri, packets: *packets, bytes: *bytes });
            }
            if chain.policy.is_some() {
                policy_hits.push(PolicyHits { chain: chain.name.clone(), hits: self.counters.policy[ci] });
            }
        }
        StatsSnapshot {
            rules,
            policy_hits,
            packets_total: self.counters.packets,
            bytes_total: self.counters.bytes,
            conn_count: self.conns.len() as u64,
            evictions: self.evictions,
            uptime_s: now.saturating_sub(self.started).as_secs(),
            timestamp: now.as_secs(),
            ruleset_version: self.ruleset.version(),
        }
    }
}

fn set_src(p: &mut Packet, ep: Endpoint) {
    p.src = ep.addr;
    if p.proto.has_ports() {
        p.sport = ep.port;
    }
}

fn set_dst(p: &mut Packet, ep: Endpoint) {
    p.dst = ep.addr;
    if p.proto.has_ports() {
        p.dport = ep.port;
    }
}

/// An engine shared between the packet path, the sync agent and stats
/// reporting. Every operation holds the lock for its whole duration, so a
/// packet is always evaluated under exactly one ruleset and snapshots are
/// consistent.
#[derive(Debug, Clone)]
pub struct SharedEngine(Arc<Mutex<Engine>>);

impl SharedEngine {
    pub fn new(engine: Engine) -> Self {
        SharedEngine(Arc::new(Mutex::new(engine)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Engine> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn process_packet(&self, p: &Packet) -> Disposition {
        self.lock().process_packet(p)
    }

    pub fn swap_ruleset(&self, rs: Ruleset) -> Result<(), ValidationError> {
        self.lock().swap_ruleset(rs)
    }

    pub fn snapshot_counters(&self) -> StatsSnapshot {
        self.lock().snapshot_counters()
    }

    pub fn ruleset_version(&self) -> u64 {
        self.lock().ruleset().version()
    }
}
