//! Shared helpers for the integration tests: a random ruleset and packet
//! generator, and a reference evaluator that models the packet path from
//! first principles on its own rule representation. The engine only ever
//! sees the rules as text, so the reference does not share a parser,
//! matcher or traversal with the code under test.

#![allow(dead_code)]

use std::net::Ipv4Addr;

use picofw::net::{Packet, Proto, TcpFlags};
use picofw::ruleset::{parse_rule, Policy, Ruleset, Table};
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

pub const ADDRS: [[u8; 4]; 8] = [
    [10, 0, 0, 1],
    [10, 0, 0, 2],
    [10, 0, 0, 5],
    [10, 0, 1, 9],
    [192, 168, 1, 1],
    [192, 168, 1, 77],
    [8, 8, 8, 8],
    [172, 16, 3, 4],
];
pub const PREFIXES: [u8; 7] = [0, 8, 16, 24, 30, 31, 32];
pub const PORTS: [u16; 8] = [1, 22, 53, 80, 443, 1024, 5000, 65535];
pub const IFACES: [&str; 3] = ["eth0", "eth1", "wlan0"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RProto {
    Tcp,
    Udp,
    Icmp,
}

impl RProto {
    fn text(self) -> &'static str {
        match self {
            RProto::Tcp => "tcp",
            RProto::Udp => "udp",
            RProto::Icmp => "icmp",
        }
    }

    fn has_ports(self) -> bool {
        self != RProto::Icmp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RState {
    New,
    Established,
    Invalid,
}

impl RState {
    fn text(self) -> &'static str {
        match self {
            RState::New => "NEW",
            RState::Established => "ESTABLISHED",
            RState::Invalid => "INVALID",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RTarget {
    Accept,
    Drop,
    Reject,
    Log,
    Return,
    Jump(String),
    Snat([u8; 4], Option<u16>),
    Dnat([u8; 4], Option<u16>),
    Masquerade,
}

#[derive(Debug, Clone, Default)]
pub struct RMatch {
    pub proto: Option<RProto>,
    pub src: Option<([u8; 4], u8)>,
    pub dst: Option<([u8; 4], u8)>,
    pub sport: Option<(u16, u16)>,
    pub dport: Option<(u16, u16)>,
    pub in_iface: Option<&'static str>,
    pub out_iface: Option<&'static str>,
    pub states: Option<Vec<RState>>,
}

#[derive(Debug, Clone)]
pub struct RRule {
    pub m: RMatch,
    pub target: RTarget,
}

impl RRule {
    /// Rule text in the `-A` grammar, without the chain prefix.
    pub fn text(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        let m = &self.m;
        if let Some(p) = m.proto {
            parts.push(format!("-p {}", p.text()));
        }
        let dotted = |a: [u8; 4]| format!("{}.{}.{}.{}", a[0], a[1], a[2], a[3]);
        if let Some((a, l)) = m.src {
            parts.push(format!("-s {}/{}", dotted(a), l));
        }
        if let Some((a, l)) = m.dst {
            parts.push(format!("-d {}/{}", dotted(a), l));
        }
        if let Some((lo, hi)) = m.sport {
            parts.push(format!("--sport {lo}:{hi}"));
        }
        if let Some((lo, hi)) = m.dport {
            parts.push(format!("--dport {lo}:{hi}"));
        }
        if let Some(i) = m.in_iface {
            parts.push(format!("-i {i}"));
        }
        if let Some(o) = m.out_iface {
            parts.push(format!("-o {o}"));
        }
        if let Some(st) = &m.states {
            let names: Vec<&str> = st.iter().map(|s| s.text()).collect();
            parts.push(format!("-m state --state {}", names.join(",")));
        }
        let to = |a: [u8; 4], p: Option<u16>| match p {
            Some(p) => format!("{}:{}", dotted(a), p),
            None => dotted(a),
        };
        parts.push(match &self.target {
            RTarget::Accept => "-j ACCEPT".into(),
            RTarget::Drop => "-j DROP".into(),
            RTarget::Reject => "-j REJECT".into(),
            RTarget::Log => "-j LOG".into(),
            RTarget::Return => "-j RETURN".into(),
            RTarget::Masquerade => "-j MASQUERADE".into(),
            RTarget::Jump(c) => format!("-j {c}"),
            RTarget::Snat(a, p) => format!("-j SNAT --to {}", to(*a, *p)),
            RTarget::Dnat(a, p) => format!("-j DNAT --to {}", to(*a, *p)),
        });
        parts.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct RChain {
    pub name: String,
    pub nat: bool,
    /// `None` for user chains; `Some(true)` is ACCEPT.
    pub policy_accept: Option<bool>,
    pub rules: Vec<RRule>,
}

#[derive(Debug, Clone)]
pub struct RRuleset {
    pub chains: Vec<RChain>,
}

impl RRuleset {
    pub fn chain(&self, name: &str) -> &RChain {
        self.chains.iter().find(|c| c.name == name).expect("chain exists")
    }

    pub fn rule_count(&self) -> usize {
        self.chains.iter().map(|c| c.rules.len()).sum()
    }

    /// Builds the engine-side ruleset purely from rule text.
    pub fn build(&self) -> Ruleset {
        let mut rs = Ruleset::new();
        for c in &self.chains {
            match c.policy_accept {
                None => {
                    let table = if c.nat { Table::Nat } else { Table::Filter };
                    rs = rs.add_user_chain(table, &c.name).unwrap();
                }
                Some(accept) => {
                    let p = if accept { Policy::Accept } else { Policy::Drop };
                    rs = rs.set_policy(&c.name, p).unwrap();
                }
            }
        }
        for c in &self.chains {
            for r in &c.rules {
                let line = format!("-A {} {}", c.name, r.text());
                let parsed = parse_rule(&line).unwrap_or_else(|e| panic!("{line}: {e}"));
                rs = rs.append_rule(&parsed.chain, parsed.rule).unwrap_or_else(|e| panic!("{line}: {e}"));
            }
        }
        rs
    }
}

fn pick_addr(rng: &mut impl RngCore) -> [u8; 4] {
    *ADDRS.choose(rng).unwrap()
}

fn pick_range(rng: &mut impl RngCore) -> (u16, u16) {
    let a = *PORTS.choose(rng).unwrap();
    let b = *PORTS.choose(rng).unwrap();
    (a.min(b), a.max(b))
}

fn random_match(rng: &mut impl RngCore) -> RMatch {
    let mut m = RMatch::default();
    if rng.random_bool(0.5) {
        m.proto = Some(*[RProto::Tcp, RProto::Udp, RProto::Icmp].choose(rng).unwrap());
    }
    if rng.random_bool(0.4) {
        m.src = Some((pick_addr(rng), *PREFIXES.choose(rng).unwrap()));
    }
    if rng.random_bool(0.4) {
        m.dst = Some((pick_addr(rng), *PREFIXES.choose(rng).unwrap()));
    }
    if m.proto.is_some_and(RProto::has_ports) {
        if rng.random_bool(0.3) {
            m.sport = Some(pick_range(rng));
        }
        if rng.random_bool(0.4) {
            m.dport = Some(pick_range(rng));
        }
    }
    if rng.random_bool(0.2) {
        m.in_iface = Some(IFACES.choose(rng).unwrap());
    }
    if rng.random_bool(0.2) {
        m.out_iface = Some(IFACES.choose(rng).unwrap());
    }
    if rng.random_bool(0.3) {
        let all = [RState::New, RState::Established, RState::Invalid];
        let mut st: Vec<RState> = all.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if st.is_empty() {
            st.push(*all.choose(rng).unwrap());
        }
        m.states = Some(st);
    }
    m
}

fn random_target(rng: &mut impl RngCore, chain: &str, nat: bool, jumpable: &[String]) -> RTarget {
    loop {
        let t = match rng.random_range(0..10) {
            0..=2 => RTarget::Accept,
            3 if !nat => RTarget::Drop,
            4 if !nat => RTarget::Reject,
            5 => RTarget::Log,
            6 => RTarget::Return,
            7 if !jumpable.is_empty() => RTarget::Jump(jumpable.choose(rng).unwrap().clone()),
            8 | 9 if chain == "PREROUTING" => {
                RTarget::Dnat(pick_addr(rng), rng.random_bool(0.5).then(|| *PORTS.choose(rng).unwrap()))
            }
            8 if chain == "POSTROUTING" => {
                RTarget::Snat(pick_addr(rng), rng.random_bool(0.5).then(|| *PORTS.choose(rng).unwrap()))
            }
            9 if chain == "POSTROUTING" => RTarget::Masquerade,
            _ => continue,
        };
        return t;
    }
}

/// A random valid ruleset with at most `max_rules` rules spread over the
/// built-in chains and up to three user chains per table. Jumps only go
/// from lower to higher user-chain index, so the jump graph is acyclic.
pub fn random_ruleset(rng: &mut impl RngCore, max_rules: usize) -> RRuleset {
    let n_filter_user = rng.random_range(0..=3);
    let n_nat_user = rng.random_range(0..=2);
    let mut chains = Vec::new();
    for name in ["INPUT", "FORWARD", "OUTPUT"] {
        chains.push(RChain { name: name.into(), nat: false, policy_accept: Some(rng.random_bool(0.7)), rules: vec![] });
    }
    for name in ["PREROUTING", "POSTROUTING"] {
        chains.push(RChain { name: name.into(), nat: true, policy_accept: Some(rng.random_bool(0.9)), rules: vec![] });
    }
    for i in 0..n_filter_user {
        chains.push(RChain { name: format!("f_user{i}"), nat: false, policy_accept: None, rules: vec![] });
    }
    for i in 0..n_nat_user {
        chains.push(RChain { name: format!("n_user{i}"), nat: true, policy_accept: None, rules: vec![] });
    }
    let total = rng.random_range(0..=max_rules);
    for _ in 0..total {
        let ci = rng.random_range(0..chains.len());
        let (name, nat) = (chains[ci].name.clone(), chains[ci].nat);
        let prefix = if nat { "n_user" } else { "f_user" };
        let own_index = name.strip_prefix(prefix).map(|s| s.parse::<usize>().unwrap());
        let count = if nat { n_nat_user } else { n_filter_user };
        let jumpable: Vec<String> = (0..count)
            .filter(|j| own_index.is_none_or(|i| *j > i))
            .map(|j| format!("{prefix}{j}"))
            .collect();
        let rule = RRule { m: random_match(rng), target: random_target(rng, &name, nat, &jumpable) };
        chains[ci].rules.push(rule);
    }
    RRuleset { chains }
}

/// A random valid packet. Roughly a third are forwarded, a third
/// addressed to this host and a third locally generated.
pub fn random_packet(rng: &mut impl RngCore) -> Packet {
    let proto = *[Proto::Tcp, Proto::Tcp, Proto::Udp, Proto::Icmp].choose(rng).unwrap();
    let src = Ipv4Addr::from(pick_addr(rng));
    let dst = Ipv4Addr::from(pick_addr(rng));
    let (sport, dport) = if proto.has_ports() {
        let any = |rng: &mut dyn RngCore| if rng.random_bool(0.8) { *PORTS.choose(rng).unwrap() } else { rng.random_range(1..=65535) };
        (any(rng), any(rng))
    } else {
        (0, 0)
    };
    let mut p = Packet::new(proto, src, sport, dst, dport);
    if proto == Proto::Tcp {
        let flags = if rng.random_bool(0.5) { TcpFlags::SYN } else { TcpFlags::from_bits(rng.random_range(0..16)) };
        p = p.with_flags(flags);
    }
    p = p.with_size(rng.random_range(40..=1500));
    let iface = |rng: &mut dyn RngCore| *IFACES.choose(rng).unwrap();
    match rng.random_range(0..3) {
        0 => p.with_ifaces(Some(iface(rng)), Some(iface(rng))),
        1 => p.with_ifaces(Some(iface(rng)), None).local(),
        _ => p.with_ifaces(None, Some(iface(rng))).outbound(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefDisposition {
    pub outcome: &'static str,
    pub rules_traversed: u64,
    pub events: Vec<&'static str>,
    /// (src, sport, dst, dport) after rewriting.
    pub final_tuple: (Ipv4Addr, u16, Ipv4Addr, u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Accept,
    Drop,
    Reject,
    Fall,
    Snat([u8; 4], Option<u16>),
    Dnat([u8; 4], Option<u16>),
    Masquerade,
}

struct View {
    proto: RProto,
    src: Ipv4Addr,
    sport: u16,
    dst: Ipv4Addr,
    dport: u16,
    in_iface: Option<String>,
    out_iface: Option<String>,
    state: RState,
}

fn in_block(addr: Ipv4Addr, base: [u8; 4], len: u8) -> bool {
    // Compare the leading `len` bits one at a time.
    let a = addr.octets();
    (0..len as usize).all(|bit| {
        let byte = bit / 8;
        let mask = 0x80u8 >> (bit % 8);
        a[byte] & mask == base[byte] & mask
    })
}

fn rule_matches(m: &RMatch, v: &View) -> bool {
    m.proto.is_none_or(|p| p == v.proto)
        && m.src.is_none_or(|(b, l)| in_block(v.src, b, l))
        && m.dst.is_none_or(|(b, l)| in_block(v.dst, b, l))
        && m.sport.is_none_or(|(lo, hi)| (lo..=hi).contains(&v.sport))
        && m.dport.is_none_or(|(lo, hi)| (lo..=hi).contains(&v.dport))
        && m.in_iface.is_none_or(|i| v.in_iface.as_deref() == Some(i))
        && m.out_iface.is_none_or(|o| v.out_iface.as_deref() == Some(o))
        && m.states.as_ref().is_none_or(|s| s.contains(&v.state))
}

fn walk(rs: &RRuleset, name: &str, v: &View, count: &mut u64, events: &mut Vec<&'static str>) -> Flow {
    for rule in &rs.chain(name).rules {
        *count += 1;
        if !rule_matches(&rule.m, v) {
            continue;
        }
        match &rule.target {
            RTarget::Accept => return Flow::Accept,
            RTarget::Drop => return Flow::Drop,
            RTarget::Reject => return Flow::Reject,
            RTarget::Snat(a, p) => return Flow::Snat(*a, *p),
            RTarget::Dnat(a, p) => return Flow::Dnat(*a, *p),
            RTarget::Masquerade => return Flow::Masquerade,
            RTarget::Log => events.push("LOG"),
            RTarget::Return => return Flow::Fall,
            RTarget::Jump(to) => match walk(rs, to, v, count, events) {
                Flow::Fall => {}
                other => return other,
            },
        }
    }
    Flow::Fall
}

fn builtin(rs: &RRuleset, name: &str, v: &View, count: &mut u64, events: &mut Vec<&'static str>) -> Flow {
    match walk(rs, name, v, count, events) {
        Flow::Fall if rs.chain(name).policy_accept == Some(true) => Flow::Accept,
        Flow::Fall => Flow::Drop,
        other => other,
    }
}

/// Evaluates one packet as the first packet an engine ever sees, so no
/// connection entry exists and no NAT port is taken.
pub fn reference_eval(rs: &RRuleset, p: &Packet, masquerade_addr: Ipv4Addr) -> RefDisposition {
    let proto = match p.proto {
        Proto::Tcp => RProto::Tcp,
        Proto::Udp => RProto::Udp,
        Proto::Icmp => RProto::Icmp,
    };
    let flags = p.tcp_flags.bits();
    let (syn, ack) = (flags & 1 != 0, flags & 2 != 0);
    let state = if proto != RProto::Tcp || (syn && !ack) { RState::New } else { RState::Invalid };
    let mut v = View {
        proto,
        src: p.src,
        sport: p.sport,
        dst: p.dst,
        dport: p.dport,
        in_iface: p.in_iface.as_ref().map(|i| i.as_str().to_string()),
        out_iface: p.out_iface.as_ref().map(|i| i.as_str().to_string()),
        state,
    };
    let mut count = 0u64;
    let mut events = Vec::new();
    let inbound = v.in_iface.is_some();
    let nat = state == RState::New;
    let finish = |outcome, count, events, v: &View| RefDisposition {
        outcome,
        rules_traversed: count,
        events,
        final_tuple: (v.src, v.sport, v.dst, v.dport),
    };

    if inbound && nat {
        match builtin(rs, "PREROUTING", &v, &mut count, &mut events) {
            Flow::Drop | Flow::Reject => return finish("DROPPED", count, events, &v),
            Flow::Dnat(a, port) => {
                v.dst = Ipv4Addr::from(a);
                if proto.has_ports() {
                    v.dport = port.unwrap_or(v.dport);
                }
                events.push("NAT_APPLIED");
            }
            _ => {}
        }
    }
    let filter = match (inbound, p.dst_is_local) {
        (false, _) => "OUTPUT",
        (true, true) => "INPUT",
        (true, false) => "FORWARD",
    };
    match builtin(rs, filter, &v, &mut count, &mut events) {
        Flow::Drop => return finish("DROPPED", count, events, &v),
        Flow::Reject => {
            events.push("REJECT_NOTIFY");
            return finish("REJECTED", count, events, &v);
        }
        _ => {}
    }
    if filter == "INPUT" {
        return finish("DELIVERED_LOCAL", count, events, &v);
    }
    if nat {
        let to = match builtin(rs, "POSTROUTING", &v, &mut count, &mut events) {
            Flow::Drop | Flow::Reject => return finish("DROPPED", count, events, &v),
            Flow::Snat(a, port) => Some((Ipv4Addr::from(a), port)),
            Flow::Masquerade => Some((masquerade_addr, None)),
            _ => None,
        };
        if let Some((addr, port)) = to {
            v.src = addr;
            if proto.has_ports() {
                v.sport = port.unwrap_or(v.sport);
            }
            events.push("NAT_APPLIED");
        }
    }
    finish("FORWARDED", count, events, &v)
}

/// The engine's disposition in the reference's terms.
pub fn observed(d: &picofw::engine::Disposition) -> RefDisposition {
    let f = &d.final_packet;
    RefDisposition {
        outcome: d.outcome.name(),
        rules_traversed: d.rules_traversed,
        events: d.events.iter().map(|e| e.kind.name()).collect(),
        final_tuple: (f.src, f.sport, f.dst, f.dport),
    }
}

/// Runs `cases` random (ruleset, packet) pairs, each on a fresh engine.
/// Returns the first disagreement, if any.
pub fn oracle_cases(seed: u64, cases: usize) -> Result<(), String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let rrs = random_ruleset(&mut rng, 50);
        let p = random_packet(&mut rng);
        let mut engine = picofw::engine::Engine::new(rrs.build()).map_err(|e| format!("case {case}: {e}"))?;
        let masq = engine.config().masquerade_addr;
        let got = observed(&engine.process_packet(&p));
        let want = reference_eval(&rrs, &p, masq);
        if got != want {
            let rules: Vec<String> = rrs
                .chains
                .iter()
                .flat_map(|c| c.rules.iter().map(move |r| format!("-A {} {}", c.name, r.text())))
                .collect();
            return Err(format!(
                "case {case}: packet {p}\nrules:\n{}\nengine: {got:?}\nreference: {want:?}",
                rules.join("\n")
            ));
        }
    }
    Ok(())
}

pub const NAT_RULES: &str = "\
-A PREROUTING -p tcp -d 198.51.100.10/32 --dport 8080 -j DNAT --to 10.1.0.5:80
-A PREROUTING -p udp -d 198.51.100.10/32 --dport 5353 -j DNAT --to 10.1.0.6
-A POSTROUTING -s 10.2.0.0/16 -o eth0 -j SNAT --to 198.51.100.20
-A POSTROUTING -s 10.3.0.0/16 -o eth0 -j MASQUERADE
";

pub fn nat_ruleset() -> Ruleset {
    let mut rs = Ruleset::new();
    for line in NAT_RULES.lines() {
        let l = parse_rule(line).unwrap();
        rs = rs.append_rule(&l.chain, l.rule).unwrap();
    }
    rs
}

type Tuple4 = (Ipv4Addr, u16, Ipv4Addr, u16);

fn tuple(p: &Packet) -> Tuple4 {
    (p.src, p.sport, p.dst, p.dport)
}

/// Opens `n` concurrent DNAT, SNAT and MASQUERADE flows, then sends one
/// reply per flow in random order. Checks every rewrite against the rules
/// above, that each reply comes back with the original tuple reversed, and
/// that no two live flows share an external source endpoint.
pub fn nat_round_trips(seed: u64, n: usize) -> Result<(), String> {
    use picofw::engine::Engine;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use std::collections::HashSet;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut engine = Engine::new(nat_ruleset()).map_err(|e| e.to_string())?;
    let masq = engine.config().masquerade_addr;
    let mut seen_clients = HashSet::new();
    let mut external = HashSet::new();
    // (original packet, translated packet as sent on)
    let mut flows: Vec<(Packet, Packet)> = Vec::new();
    while flows.len() < n {
        let kind = rng.random_range(0..3);
        let udp = rng.random_bool(0.25);
        let proto = if udp { Proto::Udp } else { Proto::Tcp };
        // A narrow source-port range forces collisions on the external side.
        let sport = rng.random_range(40000..40008u16);
        let far = Ipv4Addr::new(93, 184, rng.random(), rng.random_range(1..255));
        let (src, dst, dport, iin, iout) = match kind {
            0 => (far, Ipv4Addr::new(198, 51, 100, 10), if udp { 5353 } else { 8080 }, "eth0", "eth1"),
            1 => (Ipv4Addr::new(10, 2, rng.random(), rng.random_range(1..255)), far, 443, "eth1", "eth0"),
            _ => (Ipv4Addr::new(10, 3, rng.random(), rng.random_range(1..255)), far, 443, "eth1", "eth0"),
        };
        if !seen_clients.insert((proto, src, sport, dst, dport)) {
            continue;
        }
        let mut p = Packet::new(proto, src, sport, dst, dport).with_ifaces(Some(iin), Some(iout));
        if !udp {
            p = p.with_flags(TcpFlags::SYN);
        }
        let d = engine.process_packet(&p);
        let f = &d.final_packet;
        if d.outcome.name() != "FORWARDED" || d.events.len() != 1 || d.events[0].kind.name() != "NAT_APPLIED" {
            return Err(format!("flow {}: {p} gave {:?} {:?}", flows.len(), d.outcome, d.events));
        }
        let ok = match kind {
            0 => {
                let want = if udp { (Ipv4Addr::new(10, 1, 0, 6), 5353) } else { (Ipv4Addr::new(10, 1, 0, 5), 80) };
                (f.src, f.sport) == (p.src, p.sport) && (f.dst, f.dport) == want
            }
            1 => f.src == Ipv4Addr::new(198, 51, 100, 20) && (f.dst, f.dport) == (p.dst, p.dport),
            _ => f.src == masq && (f.dst, f.dport) == (p.dst, p.dport),
        };
        if !ok {
            return Err(format!("flow {}: {p} rewritten to {f}", flows.len()));
        }
        if kind != 0 && !external.insert((proto, f.src, f.sport)) {
            return Err(format!("external endpoint {}:{} reused by {p}", f.src, f.sport));
        }
        flows.push((p, d.final_packet));
    }
    flows.shuffle(&mut rng);
    for (orig, sent) in &flows {
        let mut reply = sent.reversed();
        if reply.proto == Proto::Tcp {
            reply = reply.with_flags(TcpFlags::SYN | TcpFlags::ACK);
        }
        let d = engine.process_packet(&reply);
        let back = tuple(&d.final_packet);
        let want = (orig.dst, orig.dport, orig.src, orig.sport);
        if d.outcome.name() != "FORWARDED" || back != want || d.conn_state != picofw::ruleset::ConnState::Established {
            return Err(format!(
                "reply {reply} to {orig} came back as {back:?} ({:?}, {:?}); expected {want:?}",
                d.outcome, d.conn_state
            ));
        }
    }
    Ok(())
}

pub fn ruleset_from_lines(lines: &str, drop_policies: &[&str]) -> Ruleset {
    let mut rs = Ruleset::new();
    for chain in drop_policies {
        rs = rs.set_policy(chain, Policy::Drop).unwrap();
    }
    for line in lines.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let l = parse_rule(line).unwrap_or_else(|e| panic!("{line}: {e}"));
        rs = rs.append_rule(&l.chain, l.rule).unwrap();
    }
    rs
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

pub fn fixture_first_match_shadowing() -> Result<(), String> {
    use picofw::engine::Engine;
    let ssh = Packet::tcp([10, 0, 0, 1].into(), 5000, [10, 0, 0, 2].into(), 22, TcpFlags::SYN)
        .with_ifaces(Some("eth0"), Some("eth1"));
    let accept_first = ruleset_from_lines(
        "-A FORWARD -p tcp --dport 22 -j ACCEPT\n-A FORWARD -p tcp --dport 22 -j DROP",
        &[],
    );
    let mut e = Engine::new(accept_first).map_err(|e| e.to_string())?;
    let d = e.process_packet(&ssh);
    ensure(d.outcome.name() == "FORWARDED" && d.rules_traversed == 1, || format!("accept-first gave {d:?}"))?;
    let stats = e.snapshot_counters();
    let fwd: Vec<u64> = stats.rules.iter().filter(|r| r.chain == "FORWARD").map(|r| r.packets).collect();
    ensure(fwd == [1, 0], || format!("shadowed rule counted: {fwd:?}"))?;

    let drop_first = ruleset_from_lines(
        "-A FORWARD -p tcp --dport 22 -j DROP\n-A FORWARD -p tcp --dport 22 -j ACCEPT",
        &[],
    );
    let d = Engine::new(drop_first).map_err(|e| e.to_string())?.process_packet(&ssh);
    ensure(d.outcome.name() == "DROPPED" && d.rules_traversed == 1, || format!("drop-first gave {d:?}"))
}

pub fn fixture_drop_silent_reject_notifies() -> Result<(), String> {
    use picofw::engine::Engine;
    let p = Packet::tcp([10, 0, 0, 1].into(), 5000, [10, 0, 0, 2].into(), 23, TcpFlags::SYN)
        .with_ifaces(Some("eth0"), None)
        .local();
    let d = Engine::new(ruleset_from_lines("-A INPUT -p tcp --dport 23 -j DROP", &[]))
        .map_err(|e| e.to_string())?
        .process_packet(&p);
    ensure(d.outcome.name() == "DROPPED" && d.events.is_empty(), || format!("DROP gave {d:?}"))?;
    let d = Engine::new(ruleset_from_lines("-A INPUT -p tcp --dport 23 -j REJECT", &[]))
        .map_err(|e| e.to_string())?
        .process_packet(&p);
    let kinds: Vec<&str> = d.events.iter().map(|e| e.kind.name()).collect();
    ensure(d.outcome.name() == "REJECTED" && kinds == ["REJECT_NOTIFY"], || format!("REJECT gave {d:?}"))?;
    let d = Engine::new(ruleset_from_lines("", &["INPUT"]))
        .map_err(|e| e.to_string())?
        .process_packet(&p);
    ensure(d.outcome.name() == "DROPPED" && d.events.is_empty(), || format!("DROP policy gave {d:?}"))
}

fn chain_order(steps: &[picofw::engine::TraceStep]) -> Vec<String> {
    use picofw::engine::TraceStep;
    let mut order: Vec<String> = Vec::new();
    for s in steps {
        let name = match s {
            TraceStep::Rule { chain, .. } | TraceStep::Policy { chain, .. } => chain,
        };
        if order.last() != Some(name) {
            order.push(name.clone());
        }
    }
    order
}

/// The filter chain sees the destination DNAT already wrote.
pub fn fixture_dnat_before_routing() -> Result<(), String> {
    use picofw::engine::Engine;
    let rs = ruleset_from_lines(
        "-A PREROUTING -p tcp -d 198.51.100.10/32 --dport 8080 -j DNAT --to 10.1.0.5:80
         -A FORWARD -p tcp -d 198.51.100.10/32 -j REJECT
         -A FORWARD -p tcp -d 10.1.0.5/32 --dport 80 -j ACCEPT",
        &["FORWARD"],
    );
    let mut e = Engine::new(rs).map_err(|e| e.to_string())?;
    let p = Packet::tcp([100, 64, 0, 9].into(), 33000, [198, 51, 100, 10].into(), 8080, TcpFlags::SYN)
        .with_ifaces(Some("eth0"), Some("eth1"));
    let (d, steps) = e.trace_packet(&p);
    let f = &d.final_packet;
    ensure(d.outcome.name() == "FORWARDED", || format!("DNAT flow gave {d:?}"))?;
    ensure((f.dst, f.dport) == ([10, 1, 0, 5].into(), 80), || format!("final {f}"))?;
    ensure(d.rules_traversed == 3, || format!("traversed {}", d.rules_traversed))?;
    let order = chain_order(&steps);
    ensure(order == ["PREROUTING", "FORWARD", "POSTROUTING"], || format!("order {order:?}"))
}

/// The filter chain sees the original source; SNAT rewrites afterwards.
pub fn fixture_snat_after_forward() -> Result<(), String> {
    use picofw::engine::Engine;
    let rs = ruleset_from_lines(
        "-A FORWARD -s 198.51.100.20/32 -j REJECT
         -A FORWARD -s 10.2.0.0/16 -j ACCEPT
         -A POSTROUTING -s 10.2.0.0/16 -o eth0 -j SNAT --to 198.51.100.20",
        &["FORWARD"],
    );
    let mut e = Engine::new(rs).map_err(|e| e.to_string())?;
    let p = Packet::tcp([10, 2, 3, 4].into(), 41000, [93, 184, 216, 34].into(), 443, TcpFlags::SYN)
        .with_ifaces(Some("eth1"), Some("eth0"));
    let (d, steps) = e.trace_packet(&p);
    let f = &d.final_packet;
    ensure(d.outcome.name() == "FORWARDED", || format!("SNAT flow gave {d:?}"))?;
    ensure((f.src, f.sport) == ([198, 51, 100, 20].into(), 41000), || format!("final {f}"))?;
    let order = chain_order(&steps);
    ensure(order == ["PREROUTING", "FORWARD", "POSTROUTING"], || format!("order {order:?}"))?;
    // The local-delivery path never reaches POSTROUTING.
    let local = Packet::tcp([10, 2, 3, 4].into(), 41001, [10, 2, 0, 1].into(), 22, TcpFlags::SYN)
        .with_ifaces(Some("eth1"), None)
        .local();
    let (d, steps) = e.trace_packet(&local);
    let order = chain_order(&steps);
    ensure(d.outcome.name() == "DELIVERED_LOCAL" && order == ["PREROUTING", "INPUT"], || {
        format!("local path {order:?} {d:?}")
    })
}

/// serialize, parse, serialize again for `n` random rulesets. The two
/// images must be byte-identical, hash identically, and parse back to an
/// equal ruleset.
pub fn image_round_trips(seed: u64, n: usize) -> Result<(), String> {
    use picofw::ruleset::{image_digest, parse_ruleset, serialize_ruleset};
    use rand::SeedableRng;
    use sha2::{Digest as _, Sha256};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let rs = random_ruleset(&mut rng, 50).build().with_version(rng.random_range(0..1_000_000));
        let first = serialize_ruleset(&rs);
        let parsed = parse_ruleset(&first).map_err(|e| format!("ruleset {i}: {e}\n{first}"))?;
        let second = serialize_ruleset(&parsed);
        ensure(first == second, || format!("ruleset {i} changed:\n{first}\n---\n{second}"))?;
        ensure(parsed == rs, || format!("ruleset {i} parsed to a different value"))?;
        // The declared checksum is the SHA-256 of everything before it.
        let cut = first.find("\n#sha256 ").ok_or("no checksum line")? + 1;
        let expect = hex::encode(Sha256::digest(&first.as_bytes()[..cut]));
        let declared = first[cut + "#sha256 ".len()..].trim_end();
        ensure(declared == expect, || format!("ruleset {i}: declared {declared}, computed {expect}"))?;
        ensure(image_digest(&second).to_hex() == expect, || format!("ruleset {i}: digest drifted"))?;
    }
    Ok(())
}

/// A TCP relay that forwards agent traffic to the server and, while
/// `corrupt` is raised, alters the ruleset image inside RULESET replies
/// while leaving the declared digest untouched.
pub struct CorruptingProxy {
    pub addr: std::net::SocketAddr,
    pub corrupt: std::sync::Arc<std::sync::atomic::AtomicBool>,
    pub corrupted: std::sync::Arc<std::sync::atomic::AtomicU64>,
}

fn tamper(line: &str) -> Option<String> {
    use base64::Engine as _;
    let mut v: serde_json::Value = serde_json::from_str(line).ok()?;
    if v["kind"] != "RULESET" {
        return None;
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    let image = String::from_utf8(b64.decode(v["image"].as_str()?).ok()?).ok()?;
    // Turns the first ACCEPT rule into a DROP rule.
    let altered = image.replacen("-j ACCEPT", "-j DROP", 1);
    if altered == image {
        return None;
    }
    v["image"] = serde_json::Value::String(b64.encode(altered));
    Some(format!("{v}\n"))
}

impl CorruptingProxy {
    pub fn start(upstream: std::net::SocketAddr) -> CorruptingProxy {
        use std::io::{BufRead, BufReader, Write};
        use std::net::{TcpListener, TcpStream};
        use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
        use std::sync::Arc;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let corrupt = Arc::new(AtomicBool::new(false));
        let corrupted = Arc::new(AtomicU64::new(0));
        let (flag, count) = (corrupt.clone(), corrupted.clone());
        std::thread::spawn(move || {
            for client in listener.incoming() {
                let Ok(client) = client else { continue };
                let Ok(server) = TcpStream::connect(upstream) else { continue };
                let (mut c_read, mut s_write) = (client.try_clone().unwrap(), server.try_clone().unwrap());
                std::thread::spawn(move || {
                    let _ = std::io::copy(&mut c_read, &mut s_write);
                    let _ = s_write.shutdown(std::net::Shutdown::Write);
                });
                let (flag, count) = (flag.clone(), count.clone());
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(server);
                    let mut out = client;
                    let mut line = String::new();
                    while reader.read_line(&mut line).unwrap_or(0) > 0 {
                        let forwarded = match flag.load(Ordering::SeqCst).then(|| tamper(&line)).flatten() {
                            Some(bad) => {
                                count.fetch_add(1, Ordering::SeqCst);
                                bad
                            }
                            None => line.clone(),
                        };
                        if out.write_all(forwarded.as_bytes()).is_err() {
                            break;
                        }
                        line.clear();
                    }
                    let _ = out.shutdown(std::net::Shutdown::Both);
                });
            }
        });
        CorruptingProxy { addr, corrupt, corrupted }
    }
}

/// Result of one convergence run, in wall-clock time.
#[derive(Debug)]
pub struct ConvergenceReport {
    pub v1: std::time::Duration,
    pub v2: std::time::Duration,
    pub poll: std::time::Duration,
    pub corrupted_replies: u64,
    pub held_version: u64,
    pub recovered: bool,
}

pub fn sample_image(tag: u16) -> String {
    let rs = ruleset_from_lines(&format!("-A INPUT -p tcp --dport {tag} -j ACCEPT"), &["INPUT"]);
    picofw::ruleset::serialize_ruleset(&rs)
}

/// Three agents polling a loopback server; the third talks through a
/// corrupting proxy. Publishes v1 and v2 and times convergence, then
/// publishes v3 with corruption on, checks the third agent stays on v2
/// while the others move, and finally lets it recover.
pub fn sync_convergence(poll: std::time::Duration) -> Result<ConvergenceReport, String> {
    use picofw::engine::{Engine, SharedEngine};
    use picofw::ruleset::Ruleset;
    use picofw::sync::{Agent, AgentConfig, PolicyServer};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;
    use std::time::{Duration, Instant};

    let server = PolicyServer::new();
    let handle = server.spawn("127.0.0.1:0").map_err(|e| e.to_string())?;
    let proxy = CorruptingProxy::start(handle.local_addr());
    let stop = Arc::new(AtomicBool::new(false));
    let mut engines = Vec::new();
    let mut threads = Vec::new();
    for i in 0..3 {
        let via = if i == 2 { proxy.addr } else { handle.local_addr() };
        let mut cfg = AgentConfig::new(&format!("agent-{i}"), "lab", &via.to_string());
        cfg.poll_interval = poll;
        cfg.stats_interval = poll;
        cfg.io_timeout = Duration::from_secs(5);
        let engine = SharedEngine::new(Engine::new(Ruleset::new()).unwrap());
        engines.push(engine.clone());
        let stop = stop.clone();
        threads.push(std::thread::spawn(move || Agent::new(cfg).run(&engine, &stop)));
    }
    let versions = |engines: &[SharedEngine]| engines.iter().map(|e| e.ruleset_version()).collect::<Vec<u64>>();
    let wait_for = |want: &[u64], limit: Duration| -> Result<Duration, String> {
        let t0 = Instant::now();
        loop {
            let now = versions(&engines);
            if now == want {
                return Ok(t0.elapsed());
            }
            if t0.elapsed() > limit {
                return Err(format!("after {limit:?} agents are at {now:?}, expected {want:?}"));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    };
    let result = (|| {
        // Let every agent finish its first, empty poll so publication
        // lands mid-cycle rather than racing the initial sync.
        std::thread::sleep(poll / 2);
        let limit = poll * 2;
        server.publish_ruleset("lab", sample_image(1001).as_bytes()).map_err(|e| e.to_string())?;
        let v1 = wait_for(&[1, 1, 1], limit)?;
        server.publish_ruleset("lab", sample_image(1002).as_bytes()).map_err(|e| e.to_string())?;
        let v2 = wait_for(&[2, 2, 2], limit)?;

        proxy.corrupt.store(true, Ordering::SeqCst);
        server.publish_ruleset("lab", sample_image(1003).as_bytes()).map_err(|e| e.to_string())?;
        wait_for(&[3, 3, 2], limit)?;
        // Several more polls of the corrupted path must not move it.
        std::thread::sleep(poll * 3);
        let held = versions(&engines)[2];
        let corrupted_replies = proxy.corrupted.load(Ordering::SeqCst);
        proxy.corrupt.store(false, Ordering::SeqCst);
        let recovered = wait_for(&[3, 3, 3], limit * 2).is_ok();
        Ok(ConvergenceReport { v1, v2, poll, corrupted_replies, held_version: held, recovered })
    })();
    stop.store(true, Ordering::SeqCst);
    for t in threads {
        let _ = t.join();
    }
    handle.shutdown();
    result
}

/// Feeds a shuffled log with replays and corrupt entries straight into an
/// agent. After each message the applied version must equal the highest
/// valid version seen so far.
pub fn replay_is_monotonic(seed: u64, versions: u64, log_len: usize) -> Result<(), String> {
    use picofw::engine::{Engine, SharedEngine};
    use picofw::ruleset::Ruleset;
    use picofw::sync::{Agent, AgentConfig, PolicyMessage};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let good: Vec<PolicyMessage> = (1..=versions)
        .map(|v| {
            let rs = picofw::ruleset::parse_ruleset(&sample_image(v as u16)).unwrap().with_version(v);
            PolicyMessage::ruleset(Some("lab"), v, &picofw::ruleset::serialize_ruleset(&rs))
        })
        .collect();
    let engine = SharedEngine::new(Engine::new(Ruleset::new()).unwrap());
    let mut agent = Agent::new(AgentConfig::new("a", "lab", "127.0.0.1:1"));
    let mut best = 0u64;
    for step in 0..log_len {
        let idx = rng.random_range(0..good.len());
        let mut msg = good[idx].clone();
        let corrupt = rng.random_bool(0.3);
        if corrupt {
            let line = format!("{}\n", msg.to_line());
            msg = picofw::sync::decode_line(tamper(&line).unwrap().trim_end()).unwrap();
        } else {
            best = best.max(idx as u64 + 1);
        }
        let before = agent.applied_version();
        agent.handle_message(&engine, &msg);
        let after = agent.applied_version();
        ensure(after >= before && after == best && engine.ruleset_version() == best, || {
            format!("step {step}: message v{} (corrupt: {corrupt}) moved {before} -> {after}, expected {best}", idx + 1)
        })?;
    }
    Ok(())
}
