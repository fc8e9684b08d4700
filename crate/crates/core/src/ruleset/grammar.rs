//! Rule line grammar: `-A <CHAIN> [match flags] -j <TARGET> [--to ...]`.

use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;

use thiserror::Error;

use super::{ConnState, MatchSpec, NatTo, PortRange, Rule, StateSet, Target};
use crate::net::{parse_cidr, parse_ipv4, Proto};

/// A syntax error with a 1-based column pointing at the offending token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {message}")]
pub struct SyntaxError {
    pub column: usize,
    pub message: String,
}

impl SyntaxError {
    fn at(column: usize, message: impl Into<String>) -> Self {
        SyntaxError { column, message: message.into() }
    }
}

/// A parsed `-A` line: the chain it appends to and the rule itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendLine {
    pub chain: String,
    pub rule: Rule,
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Tok { text: &line[s..i], col: s + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Tok { text: &line[s..], col: s + 1 });
    }
    out
}

pub(crate) fn valid_chain_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 28
        && !name.starts_with('-')
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn parse_port(text: &str) -> Option<u16> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

fn parse_range(tok: &Tok<'_>) -> Result<PortRange, SyntaxError> {
    let (lo, hi) = match tok.text.split_once(':') {
        Some((lo, hi)) => (lo, hi),
        None => (tok.text, tok.text),
    };
    match (parse_port(lo), parse_port(hi)) {
        (Some(lo), Some(hi)) if lo <= hi => Ok(PortRange { lo, hi }),
        (Some(_), Some(_)) => Err(SyntaxError::at(tok.col, format!("port range `{}` has lo > hi", tok.text))),
        _ => Err(SyntaxError::at(tok.col, format!("malformed port `{}`", tok.text))),
    }
}

fn parse_nat_to(tok: &Tok<'_>) -> Result<NatTo, SyntaxError> {
    let (addr, port) = match tok.text.split_once(':') {
        Some((a, p)) => {
            let port = parse_port(p)
                .ok_or_else(|| SyntaxError::at(tok.col, format!("malformed port in `{}`", tok.text)))?;
            (a, Some(port))
        }
        None => (tok.text, None),
    };
    let addr: Ipv4Addr =
        parse_ipv4(addr).map_err(|e| SyntaxError::at(tok.col, format!("malformed --to address: {e}")))?;
    Ok(NatTo { addr, port })
}

fn parse_states(tok: &Tok<'_>) -> Result<StateSet, SyntaxError> {
    let mut set = StateSet::EMPTY;
    for name in tok.text.split(',') {
        let st = match name {
            "NEW" => ConnState::New,
            "ESTABLISHED" => ConnState::Established,
            "INVALID" => ConnState::Invalid,
            other => return Err(SyntaxError::at(tok.col, format!("unknown connection state `{other}`"))),
        };
        set = set.with(st);
    }
    Ok(set)
}

/// Parses a full `-A <CHAIN> ...` line.
pub fn parse_rule(line: &str) -> Result<AppendLine, SyntaxError> {
    let toks = tokenize(line);
    let first = toks.first().ok_or_else(|| SyntaxError::at(1, "empty rule line"))?;
    if first.text != "-A" {
        return Err(SyntaxError::at(first.col, format!("expected `-A`, found `{}`", first.text)));
    }
    let chain = toks.get(1).ok_or_else(|| SyntaxError::at(line.len() + 1, "missing chain after -A"))?;
    if !valid_chain_name(chain.text) {
        return Err(SyntaxError::at(chain.col, format!("invalid chain name `{}`", chain.text)));
    }
    let rule = parse_tokens(&toks[2..], line.len() + 1, line)?;
    Ok(AppendLine { chain: chain.text.to_string(), rule })
}

/// Parses the part of a rule line after `-A <CHAIN>`.
pub fn parse_rule_spec(spec: &str) -> Result<Rule, SyntaxError> {
    parse_tokens(&tokenize(spec), spec.len() + 1, spec)
}

fn parse_tokens(toks: &[Tok<'_>], end_col: usize, raw: &str) -> Result<Rule, SyntaxError> {
    let mut m = MatchSpec::default();
    let mut target: Option<(&Tok<'_>, &str)> = None;
    let mut nat_to: Option<(&Tok<'_>, NatTo)> = None;
    let mut sport_col = 0;
    let mut dport_col = 0;
    let mut i = 0;

    let value = |i: usize| -> Result<&Tok<'_>, SyntaxError> {
        toks.get(i + 1)
            .ok_or_else(|| SyntaxError::at(end_col, format!("`{}` needs a value", toks[i].text)))
    };
    let dup = |t: &Tok<'_>| SyntaxError::at(t.col, format!("duplicate flag `{}`", t.text));

    while i < toks.len() {
        let flag = &toks[i];
        match flag.text {
            "-p" => {
                let v = value(i)?;
                if m.proto.is_some() {
                    return Err(dup(flag));
                }
                m.proto = Some(
                    v.text
                        .parse::<Proto>()
                        .map_err(|p| SyntaxError::at(v.col, format!("unknown protocol `{p}`")))?,
                );
                i += 2;
            }
            "-s" | "-d" => {
                let v = value(i)?;
                let block = parse_cidr(v.text).map_err(|e| SyntaxError::at(v.col, e.to_string()))?;
                let slot = if flag.text == "-s" { &mut m.src } else { &mut m.dst };
                if slot.is_some() {
                    return Err(dup(flag));
                }
                *slot = Some(block);
                i += 2;
            }
            "--sport" | "--dport" => {
                let v = value(i)?;
                let range = parse_range(v)?;
                let slot = if flag.text == "--sport" {
                    sport_col = flag.col;
                    &mut m.sport
                } else {
                    dport_col = flag.col;
                    &mut m.dport
                };
                if slot.is_some() {
                    return Err(dup(flag));
                }
                *slot = Some(range);
                i += 2;
            }
            "-i" | "-o" => {
                let v = value(i)?;
                if v.text.starts_with('-') {
                    return Err(SyntaxError::at(v.col, format!("invalid interface name `{}`", v.text)));
                }
                let slot = if flag.text == "-i" { &mut m.in_iface } else { &mut m.out_iface };
                if slot.is_some() {
                    return Err(dup(flag));
                }
                *slot = Some(v.text.to_string());
                i += 2;
            }
            "-m" => {
                let v = value(i)?;
                if v.text != "state" {
                    return Err(SyntaxError::at(v.col, format!("unknown match module `{}`", v.text)));
                }
                let opt = toks
                    .get(i + 2)
                    .ok_or_else(|| SyntaxError::at(end_col, "`-m state` needs `--state`"))?;
                if opt.text != "--state" {
                    return Err(SyntaxError::at(opt.col, format!("expected `--state`, found `{}`", opt.text)));
                }
                let list = toks
                    .get(i + 3)
                    .ok_or_else(|| SyntaxError::at(end_col, "`--state` needs a value"))?;
                if m.conn_states.is_some() {
                    return Err(dup(flag));
                }
                m.conn_states = Some(parse_states(list)?);
                i += 4;
            }
            "-j" => {
                let v = value(i)?;
                if target.is_some() {
                    return Err(dup(flag));
                }
                target = Some((v, v.text));
                i += 2;
            }
            "--to" => {
                let v = value(i)?;
                if nat_to.is_some() {
                    return Err(dup(flag));
                }
                nat_to = Some((flag, parse_nat_to(v)?));
                i += 2;
            }
            other => return Err(SyntaxError::at(flag.col, format!("unknown flag `{other}`"))),
        }
    }

    let ports_ok = matches!(m.proto, Some(Proto::Tcp | Proto::Udp));
    if m.sport.is_some() && !ports_ok {
        return Err(SyntaxError::at(sport_col, "--sport requires -p tcp or -p udp"));
    }
    if m.dport.is_some() && !ports_ok {
        return Err(SyntaxError::at(dport_col, "--dport requires -p tcp or -p udp"));
    }

    let (ttok, tname) = target.ok_or_else(|| SyntaxError::at(end_col, "missing `-j <TARGET>`"))?;
    let target = match tname {
        "ACCEPT" => Target::Accept,
        "DROP" => Target::Drop,
        "REJECT" => Target::Reject,
        "LOG" => Target::Log,
        "RETURN" => Target::Return,
        "MASQUERADE" => Target::Masquerade,
        "SNAT" | "DNAT" => {
            let (_, to) = nat_to
                .take()
                .ok_or_else(|| SyntaxError::at(ttok.col, format!("{tname} requires `--to`")))?;
            if tname == "SNAT" {
                Target::Snat(to)
            } else {
                Target::Dnat(to)
            }
        }
        name if valid_chain_name(name) => Target::Jump(name.to_string()),
        name => return Err(SyntaxError::at(ttok.col, format!("invalid target `{name}`"))),
    };
    if let Some((tok, _)) = nat_to {
        return Err(SyntaxError::at(tok.col, format!("`--to` is only valid with SNAT or DNAT, not {tname}")));
    }

    Ok(Rule { match_spec: m, target, raw_text: raw.trim().to_string() })
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}:{}", self.lo, self.hi)
        }
    }
}

impl fmt::Display for NatTo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.port {
            Some(p) => write!(f, "{}:{}", self.addr, p),
            None => write!(f, "{}", self.addr),
        }
    }
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Accept => "ACCEPT",
            Target::Drop => "DROP",
            Target::Reject => "REJECT",
            Target::Log => "LOG",
            Target::Snat(_) => "SNAT",
            Target::Dnat(_) => "DNAT",
            Target::Masquerade => "MASQUERADE",
            Target::Jump(c) => c,
            Target::Return => "RETURN",
        }
    }
}

impl Rule {
    /// Canonical flag text without the `-A <CHAIN>` prefix.
    pub fn spec_text(&self) -> String {
        let m = &self.match_spec;
        let mut s = String::new();
        if let Some(p) = m.proto {
            let _ = write!(s, "-p {p} ");
        }
        if let Some(b) = &m.src {
            let _ = write!(s, "-s {b} ");
        }
        if let Some(b) = &m.dst {
            let _ = write!(s, "-d {b} ");
        }
        if let Some(r) = &m.sport {
            let _ = write!(s, "--sport {r} ");
        }
        if let Some(r) = &m.dport {
            let _ = write!(s, "--dport {r} ");
        }
        if let Some(i) = &m.in_iface {
            let _ = write!(s, "-i {i} ");
        }
        if let Some(o) = &m.out_iface {
            let _ = write!(s, "-o {o} ");
        }
        if let Some(st) = &m.conn_states {
            let _ = write!(s, "-m state --state {st} ");
        }
        let _ = write!(s, "-j {}", self.target.name());
        if let Target::Snat(to) | Target::Dnat(to) = &self.target {
            let _ = write!(s, " --to {to}");
        }
        s
    }

    /// Canonical `-A <chain> ...` line.
    pub fn line(&self, chain: &str) -> String {
        format!("-A {chain} {}", self.spec_text())
    }
}
