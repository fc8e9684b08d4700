//! Ruleset configuration: rule grammar, chains and tables, the canonical
//! image format with its SHA-256 checksum, and the random-rule generator
//! used by the benchmark.
//!
//! Rulesets are immutable values. Every update returns a new, validated
//! ruleset and leaves the original untouched.

mod gen;
mod grammar;
mod image;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{CidrBlock, Proto};

pub use gen::{generate_random_rules, RuleGenSpec};
pub use grammar::{parse_rule, parse_rule_spec, AppendLine, SyntaxError};
pub use image::{compute_checksum, image_digest, parse_ruleset, serialize_ruleset, Digest, IMAGE_MAGIC};

pub const INPUT: &str = "INPUT";
pub const FORWARD: &str = "FORWARD";
pub const OUTPUT: &str = "OUTPUT";
pub const PREROUTING: &str = "PREROUTING";
pub const POSTROUTING: &str = "POSTROUTING";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Table {
    Filter,
    Nat,
}

impl Table {
    pub fn builtin_chains(&self) -> &'static [&'static str] {
        match self {
            Table::Filter => &[INPUT, FORWARD, OUTPUT],
            Table::Nat => &[PREROUTING, POSTROUTING],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Table::Filter => "filter",
            Table::Nat => "nat",
        }
    }
}

pub fn builtin_table(chain: &str) -> Option<Table> {
    match chain {
        INPUT | FORWARD | OUTPUT => Some(Table::Filter),
        PREROUTING | POSTROUTING => Some(Table::Nat),
        _ => None,
    }
}

/// Connection-tracking classification a rule can match on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConnState {
    New,
    Established,
    Invalid,
}

impl ConnState {
    pub const ALL: [ConnState; 3] = [ConnState::New, ConnState::Established, ConnState::Invalid];

    fn bit(self) -> u8 {
        match self {
            ConnState::New => 1,
            ConnState::Established => 2,
            ConnState::Invalid => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConnState::New => "NEW",
            ConnState::Established => "ESTABLISHED",
            ConnState::Invalid => "INVALID",
        }
    }
}

impl fmt::Display for ConnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StateSet(u8);

impl StateSet {
    pub const EMPTY: StateSet = StateSet(0);

    pub fn with(self, st: ConnState) -> StateSet {
        StateSet(self.0 | st.bit())
    }

    pub fn contains(&self, st: ConnState) -> bool {
        self.0 & st.bit() != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ConnState> + '_ {
        ConnState::ALL.into_iter().filter(|s| self.contains(*s))
    }
}

impl FromIterator<ConnState> for StateSet {
    fn from_iter<I: IntoIterator<Item = ConnState>>(iter: I) -> Self {
        iter.into_iter().fold(StateSet::EMPTY, StateSet::with)
    }
}

impl fmt::Display for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(|s| s.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// Inclusive port range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRange {
    pub lo: u16,
    pub hi: u16,
}

impl PortRange {
    pub fn single(port: u16) -> Self {
        PortRange { lo: port, hi: port }
    }

    pub fn contains(&self, port: u16) -> bool {
        self.lo <= port && port <= self.hi
    }
}

/// Conjunction of optional predicates; an absent field is a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct MatchSpec {
    pub proto: Option<Proto>,
    pub src: Option<CidrBlock>,
    pub dst: Option<CidrBlock>,
    pub sport: Option<PortRange>,
    pub dport: Option<PortRange>,
    pub in_iface: Option<String>,
    pub out_iface: Option<String>,
    pub conn_states: Option<StateSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NatTo {
    pub addr: Ipv4Addr,
    pub port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Accept,
    Drop,
    Reject,
    Log,
    Snat(NatTo),
    Dnat(NatTo),
    Masquerade,
    Jump(String),
    Return,
}

impl Target {
    pub fn is_nat(&self) -> bool {
        matches!(self, Target::Snat(_) | Target::Dnat(_) | Target::Masquerade)
    }
}

/// One rule. `raw_text` keeps the line as it was written; equality ignores
/// it and compares only the match and target.
#[derive(Debug, Clone)]
pub struct Rule {
    pub match_spec: MatchSpec,
    pub target: Target,
    pub raw_text: String,
}

impl Rule {
    pub fn new(match_spec: MatchSpec, target: Target) -> Rule {
        let mut r = Rule { match_spec, target, raw_text: String::new() };
        r.raw_text = r.spec_text();
        r
    }
}

impl PartialEq for Rule {
    fn eq(&self, other: &Self) -> bool {
        self.match_spec == other.match_spec && self.target == other.target
    }
}

impl Eq for Rule {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "ACCEPT")]
    Accept,
    #[serde(rename = "DROP")]
    Drop,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Accept => "ACCEPT",
            Policy::Drop => "DROP",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ACCEPT" => Ok(Policy::Accept),
            "DROP" => Ok(Policy::Drop),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub name: String,
    pub rules: Vec<Rule>,
    /// Present on built-in chains only.
    pub policy: Option<Policy>,
}

impl Chain {
    pub fn builtin(name: &str, policy: Policy) -> Chain {
        Chain { name: name.to_string(), rules: Vec::new(), policy: Some(policy) }
    }

    pub fn user(name: &str) -> Chain {
        Chain { name: name.to_string(), rules: Vec::new(), policy: None }
    }

    pub fn is_builtin(&self) -> bool {
        builtin_table(&self.name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("{chain}[{index}] jumps to unknown chain `{target}`")]
    DanglingJump { chain: String, index: usize, target: String },
    #[error("jump cycle through chains {0:?}")]
    JumpCycle(Vec<String>),
    #[error("{chain}[{index}]: {target} is not allowed here ({reason})")]
    TargetPlacement { chain: String, index: usize, target: String, reason: &'static str },
    #[error("chain `{0}` is declared in both tables")]
    DuplicateChain(String),
    #[error("invalid chain name `{0}`")]
    BadChainName(String),
    #[error("built-in chain `{0}` is missing or lacks a policy")]
    BuiltinPolicy(String),
    #[error("user chain `{0}` carries a policy")]
    UserPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RulesetError {
    #[error("line {line}: {source}")]
    Syntax { line: usize, source: SyntaxError },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("integrity: image declares sha256 `{declared}`, body hashes to {actual}")]
    Integrity { declared: String, actual: String },
    #[error("validation: {0}")]
    Validation(#[from] ValidationError),
    #[error("unknown chain `{0}`")]
    UnknownChain(String),
    #[error("chain `{0}` is user-defined and has no policy")]
    PolicyOnUserChain(String),
    #[error("chain `{0}` already exists")]
    ChainExists(String),
}

impl RulesetError {
    pub fn is_integrity(&self) -> bool {
        matches!(self, RulesetError::Integrity { .. })
    }
}

/// The filter and nat tables plus a version number assigned at publication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ruleset {
    filter: BTreeMap<String, Chain>,
    nat: BTreeMap<String, Chain>,
    version: u64,
}

impl Default for Ruleset {
    fn default() -> Self {
        Ruleset::new()
    }
}

impl Ruleset {
    /// Five empty built-in chains, every policy ACCEPT, version 0.
    pub fn new() -> Ruleset {
        let mut rs = Ruleset { filter: BTreeMap::new(), nat: BTreeMap::new(), version: 0 };
        for table in [Table::Filter, Table::Nat] {
            for name in table.builtin_chains() {
                rs.table_mut(table).insert(name.to_string(), Chain::builtin(name, Policy::Accept));
            }
        }
        rs
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Ruleset {
        self.version = version;
        self
    }

    fn table_map(&self, table: Table) -> &BTreeMap<String, Chain> {
        match table {
            Table::Filter => &self.filter,
            Table::Nat => &self.nat,
        }
    }

    fn table_mut(&mut self, table: Table) -> &mut BTreeMap<String, Chain> {
        match table {
            Table::Filter => &mut self.filter,
            Table::Nat => &mut self.nat,
        }
    }

    /// Chains of `table` in canonical order: built-ins in their fixed order,
    /// then user chains sorted by name.
    pub fn chains(&self, table: Table) -> Vec<&Chain> {
        let map = self.table_map(table);
        let mut out: Vec<&Chain> =
            table.builtin_chains().iter().filter_map(|n| map.get(*n)).collect();
        out.extend(map.values().filter(|c| !c.is_builtin()));
        out
    }

    pub fn table_of(&self, chain: &str) -> Option<Table> {
        [Table::Filter, Table::Nat]
            .into_iter()
            .find(|t| self.table_map(*t).contains_key(chain))
    }

    pub fn chain(&self, name: &str) -> Option<&Chain> {
        self.table_of(name).and_then(|t| self.table_map(t).get(name))
    }

    pub fn rule_count(&self) -> usize {
        self.filter.values().chain(self.nat.values()).map(|c| c.rules.len()).sum()
    }

    pub(crate) fn insert_chain(&mut self, table: Table, chain: Chain) {
        self.table_mut(table).insert(chain.name.clone(), chain);
    }

    pub(crate) fn chain_mut(&mut self, name: &str) -> Option<&mut Chain> {
        let t = self.table_of(name)?;
        self.table_mut(t).get_mut(name)
    }

    pub fn add_user_chain(&self, table: Table, name: &str) -> Result<Ruleset, RulesetError> {
        if !grammar::valid_chain_name(name) || builtin_table(name).is_some() {
            return Err(ValidationError::BadChainName(name.to_string()).into());
        }
        if self.table_of(name).is_some() {
            return Err(RulesetError::ChainExists(name.to_string()));
        }
        let mut rs = self.clone();
        rs.insert_chain(table, Chain::user(name));
        Ok(rs)
    }

    pub fn append_rule(&self, chain: &str, rule: Rule) -> Result<Ruleset, RulesetError> {
        let mut rs = self.clone();
        rs.chain_mut(chain)
            .ok_or_else(|| RulesetError::UnknownChain(chain.to_string()))?
            .rules
            .push(rule);
        rs.validate()?;
        Ok(rs)
    }

    /// Appends many rules at once, validating only the final result.
    pub fn extend_chain(&self, chain: &str, rules: impl IntoIterator<Item = Rule>) -> Result<Ruleset, RulesetError> {
        let mut rs = self.clone();
        rs.chain_mut(chain)
            .ok_or_else(|| RulesetError::UnknownChain(chain.to_string()))?
            .rules
            .extend(rules);
        rs.validate()?;
        Ok(rs)
    }

    pub fn set_policy(&self, chain: &str, policy: Policy) -> Result<Ruleset, RulesetError> {
        let mut rs = self.clone();
        let c = rs.chain_mut(chain).ok_or_else(|| RulesetError::UnknownChain(chain.to_string()))?;
        if !c.is_builtin() {
            return Err(RulesetError::PolicyOnUserChain(chain.to_string()));
        }
        c.policy = Some(policy);
        Ok(rs)
    }

    pub fn flush_chain(&self, chain: &str) -> Result<Ruleset, RulesetError> {
        let mut rs = self.clone();
        rs.chain_mut(chain)
            .ok_or_else(|| RulesetError::UnknownChain(chain.to_string()))?
            .rules
            .clear();
        rs.validate()?;
        Ok(rs)
    }

    /// Checks chain declarations, jump targets, acyclicity and NAT target
    /// placement.
    pub fn validate(&self) -> Result<(), ValidationError> {
        for table in [Table::Filter, Table::Nat] {
            for name in table.builtin_chains() {
                match self.table_map(table).get(*name) {
                    Some(c) if c.policy.is_some() => {}
                    _ => return Err(ValidationError::BuiltinPolicy(name.to_string())),
                }
            }
        }
        for c in self.filter.values() {
            if self.nat.contains_key(&c.name) {
                return Err(ValidationError::DuplicateChain(c.name.clone()));
            }
        }
        for table in [Table::Filter, Table::Nat] {
            let map = self.table_map(table);
            for chain in map.values() {
                if !chain.is_builtin() {
                    if !grammar::valid_chain_name(&chain.name) {
                        return Err(ValidationError::BadChainName(chain.name.clone()));
                    }
                    if chain.policy.is_some() {
                        return Err(ValidationError::UserPolicy(chain.name.clone()));
                    }
                } else if builtin_table(&chain.name) != Some(table) {
                    return Err(ValidationError::BuiltinPolicy(chain.name.clone()));
                }
                for (index, rule) in chain.rules.iter().enumerate() {
                    check_target(table, chain, index, rule, map)?;
                }
            }
            check_acyclic(map)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Digest {
        compute_checksum(&image::body_text(self))
    }
}

fn check_target(
    table: Table,
    chain: &Chain,
    index: usize,
    rule: &Rule,
    map: &BTreeMap<String, Chain>,
) -> Result<(), ValidationError> {
    let placement = |reason: &'static str| ValidationError::TargetPlacement {
        chain: chain.name.clone(),
        index,
        target: rule.target.name().to_string(),
        reason,
    };
    match (&rule.target, table) {
        (Target::Jump(to), _) => match map.get(to) {
            Some(c) if !c.is_builtin() => Ok(()),
            _ => Err(ValidationError::DanglingJump {
                chain: chain.name.clone(),
                index,
                target: to.clone(),
            }),
        },
        (Target::Snat(_) | Target::Dnat(_) | Target::Masquerade, Table::Filter) => {
            Err(placement("NAT targets belong to the nat table"))
        }
        (Target::Dnat(_), Table::Nat) if chain.name != PREROUTING => {
            Err(placement("DNAT only in PREROUTING"))
        }
        (Target::Snat(_) | Target::Masquerade, Table::Nat) if chain.name != POSTROUTING => {
            Err(placement("SNAT/MASQUERADE only in POSTROUTING"))
        }
        (Target::Drop | Target::Reject, Table::Nat) => {
            Err(placement("filtering verdicts belong to the filter table"))
        }
        _ => Ok(()),
    }
}

fn check_acyclic(map: &BTreeMap<String, Chain>) -> Result<(), ValidationError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit<'a>(
        name: &'a str,
        map: &'a BTreeMap<String, Chain>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Result<(), ValidationError> {
        match marks.get(name) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Active) => {
                let start = stack.iter().position(|n| *n == name).unwrap_or(0);
                let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                cycle.push(name.to_string());
                return Err(ValidationError::JumpCycle(cycle));
            }
            None => {}
        }
        marks.insert(name, Mark::Active);
        stack.push(name);
        if let Some(chain) = map.get(name) {
            let targets: BTreeSet<&str> = chain
                .rules
                .iter()
                .filter_map(|r| match &r.target {
                    Target::Jump(t) => Some(t.as_str()),
                    _ => None,
                })
                .collect();
            for t in targets {
                visit(t, map, marks, stack)?;
            }
        }
        stack.pop();
        marks.insert(name, Mark::Done);
        Ok(())
    }

    let mut marks = BTreeMap::new();
    for name in map.keys() {
        visit(name, map, &mut marks, &mut Vec::new())?;
    }
    Ok(())
}
