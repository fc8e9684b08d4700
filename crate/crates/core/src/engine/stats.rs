use serde::{Deserialize, Serialize};

/// Packet and byte count of a single rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStats {
    pub chain: String,
    pub index: usize,
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHits {
    pub chain: String,
    pub hits: u64,
}

/// Point-in-time copy of an engine's counters. Also the `stats` payload of
/// a STATS_REPORT message.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub rules: Vec<RuleStats>,
    pub policy_hits: Vec<PolicyHits>,
    pub packets_total: u64,
    pub bytes_total: u64,
    pub conn_count: u64,
    pub evictions: u64,
    pub uptime_s: u64,
    pub timestamp: u64,
    pub ruleset_version: u64,
}

impl StatsSnapshot {
    pub fn rule(&self, chain: &str, index: usize) -> Option<&RuleStats> {
        self.rules.iter().find(|r| r.chain == chain && r.index == index)
    }

    pub fn policy_hits(&self, chain: &str) -> u64 {
        self.policy_hits.iter().find(|p| p.chain == chain).map_or(0, |p| p.hits)
    }

    pub fn is_zero(&self) -> bool {
        self.rules.iter().all(|r| r.packets == 0 && r.bytes == 0)
            && self.policy_hits.iter().all(|p| p.hits == 0)
            && self.packets_total == 0
            && self.bytes_total == 0
            && self.conn_count == 0
            && self.evictions == 0
    }
}
