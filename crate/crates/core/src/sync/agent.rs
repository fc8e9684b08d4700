use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    decode_image, read_message, write_message, PolicyMessage, SyncError, AGENT_UNKNOWN, DIGEST_MISMATCH,
    INVALID_IMAGE,
};
use crate::engine::SharedEngine;
use crate::ruleset::{image_digest, parse_ruleset, RulesetError};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub agent_id: String,
    pub group_id: String,
    pub platform: String,
    /// `host:port` of the policy server.
    pub server: String,
    pub poll_interval: Duration,
    pub stats_interval: Duration,
    pub io_timeout: Duration,
}

impl AgentConfig {
    pub fn new(agent_id: &str, group_id: &str, server: &str) -> AgentConfig {
        AgentConfig {
            agent_id: agent_id.to_string(),
            group_id: group_id.to_string(),
            platform: "host".to_string(),
            server: server.to_string(),
            poll_interval: Duration::from_secs(60),
            stats_interval: Duration::from_secs(60),
            io_timeout: Duration::from_secs(10),
        }
    }
}

/// Exponential retry delay: `base * 2^failures`, capped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
    failures: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { base: Duration::from_secs(1), cap: Duration::from_secs(60), failures: 0 }
    }
}

impl Backoff {
    /// Records a failure and returns how long to wait before retrying.
    pub fn next_delay(&mut self) -> Duration {
        let factor = 1u32.checked_shl(self.failures.min(31)).unwrap_or(u32::MAX);
        self.failures = self.failures.saturating_add(1);
        self.base.saturating_mul(factor).min(self.cap)
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Applied(u64),
    UpToDate(u64),
    /// The group exists but nothing has been published to it.
    NoRuleset,
}

/// Edge agent: keeps a shared engine on the newest ruleset of its group.
#[derive(Debug)]
pub struct Agent {
    pub config: AgentConfig,
    applied_version: u64,
    backoff: Backoff,
}

fn is_connection_error(e: &SyncError) -> bool {
    matches!(e, SyncError::Io(_) | SyncError::Closed)
}

impl Agent {
    pub fn new(config: AgentConfig) -> Agent {
        Agent { config, applied_version: 0, backoff: Backoff::default() }
    }

    pub fn applied_version(&self) -> u64 {
        self.applied_version
    }

    pub fn backoff(&self) -> &Backoff {
        &self.backoff
    }

    /// Verifies and installs a published image. Versions at or below the
    /// applied one are ignored, so `applied_version` never decreases.
    /// Returns whether the engine was swapped.
    pub fn apply_ruleset(
        &mut self,
        engine: &SharedEngine,
        version: u64,
        image_b64: &str,
        digest: &str,
    ) -> Result<bool, SyncError> {
        if version <= self.applied_version {
            return Ok(false);
        }
        let text = decode_image(image_b64)?;
        let actual = image_digest(&text).to_hex();
        if actual != digest {
            return Err(SyncError::Digest { declared: digest.to_string(), actual });
        }
        let rs = parse_ruleset(&text)?;
        if rs.version() != version {
            return Err(SyncError::VersionMismatch { image: rs.version(), message: version });
        }
        engine.swap_ruleset(rs).map_err(RulesetError::from)?;
        log::info!("agent {}: applied version {version}", self.config.agent_id);
        self.applied_version = version;
        Ok(true)
    }

    /// Reacts to one server message; returns the reply to send, if any.
    pub fn handle_message(&mut self, engine: &SharedEngine, msg: &PolicyMessage) -> Option<PolicyMessage> {
        let PolicyMessage::Ruleset { version, image, digest, .. } = msg else {
            return None;
        };
        let result = self.apply_ruleset(engine, *version, image, digest);
        Some(self.reply_for(*version, &result))
    }

    fn reply_for(&self, version: u64, result: &Result<bool, SyncError>) -> PolicyMessage {
        match result {
            Ok(applied) => PolicyMessage::Ack {
                ref_kind: "RULESET".into(),
                status: if *applied { "applied" } else { "stale" }.into(),
                version: Some(self.applied_version),
                agent_id: Some(self.config.agent_id.clone()),
                group_id: Some(self.config.group_id.clone()),
            },
            Err(e) => {
                log::warn!("agent {}: rejected version {version}: {e}", self.config.agent_id);
                let code = if matches!(e, SyncError::Digest { .. }) { DIGEST_MISMATCH } else { INVALID_IMAGE };
                PolicyMessage::Error { code: code.into(), text: e.to_string(), agent_id: Some(self.config.agent_id.clone()) }
            }
        }
    }

    fn connect(&self) -> Result<Conn, SyncError> {
        let mut last = None;
        for addr in self.config.server.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, self.config.io_timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.config.io_timeout))?;
                    s.set_write_timeout(Some(self.config.io_timeout))?;
                    let writer = s.try_clone()?;
                    return Ok(Conn { reader: BufReader::new(s), writer });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map_or_else(
            || SyncError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "server address did not resolve")),
            SyncError::Io,
        ))
    }

    fn hello(&self) -> PolicyMessage {
        PolicyMessage::Hello {
            agent_id: self.config.agent_id.clone(),
            group_id: self.config.group_id.clone(),
            platform: self.config.platform.clone(),
            have_version: self.applied_version,
        }
    }

    /// One HELLO / PULL round trip, applying whatever the server offers.
    pub fn sync(&mut self, engine: &SharedEngine) -> Result<SyncOutcome, SyncError> {
        let mut conn = self.connect()?;
        expect_ack(conn.call(&self.hello())?, "HELLO")?;
        let pull = PolicyMessage::Pull {
            agent_id: Some(self.config.agent_id.clone()),
            group_id: self.config.group_id.clone(),
            have_version: self.applied_version,
        };
        match conn.call(&pull)? {
            PolicyMessage::Ruleset { version, image, digest, .. } => {
                let result = self.apply_ruleset(engine, version, &image, &digest);
                let reply = self.reply_for(version, &result);
                let _ = conn.call(&reply)?;
                match result? {
                    true => Ok(SyncOutcome::Applied(self.applied_version)),
                    false => Ok(SyncOutcome::UpToDate(self.applied_version)),
                }
            }
            PolicyMessage::Ack { status, .. } if status == "no-ruleset" => Ok(SyncOutcome::NoRuleset),
            PolicyMessage::Ack { .. } => Ok(SyncOutcome::UpToDate(self.applied_version)),
            PolicyMessage::Error { code, text, .. } => Err(SyncError::Remote { code, text }),
            other => Err(SyncError::Unexpected { sent: "PULL", got: other.kind() }),
        }
    }

    /// Sends the current counters. Re-introduces itself once if the server
    /// has forgotten this agent.
    pub fn report_stats(&mut self, engine: &SharedEngine) -> Result<(), SyncError> {
        let mut conn = self.connect()?;
        let report = PolicyMessage::StatsReport {
            agent_id: self.config.agent_id.clone(),
            stats: engine.snapshot_counters(),
            version: self.applied_version,
        };
        match conn.call(&report)? {
            PolicyMessage::Error { code, .. } if code == AGENT_UNKNOWN => {
                expect_ack(conn.call(&self.hello())?, "HELLO")?;
                expect_ack(conn.call(&report)?, "STATS_REPORT")
            }
            other => expect_ack(other, "STATS_REPORT"),
        }
    }

    /// Polls and reports on independent timers until `stop` is raised.
    /// Connection failures push the next sync out by the backoff delay;
    /// failed stats reports are dropped.
    pub fn run(&mut self, engine: &SharedEngine, stop: &AtomicBool) {
        let mut next_sync = Instant::now();
        let mut next_stats = Instant::now() + self.config.stats_interval;
        while !stop.load(Ordering::Relaxed) {
            let now = Instant::now();
            if now >= next_sync {
                next_sync = match self.sync(engine) {
                    Ok(outcome) => {
                        log::debug!("agent {}: {outcome:?}", self.config.agent_id);
                        self.backoff.reset();
                        now + self.config.poll_interval
                    }
                    Err(e) if is_connection_error(&e) => {
                        let d = self.backoff.next_delay();
                        log::warn!("agent {}: sync failed ({e}); retry in {d:?}", self.config.agent_id);
                        now + d
                    }
                    Err(e) => {
                        self.backoff.reset();
                        log::warn!("agent {}: sync failed: {e}", self.config.agent_id);
                        now + self.config.poll_interval
                    }
                };
            }
            if now >= next_stats {
                if let Err(e) = self.report_stats(engine) {
                    log::info!("agent {}: stats report dropped: {e}", self.config.agent_id);
                }
                next_stats = now + self.config.stats_interval;
            }
            let wake = next_sync.min(next_stats);
            let nap = wake.saturating_duration_since(Instant::now()).min(Duration::from_millis(20));
            thread::sleep(nap.max(Duration::from_millis(1)));
        }
    }
}

fn expect_ack(msg: PolicyMessage, sent: &'static str) -> Result<(), SyncError> {
    match msg {
        PolicyMessage::Ack { .. } => Ok(()),
        PolicyMessage::Error { code, text, .. } => Err(SyncError::Remote { code, text }),
        other => Err(SyncError::Unexpected { sent, got: other.kind() }),
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn call(&mut self, msg: &PolicyMessage) -> Result<PolicyMessage, SyncError> {
        write_message(&mut self.writer, msg)?;
        read_message(&mut self.reader)
    }
}
