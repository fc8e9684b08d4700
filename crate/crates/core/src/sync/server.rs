use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{
    decode_image, decode_line, encode_image, write_message, PolicyMessage, SyncError, AGENT_UNKNOWN, BAD_REQUEST,
    DIGEST_MISMATCH, GROUP_NOT_FOUND, INVALID_IMAGE,
};
use crate::engine::StatsSnapshot;
use crate::ruleset::{image_digest, parse_ruleset, serialize_ruleset};

const STATE_FILE: &str = "state.json";
const MAX_LINE_BYTES: u64 = 32 * 1024 * 1024;
/// Stats records kept in memory per agent; the group log keeps all of them.
const SERIES_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedImage {
    pub version: u64,
    /// Canonical image text.
    pub image: String,
    pub digest: String,
    pub published_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    pub platform: String,
    pub applied_version: u64,
    pub last_seen: u64,
    pub latest_stats: Option<StatsSnapshot>,
    #[serde(skip)]
    pub series: VecDeque<StatsSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupState {
    pub group_id: String,
    pub description: String,
    pub current: Option<PublishedImage>,
    pub history: Vec<PublishedImage>,
    pub agents: BTreeMap<String, AgentRecord>,
}

impl GroupState {
    pub fn current_version(&self) -> u64 {
        self.current.as_ref().map_or(0, |c| c.version)
    }
}

/// Everything the server knows; this is also the content of `state.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ServerState {
    pub groups: BTreeMap<String, GroupState>,
}

impl ServerState {
    /// Reads `state.json` from `dir`; a missing file is an empty state.
    pub fn load(dir: &Path) -> Result<ServerState, SyncError> {
        match fs::read_to_string(dir.join(STATE_FILE)) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| SyncError::Persist(format!("{STATE_FILE}: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(ServerState::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn find_agent_mut(&mut self, agent_id: &str) -> Option<(&str, &mut AgentRecord)> {
        self.groups
            .iter_mut()
            .find_map(|(g, st)| st.agents.get_mut(agent_id).map(|a| (g.as_str(), a)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: String,
    pub platform: String,
    pub applied_version: u64,
    pub last_seen: u64,
    pub stats: Option<StatsSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub group_id: String,
    pub current_version: u64,
    pub agents: Vec<AgentSummary>,
    /// Agents disagree on the applied version.
    pub version_skew: bool,
    pub total_packets: u64,
    pub total_bytes: u64,
    pub total_conns: u64,
}

impl FleetSummary {
    pub fn of(group: &GroupState) -> FleetSummary {
        let agents: Vec<AgentSummary> = group
            .agents
            .values()
            .map(|a| AgentSummary {
                agent_id: a.agent_id.clone(),
                platform: a.platform.clone(),
                applied_version: a.applied_version,
                last_seen: a.last_seen,
                stats: a.latest_stats.clone(),
            })
            .collect();
        let stat = |f: fn(&StatsSnapshot) -> u64| agents.iter().filter_map(|a| a.stats.as_ref()).map(f).sum();
        FleetSummary {
            group_id: group.group_id.clone(),
            current_version: group.current_version(),
            version_skew: agents.windows(2).any(|w| w[0].applied_version != w[1].applied_version),
            total_packets: stat(|s| s.packets_total),
            total_bytes: stat(|s| s.bytes_total),
            total_conns: stat(|s| s.conn_count),
            agents,
        }
    }
}

pub fn valid_group_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"_-.".contains(&b))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// The central policy store. Cheap to clone; clones share state. All state
/// changes go through one lock, so updates to a group are serialised.
#[derive(Debug, Clone)]
pub struct PolicyServer {
    state: Arc<Mutex<ServerState>>,
    data_dir: Option<PathBuf>,
}

impl Default for PolicyServer {
    fn default() -> Self {
        PolicyServer::new()
    }
}

impl PolicyServer {
    /// An in-memory server with nothing persisted.
    pub fn new() -> PolicyServer {
        PolicyServer { state: Arc::new(Mutex::new(ServerState::default())), data_dir: None }
    }

    /// A server persisting to `dir`, resuming from its `state.json`.
    pub fn open(dir: &Path) -> Result<PolicyServer, SyncError> {
        fs::create_dir_all(dir)?;
        let state = ServerState::load(dir)?;
        Ok(PolicyServer { state: Arc::new(Mutex::new(state)), data_dir: Some(dir.to_path_buf()) })
    }

    fn lock(&self) -> MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn state(&self) -> ServerState {
        self.lock().clone()
    }

    pub fn group(&self, group_id: &str) -> Option<GroupState> {
        self.lock().groups.get(group_id).cloned()
    }

    fn log_event(&self, group_id: &str, event: serde_json::Value) -> Result<(), SyncError> {
        let Some(dir) = &self.data_dir else { return Ok(()) };
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{group_id}.log.jsonl")))?;
        let mut line = event.to_string();
        line.push('\n');
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    fn save_state(&self, state: &ServerState) -> Result<(), SyncError> {
        let Some(dir) = &self.data_dir else { return Ok(()) };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let text = serde_json::to_string_pretty(state).map_err(|e| SyncError::Persist(e.to_string()))?;
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    fn persist(&self, state: &ServerState, group_id: &str, event: serde_json::Value) {
        if let Err(e) = self.log_event(group_id, event).and_then(|_| self.save_state(state)) {
            log::error!("persisting group {group_id}: {e}");
        }
    }

    pub fn create_group(&self, group_id: &str, description: &str) -> Result<(), SyncError> {
        if !valid_group_id(group_id) {
            return Err(SyncError::BadGroupId(group_id.to_string()));
        }
        let mut st = self.lock();
        let g = st.groups.entry(group_id.to_string()).or_default();
        g.group_id = group_id.to_string();
        g.description = description.to_string();
        let snapshot = st.clone();
        self.persist(&snapshot, group_id, serde_json::json!({"ts": unix_now(), "event": "create", "description": description}));
        Ok(())
    }

    /// Stores `image` as the next version of `group_id`, creating the group
    /// on first publish. The stored image is re-serialised canonically with
    /// the assigned version.
    pub fn publish_ruleset(&self, group_id: &str, image: &[u8]) -> Result<u64, SyncError> {
        if !valid_group_id(group_id) {
            return Err(SyncError::BadGroupId(group_id.to_string()));
        }
        let text = std::str::from_utf8(image).map_err(|_| SyncError::Image("image is not UTF-8".into()))?;
        let rs = parse_ruleset(text)?;
        let mut st = self.lock();
        let g = st.groups.entry(group_id.to_string()).or_default();
        g.group_id = group_id.to_string();
        let version = g.current_version() + 1;
        let canonical = serialize_ruleset(&rs.with_version(version));
        let digest = image_digest(&canonical).to_hex();
        let published = PublishedImage { version, image: canonical, digest: digest.clone(), published_at: unix_now() };
        if let Some(prev) = g.current.replace(published) {
            g.history.push(prev);
        }
        let snapshot = st.clone();
        self.persist(
            &snapshot,
            group_id,
            serde_json::json!({"ts": unix_now(), "event": "publish", "version": version, "digest": digest}),
        );
        log::info!("group {group_id}: published version {version}");
        Ok(version)
    }

    pub fn query_fleet(&self, group_id: &str) -> Result<FleetSummary, SyncError> {
        let st = self.lock();
        let g = st.groups.get(group_id).ok_or_else(|| SyncError::GroupNotFound(group_id.to_string()))?;
        Ok(FleetSummary::of(g))
    }

    /// Answers one raw line. Every line gets exactly one reply.
    pub fn handle_line(&self, line: &str) -> PolicyMessage {
        match decode_line(line) {
            Ok(msg) => self.handle(msg),
            Err(e) => PolicyMessage::error(e.code, e.text),
        }
    }

    pub fn handle(&self, msg: PolicyMessage) -> PolicyMessage {
        let now = unix_now();
        match msg {
            PolicyMessage::Hello { agent_id, group_id, platform, have_version } => {
                let mut st = self.lock();
                let Some(g) = st.groups.get_mut(&group_id) else {
                    return group_not_found(&group_id);
                };
                let current = g.current_version();
                let rec = g.agents.entry(agent_id.clone()).or_insert_with(|| AgentRecord {
                    agent_id: agent_id.clone(),
                    platform: platform.clone(),
                    applied_version: have_version,
                    last_seen: now,
                    latest_stats: None,
                    series: VecDeque::new(),
                });
                rec.platform = platform;
                rec.applied_version = have_version;
                rec.last_seen = now;
                let snapshot = st.clone();
                self.persist(
                    &snapshot,
                    &group_id,
                    serde_json::json!({"ts": now, "event": "hello", "agent_id": agent_id, "have_version": have_version}),
                );
                PolicyMessage::Ack {
                    ref_kind: "HELLO".into(),
                    status: "registered".into(),
                    version: Some(current),
                    agent_id: Some(agent_id),
                    group_id: Some(group_id),
                }
            }
            PolicyMessage::Pull { agent_id, group_id, have_version } => {
                let mut st = self.lock();
                let Some(g) = st.groups.get_mut(&group_id) else {
                    return group_not_found(&group_id);
                };
                if let Some(a) = agent_id.as_ref().and_then(|id| g.agents.get_mut(id)) {
                    a.last_seen = now;
                }
                match &g.current {
                    Some(cur) if have_version < cur.version => PolicyMessage::Ruleset {
                        group_id: Some(group_id),
                        version: cur.version,
                        image: encode_image(&cur.image),
                        digest: cur.digest.clone(),
                        sig: None,
                    },
                    cur => PolicyMessage::Ack {
                        ref_kind: "PULL".into(),
                        status: if cur.is_some() { "up-to-date" } else { "no-ruleset" }.into(),
                        version: Some(g.current_version()),
                        agent_id: None,
                        group_id: Some(group_id),
                    },
                }
            }
            PolicyMessage::Ruleset { group_id, image, digest, .. } => {
                let Some(group_id) = group_id else {
                    return PolicyMessage::error(BAD_REQUEST, "RULESET to the server needs group_id");
                };
                let text = match decode_image(&image) {
                    Ok(t) => t,
                    Err(e) => return PolicyMessage::error(INVALID_IMAGE, e.to_string()),
                };
                let actual = image_digest(&text).to_hex();
                if actual != digest {
                    return PolicyMessage::error(DIGEST_MISMATCH, format!("declared {digest}, computed {actual}"));
                }
                match self.publish_ruleset(&group_id, text.as_bytes()) {
                    Ok(v) => PolicyMessage::Ack {
                        ref_kind: "RULESET".into(),
                        status: "published".into(),
                        version: Some(v),
                        agent_id: None,
                        group_id: Some(group_id),
                    },
                    Err(e) => PolicyMessage::error(INVALID_IMAGE, e.to_string()),
                }
            }
            PolicyMessage::StatsReport { agent_id, stats, version } => {
                let mut st = self.lock();
                let Some((group_id, rec)) = st.find_agent_mut(&agent_id) else {
                    return agent_unknown(&agent_id);
                };
                let group_id = group_id.to_string();
                rec.last_seen = now;
                rec.applied_version = version;
                rec.series.push_back(stats.clone());
                if rec.series.len() > SERIES_LEN {
                    rec.series.pop_front();
                }
                rec.latest_stats = Some(stats.clone());
                let snapshot = st.clone();
                self.persist(
                    &snapshot,
                    &group_id,
                    serde_json::json!({"ts": now, "event": "stats", "agent_id": agent_id, "version": version, "stats": stats}),
                );
                PolicyMessage::ack("STATS_REPORT", "recorded")
            }
            PolicyMessage::Ack { ref_kind, status, version, agent_id, .. } => {
                let Some(agent_id) = agent_id else {
                    return PolicyMessage::ack("ACK", "noted");
                };
                let mut st = self.lock();
                let Some((group_id, rec)) = st.find_agent_mut(&agent_id) else {
                    return agent_unknown(&agent_id);
                };
                let group_id = group_id.to_string();
                rec.last_seen = now;
                if let Some(v) = version {
                    rec.applied_version = v;
                }
                let snapshot = st.clone();
                self.persist(
                    &snapshot,
                    &group_id,
                    serde_json::json!({"ts": now, "event": "ack", "agent_id": agent_id, "ref": ref_kind, "status": status, "version": version}),
                );
                PolicyMessage::ack("ACK", "noted")
            }
            PolicyMessage::Error { code, text, agent_id } => {
                log::warn!("agent {} reported {code}: {text}", agent_id.as_deref().unwrap_or("?"));
                let group = agent_id.as_ref().and_then(|id| {
                    let st = self.lock();
                    st.groups.iter().find(|(_, g)| g.agents.contains_key(id)).map(|(g, _)| g.clone())
                });
                if let Some(g) = group {
                    let _ = self.log_event(
                        &g,
                        serde_json::json!({"ts": now, "event": "agent_error", "agent_id": agent_id, "code": code, "text": text}),
                    );
                }
                PolicyMessage::ack("ERROR", "noted")
            }
        }
    }

    /// Serves one connection until the peer closes it.
    pub fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let peer = stream.peer_addr().ok();
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        loop {
            let mut line = String::new();
            let n = (&mut reader).take(MAX_LINE_BYTES).read_line(&mut line)?;
            if n == 0 {
                break;
            }
            let reply = if line.ends_with('\n') || n < MAX_LINE_BYTES as usize {
                self.handle_line(&line)
            } else {
                PolicyMessage::error(super::BAD_FRAME, "line too long")
            };
            write_message(&mut writer, &reply)?;
        }
        log::debug!("connection from {peer:?} closed");
        Ok(())
    }

    /// Listens on `addr` in a background thread, one thread per connection.
    pub fn spawn(&self, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let server = self.clone();
        let flag = stop.clone();
        let thread = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let server = server.clone();
                        thread::spawn(move || {
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_read_timeout(Some(Duration::from_secs(120)));
                            if let Err(e) = server.serve_connection(stream) {
                                log::debug!("connection error: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("accept: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });
        log::info!("policy server listening on {local}");
        Ok(ServerHandle { addr: local, stop, thread: Some(thread) })
    }
}

fn group_not_found(group_id: &str) -> PolicyMessage {
    PolicyMessage::error(GROUP_NOT_FOUND, format!("no group `{group_id}`"))
}

fn agent_unknown(agent_id: &str) -> PolicyMessage {
    PolicyMessage::error(AGENT_UNKNOWN, format!("agent `{agent_id}` has not said HELLO"))
}

/// A running listener. Dropping it stops accepting new connections.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is raised.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
