mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use picofw::engine::{Engine, SharedEngine};
use picofw::ruleset::Ruleset;
use picofw::sync::{Agent, AgentConfig, PolicyMessage, PolicyServer, SyncOutcome};
use proptest::prelude::*;

#[test]
fn three_agents_converge_and_reject_corruption() {
    let poll = Duration::from_millis(400);
    let r = common::sync_convergence(poll).unwrap();
    assert!(r.v1 <= 2 * poll && r.v2 <= 2 * poll, "{r:?}");
    assert!(r.corrupted_replies >= 1, "{r:?}");
    assert_eq!(r.held_version, 2);
    assert!(r.recovered, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn shuffled_replays_never_lower_the_version(seed in any::<u64>(), versions in 1u64..8, len in 1usize..60) {
        common::replay_is_monotonic(seed, versions, len).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn wire_session_over_loopback() {
    let server = PolicyServer::new();
    let handle = server.spawn("127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(handle.local_addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut call = |line: &str| {
        w.write_all(line.as_bytes()).unwrap();
        w.write_all(b"\n").unwrap();
        let mut reply = String::new();
        r.read_line(&mut reply).unwrap();
        serde_json::from_str::<serde_json::Value>(&reply).unwrap()
    };
    let hello = r#"{"kind":"HELLO","agent_id":"x","group_id":"edge","platform":"rpi","have_version":0}"#;
    assert_eq!(call(hello)["code"], "GROUP_NOT_FOUND");
    assert_eq!(call("not json")["code"], "BAD_FRAME");
    assert_eq!(call(r#"{"kind":"WHAT"}"#)["code"], "UNKNOWN_KIND");

    let publish = PolicyMessage::ruleset(Some("edge"), 0, &common::sample_image(22)).to_line();
    let ack = call(&publish);
    assert_eq!((ack["kind"].as_str(), ack["version"].as_u64()), (Some("ACK"), Some(1)));
    assert_eq!(call(hello)["status"], "registered");
    let pull = call(r#"{"kind":"PULL","agent_id":"x","group_id":"edge","have_version":0}"#);
    assert_eq!(pull["kind"], "RULESET");
    assert_eq!(pull["version"], 1);
    let pull = call(r#"{"kind":"PULL","agent_id":"x","group_id":"edge","have_version":1}"#);
    assert_eq!(pull["status"], "up-to-date");
    let stats = call(r#"{"kind":"STATS_REPORT","agent_id":"nobody","stats":{},"version":0}"#);
    assert!(stats["kind"] == "ERROR", "{stats}");
}

#[test]
fn agent_sync_round_and_fleet_view() {
    let dir = tempfile::tempdir().unwrap();
    let server = PolicyServer::open(dir.path()).unwrap();
    let handle = server.spawn("127.0.0.1:0").unwrap();
    let engine = SharedEngine::new(Engine::new(Ruleset::new()).unwrap());
    let mut agent = Agent::new(AgentConfig::new("node-1", "edge", &handle.local_addr().to_string()));
    assert!(agent.sync(&engine).is_err());
    server.create_group("edge", "test group").unwrap();
    assert!(matches!(agent.sync(&engine).unwrap(), SyncOutcome::NoRuleset));
    server.publish_ruleset("edge", common::sample_image(80).as_bytes()).unwrap();
    assert!(matches!(agent.sync(&engine).unwrap(), SyncOutcome::Applied(1)));
    assert!(matches!(agent.sync(&engine).unwrap(), SyncOutcome::UpToDate(1)));
    agent.report_stats(&engine).unwrap();

    let fleet = server.query_fleet("edge").unwrap();
    assert_eq!(fleet.current_version, 1);
    assert_eq!(fleet.agents.len(), 1);
    assert!(!fleet.version_skew);

    // State survives a restart from the same directory.
    drop(handle);
    let reopened = PolicyServer::open(dir.path()).unwrap();
    assert_eq!(reopened.query_fleet("edge").unwrap().current_version, 1);
}
