use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::net::{Endpoint, Packet, TcpFlags};

/// Which filter chain the benchmark flow crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchPath {
    /// The box sits between client and server.
    Forward,
    /// The box is the server.
    Input,
}

impl BenchPath {
    pub fn chain(&self) -> &'static str {
        match self {
            BenchPath::Forward => crate::ruleset::FORWARD,
            BenchPath::Input => crate::ruleset::INPUT,
        }
    }
}

impl std::str::FromStr for BenchPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "forward" | "fwd" => Ok(BenchPath::Forward),
            "input" | "local" => Ok(BenchPath::Input),
            other => Err(format!("unknown path `{other}` (forward|input)")),
        }
    }
}

/// A synthetic bulk TCP transfer from `client` to `server`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub client: Endpoint,
    pub server: Endpoint,
    /// Payload bytes per data segment.
    pub segment_bytes: u32,
    /// Maximum unacknowledged payload in flight.
    pub window_bytes: u32,
    pub total_bytes: u64,
    pub path: BenchPath,
}

pub const TCP_HEADER_BYTES: u32 = 40;

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            client: Endpoint::new(Ipv4Addr::new(192, 168, 1, 10), 40000),
            server: Endpoint::new(Ipv4Addr::new(10, 0, 0, 5), 5001),
            segment_bytes: 1500,
            window_bytes: 16 * 1024,
            total_bytes: 64 * 1024 * 1024,
            path: BenchPath::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Handshake,
    Data { payload: u32 },
    Ack,
    Teardown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPacket {
    pub packet: Packet,
    pub kind: SegmentKind,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.segment_bytes == 0 {
            return Err("segment_bytes must be positive".into());
        }
        if self.window_bytes < self.segment_bytes {
            return Err(format!(
                "window_bytes ({}) must be at least segment_bytes ({})",
                self.window_bytes, self.segment_bytes
            ));
        }
        Ok(())
    }

    fn to_server(&self, flags: TcpFlags, payload: u32) -> Packet {
        let p = Packet::tcp(self.client.addr, self.client.port, self.server.addr, self.server.port, flags)
            .with_size(TCP_HEADER_BYTES + payload);
        match self.path {
            BenchPath::Forward => p.with_ifaces(Some("eth0"), Some("eth1")),
            BenchPath::Input => p.with_ifaces(Some("eth0"), None).local(),
        }
    }

    fn to_client(&self, flags: TcpFlags) -> Packet {
        let p = Packet::tcp(self.server.addr, self.server.port, self.client.addr, self.client.port, flags)
            .with_size(TCP_HEADER_BYTES);
        match self.path {
            BenchPath::Forward => p.with_ifaces(Some("eth1"), Some("eth0")),
            BenchPath::Input => p.with_ifaces(None, Some("eth0")),
        }
    }
}

/// Handshake, windowed data with one ACK per segment, then a FIN exchange.
/// Data is sent while the window has room; otherwise the oldest
/// outstanding segment is acknowledged.
pub fn generate_stream(spec: &StreamSpec) -> Vec<StreamPacket> {
    let ack = TcpFlags::ACK;
    let mut out = Vec::new();
    let mut push = |packet: Packet, kind: SegmentKind| out.push(StreamPacket { packet, kind });

    push(spec.to_server(TcpFlags::SYN, 0), SegmentKind::Handshake);
    push(spec.to_client(TcpFlags::SYN | ack), SegmentKind::Handshake);
    push(spec.to_server(ack, 0), SegmentKind::Handshake);

    let mut remaining = spec.total_bytes;
    let mut in_flight: VecDeque<u32> = VecDeque::new();
    let mut unacked: u64 = 0;
    while remaining > 0 || !in_flight.is_empty() {
        let next = remaining.min(u64::from(spec.segment_bytes));
        if remaining > 0 && unacked + next <= u64::from(spec.window_bytes) {
            let payload = next as u32;
            push(spec.to_server(ack, payload), SegmentKind::Data { payload });
            in_flight.push_back(payload);
            unacked += next;
            remaining -= next;
        } else {
            let acked = in_flight.pop_front().expect("window full implies data in flight");
            unacked -= u64::from(acked);
            push(spec.to_client(ack), SegmentKind::Ack);
        }
    }

    push(spec.to_server(TcpFlags::FIN | ack, 0), SegmentKind::Teardown);
    push(spec.to_client(ack), SegmentKind::Teardown);
    push(spec.to_client(TcpFlags::FIN | ack), SegmentKind::Teardown);
    push(spec.to_server(ack, 0), SegmentKind::Teardown);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(total: u64) -> StreamSpec {
        StreamSpec { total_bytes: total, ..StreamSpec::default() }
    }

    #[test]
    fn empty_stream_is_seven_packets() {
        let s = generate_stream(&spec(0));
        assert_eq!(s.len(), 7);
        assert!(s[0].packet.tcp_flags.is_syn_only());
        assert!(s.iter().all(|p| !matches!(p.kind, SegmentKind::Data { .. })));
    }

    #[test]
    fn one_segment_one_ack() {
        let s = generate_stream(&spec(1500));
        assert_eq!(s.len(), 9);
        assert_eq!(s[3].kind, SegmentKind::Data { payload: 1500 });
        assert_eq!(s[3].packet.size_bytes, 1540);
        assert_eq!(s[4].kind, SegmentKind::Ack);
        assert_eq!(s[4].packet.src, spec(0).server.addr);
    }

    #[test]
    fn payload_total_and_short_tail() {
        let s = generate_stream(&spec(4000));
        let payloads: Vec<u32> = s
            .iter()
            .filter_map(|p| match p.kind {
                SegmentKind::Data { payload } => Some(payload),
                _ => None,
            })
            .collect();
        assert_eq!(payloads, vec![1500, 1500, 1000]);
    }

    #[test]
    fn input_path_replies_are_local_output() {
        let s = generate_stream(&StreamSpec { path: BenchPath::Input, ..spec(1500) });
        assert!(s[0].packet.dst_is_local);
        assert!(s[1].packet.in_iface.is_none());
    }

    #[test]
    fn window_validation() {
        let bad = StreamSpec { window_bytes: 100, ..StreamSpec::default() };
        assert!(bad.validate().is_err());
        assert!(StreamSpec::default().validate().is_ok());
    }
}
