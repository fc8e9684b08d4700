//! Connection tracking state machine.
//!
//! TCP: SYN (no ACK) opens an entry in `SynSent`; the reply's SYN+ACK moves
//! it to `Established`; FIN moves it to `Closing`; RST to `Closed`. UDP and
//! ICMP flows get an `Established` entry on their first accepted packet.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::net::{Endpoint, FlowKey, Packet, Proto, TcpFlags};
use crate::ruleset::ConnState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcpState {
    SynSent,
    Established,
    Closing,
    Closed,
}

/// Which way a packet travels relative to the connection's initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Original,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tuple {
    pub src: Endpoint,
    pub dst: Endpoint,
}

impl Tuple {
    pub fn of(p: &Packet) -> Tuple {
        Tuple { src: p.src_endpoint(), dst: p.dst_endpoint() }
    }

    pub fn reversed(&self) -> Tuple {
        Tuple { src: self.dst, dst: self.src }
    }
}

/// Address rewrite fixed when a connection's first packet crossed the nat
/// chains. `original` is what the initiator sent; `translated` is what left
/// the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NatRewrite {
    pub original: Tuple,
    pub translated: Tuple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnEntry {
    pub key: FlowKey,
    pub state: TcpState,
    pub initiator: Endpoint,
    pub nat_rewrite: Option<NatRewrite>,
    pub created: Duration,
    pub last_seen: Duration,
}

impl ConnEntry {
    pub fn direction_of(&self, p: &Packet) -> Direction {
        match &self.nat_rewrite {
            Some(n) if Tuple::of(p) == n.original => Direction::Original,
            Some(_) => Direction::Reply,
            None if p.src_endpoint() == self.initiator => Direction::Original,
            None => Direction::Reply,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub established: Duration,
    pub syn_sent: Duration,
    pub closing: Duration,
    pub datagram: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            established: Duration::from_secs(300),
            syn_sent: Duration::from_secs(30),
            closing: Duration::from_secs(10),
            datagram: Duration::from_secs(30),
        }
    }
}

impl Timeouts {
    pub fn for_entry(&self, e: &ConnEntry) -> Duration {
        if e.key.proto != Proto::Tcp {
            return self.datagram;
        }
        match e.state {
            TcpState::Established => self.established,
            TcpState::SynSent => self.syn_sent,
            TcpState::Closing | TcpState::Closed => self.closing,
        }
    }
}

/// Classifies `p` given the entry (if any) its flow maps to.
pub fn classify(entry: Option<(&ConnEntry, Direction)>, p: &Packet) -> ConnState {
    let flags = p.tcp_flags;
    match entry {
        None => {
            if p.proto != Proto::Tcp || flags.is_syn_only() {
                ConnState::New
            } else {
                ConnState::Invalid
            }
        }
        Some((e, dir)) => {
            if p.proto != Proto::Tcp {
                return ConnState::Established;
            }
            match e.state {
                TcpState::Established | TcpState::Closing => ConnState::Established,
                TcpState::SynSent => match dir {
                    Direction::Reply if flags.contains(TcpFlags::SYN.union(TcpFlags::ACK)) => {
                        ConnState::Established
                    }
                    Direction::Original if flags.is_syn_only() => ConnState::New,
                    _ => ConnState::Invalid,
                },
                TcpState::Closed => {
                    if flags.is_syn_only() {
                        ConnState::New
                    } else {
                        ConnState::Invalid
                    }
                }
            }
        }
    }
}

/// Whether an accepted packet with no entry opens one.
pub fn opens_entry(p: &Packet) -> bool {
    p.proto != Proto::Tcp || p.tcp_flags.is_syn_only()
}

pub fn initial_state(p: &Packet) -> TcpState {
    if p.proto == Proto::Tcp {
        TcpState::SynSent
    } else {
        TcpState::Established
    }
}

/// TCP transition for an accepted packet on an existing entry.
pub fn next_state(state: TcpState, dir: Direction, flags: TcpFlags) -> TcpState {
    if flags.contains(TcpFlags::RST) {
        return TcpState::Closed;
    }
    match state {
        TcpState::SynSent
            if dir == Direction::Reply && flags.contains(TcpFlags::SYN.union(TcpFlags::ACK)) =>
        {
            TcpState::Established
        }
        TcpState::Established if flags.contains(TcpFlags::FIN) => TcpState::Closing,
        s => s,
    }
}
