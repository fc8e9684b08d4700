//! Packet, address and flow types shared by the rest of the crate.
//!
//! Packets are semantic records rather than byte buffers: there is no
//! checksum, TTL, fragmentation or options handling anywhere in the crate.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrParseError {
    #[error("malformed octet `{0}`")]
    Octet(String),
    #[error("expected 4 octets in `{0}`")]
    OctetCount(String),
    #[error("prefix length `{0}` out of range 0..=32")]
    Prefix(String),
    #[error("malformed port `{0}`")]
    Port(String),
}

/// Parses a strict dotted quad: four decimal octets, no leading `+`, no
/// surrounding whitespace.
pub fn parse_ipv4(text: &str) -> Result<Ipv4Addr, AddrParseError> {
    let mut octets = [0u8; 4];
    let mut n = 0;
    for part in text.split('.') {
        if n == 4 {
            return Err(AddrParseError::OctetCount(text.to_string()));
        }
        if part.is_empty() || part.len() > 3 || !part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(AddrParseError::Octet(part.to_string()));
        }
        octets[n] = part
            .parse::<u8>()
            .map_err(|_| AddrParseError::Octet(part.to_string()))?;
        n += 1;
    }
    if n != 4 {
        return Err(AddrParseError::OctetCount(text.to_string()));
    }
    Ok(Ipv4Addr::from(octets))
}

/// An IPv4 prefix. The stored base never has host bits set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CidrBlock {
    base: Ipv4Addr,
    prefix_len: u8,
}

fn prefix_mask(prefix_len: u8) -> u32 {
    if prefix_len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(prefix_len))
    }
}

impl CidrBlock {
    /// Builds a block, clearing any host bits in `addr`. Panics if
    /// `prefix_len > 32`.
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Self {
        assert!(prefix_len <= 32, "prefix length {prefix_len} > 32");
        let base = Ipv4Addr::from(u32::from(addr) & prefix_mask(prefix_len));
        CidrBlock { base, prefix_len }
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        CidrBlock::new(addr, 32)
    }

    pub fn any() -> Self {
        CidrBlock::new(Ipv4Addr::UNSPECIFIED, 0)
    }

    pub fn base(&self) -> Ipv4Addr {
        self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & prefix_mask(self.prefix_len) == u32::from(self.base)
    }
}

/// `A.B.C.D` or `A.B.C.D/L`; a bare address is a /32.
pub fn parse_cidr(text: &str) -> Result<CidrBlock, AddrParseError> {
    let (addr, prefix) = match text.split_once('/') {
        Some((a, p)) => {
            if p.is_empty() || p.len() > 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(AddrParseError::Prefix(p.to_string()));
            }
            let len: u8 = p.parse().map_err(|_| AddrParseError::Prefix(p.to_string()))?;
            if len > 32 {
                return Err(AddrParseError::Prefix(p.to_string()));
            }
            (a, len)
        }
        None => (text, 32),
    };
    Ok(CidrBlock::new(parse_ipv4(addr)?, prefix))
}

pub fn cidr_contains(block: &CidrBlock, addr: Ipv4Addr) -> bool {
    block.contains(addr)
}

impl FromStr for CidrBlock {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_cidr(s)
    }
}

impl fmt::Display for CidrBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
}

impl Proto {
    pub const ALL: [Proto; 3] = [Proto::Tcp, Proto::Udp, Proto::Icmp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Icmp => "icmp",
        }
    }

    /// Smallest legal `size_bytes` for a packet of this protocol.
    pub fn header_floor(&self) -> u32 {
        match self {
            Proto::Tcp => 40,
            Proto::Udp | Proto::Icmp => 28,
        }
    }

    pub fn has_ports(&self) -> bool {
        matches!(self, Proto::Tcp | Proto::Udp)
    }
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Proto {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Proto::Tcp),
            "udp" => Ok(Proto::Udp),
            "icmp" => Ok(Proto::Icmp),
            other => Err(other.to_string()),
        }
    }
}

/// Subset of {SYN, ACK, FIN, RST}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const NONE: TcpFlags = TcpFlags(0);
    pub const SYN: TcpFlags = TcpFlags(1);
    pub const ACK: TcpFlags = TcpFlags(2);
    pub const FIN: TcpFlags = TcpFlags(4);
    pub const RST: TcpFlags = TcpFlags(8);

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn from_bits(bits: u8) -> TcpFlags {
        TcpFlags(bits & 0x0f)
    }

    pub const fn union(self, other: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | other.0)
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// SYN without ACK: the opening segment of a connection.
    pub const fn is_syn_only(self) -> bool {
        self.contains(TcpFlags::SYN) && !self.contains(TcpFlags::ACK)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        self.union(rhs)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (TcpFlags::SYN, "syn"),
            (TcpFlags::ACK, "ack"),
            (TcpFlags::FIN, "fin"),
            (TcpFlags::RST, "rst"),
        ];
        let mut first = true;
        for (flag, name) in names {
            if self.contains(flag) {
                if !first {
                    f.write_str(",")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

/// Interface name. Cheap to clone since packets are copied along the path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Iface(Arc<str>);

impl Iface {
    pub fn new(name: &str) -> Self {
        Iface(Arc::from(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Iface {
    fn from(s: &str) -> Self {
        Iface::new(s)
    }
}

impl fmt::Display for Iface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("{proto} packet carries tcp flags")]
    FlagsOnNonTcp { proto: Proto },
    #[error("size {size} below the {floor}-byte {proto} header floor")]
    TooSmall { proto: Proto, size: u32, floor: u32 },
    #[error("icmp packet with non-zero ports")]
    IcmpPorts,
    #[error("packet literal: {0}")]
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Packet {
    pub proto: Proto,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub sport: u16,
    pub dport: u16,
    pub tcp_flags: TcpFlags,
    pub size_bytes: u32,
    pub in_iface: Option<Iface>,
    pub out_iface: Option<Iface>,
    /// Stands in for the routing decision: true when the packet is
    /// addressed to this host.
    pub dst_is_local: bool,
}

/// Size used when a caller does not specify one (a full Ethernet MTU).
pub const DEFAULT_PACKET_SIZE: u32 = 1500;

impl Packet {
    /// A forwarded packet entering on `eth0` and leaving on `eth1`.
    pub fn new(proto: Proto, src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16) -> Packet {
        let (sport, dport) = if proto == Proto::Icmp { (0, 0) } else { (sport, dport) };
        Packet {
            proto,
            src,
            dst,
            sport,
            dport,
            tcp_flags: TcpFlags::NONE,
            size_bytes: DEFAULT_PACKET_SIZE,
            in_iface: Some(Iface::new("eth0")),
            out_iface: Some(Iface::new("eth1")),
            dst_is_local: false,
        }
    }

    pub fn tcp(src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16, flags: TcpFlags) -> Packet {
        Packet::new(Proto::Tcp, src, sport, dst, dport).with_flags(flags)
    }

    pub fn udp(src: Ipv4Addr, sport: u16, dst: Ipv4Addr, dport: u16) -> Packet {
        Packet::new(Proto::Udp, src, sport, dst, dport)
    }

    pub fn icmp(src: Ipv4Addr, dst: Ipv4Addr) -> Packet {
        Packet::new(Proto::Icmp, src, 0, dst, 0)
    }

    pub fn with_flags(mut self, flags: TcpFlags) -> Packet {
        self.tcp_flags = flags;
        self
    }

    pub fn with_size(mut self, size: u32) -> Packet {
        self.size_bytes = size;
        self
    }

    pub fn with_ifaces(mut self, in_iface: Option<&str>, out_iface: Option<&str>) -> Packet {
        self.in_iface = in_iface.map(Iface::new);
        self.out_iface = out_iface.map(Iface::new);
        self
    }

    /// Inbound packet addressed to this host.
    pub fn local(mut self) -> Packet {
        self.dst_is_local = true;
        self.out_iface = None;
        self
    }

    /// Locally generated packet.
    pub fn outbound(mut self) -> Packet {
        self.in_iface = None;
        self.dst_is_local = false;
        if self.out_iface.is_none() {
            self.out_iface = Some(Iface::new("eth0"));
        }
        self
    }

    pub fn validate(&self) -> Result<(), PacketError> {
        if self.proto != Proto::Tcp && !self.tcp_flags.is_empty() {
            return Err(PacketError::FlagsOnNonTcp { proto: self.proto });
        }
        let floor = self.proto.header_floor();
        if self.size_bytes < floor {
            return Err(PacketError::TooSmall { proto: self.proto, size: self.size_bytes, floor });
        }
        if self.proto == Proto::Icmp && (self.sport != 0 || self.dport != 0) {
            return Err(PacketError::IcmpPorts);
        }
        Ok(())
    }

    pub fn src_endpoint(&self) -> Endpoint {
        Endpoint::new(self.src, self.sport)
    }

    pub fn dst_endpoint(&self) -> Endpoint {
        Endpoint::new(self.dst, self.dport)
    }

    /// Swaps addresses, ports and interfaces. Flags, size and locality are
    /// left untouched.
    pub fn reversed(&self) -> Packet {
        Packet {
            src: self.dst,
            dst: self.src,
            sport: self.dport,
            dport: self.sport,
            in_iface: self.out_iface.clone(),
            out_iface: self.in_iface.clone(),
            ..self.clone()
        }
    }

    pub fn flow_key(&self) -> FlowKey {
        FlowKey::new(self.proto, self.src_endpoint(), self.dst_endpoint())
    }

    /// Parses the terse literal used by the CLI and FFI:
    /// `<proto> <src>[:<sport>] > <dst>[:<dport>] [syn|ack|fin|rst]* [fwd|local|out]`
    /// plus optional `len=<bytes>`, `iif=<name>`, `oif=<name>` tokens.
    pub fn from_literal(text: &str) -> Result<Packet, PacketError> {
        let bad = |m: String| PacketError::Literal(m);
        let mut toks = text.split_whitespace();
        let proto: Proto = toks
            .next()
            .ok_or_else(|| bad("empty literal".into()))?
            .parse()
            .map_err(|p| bad(format!("unknown protocol `{p}`")))?;
        let src = toks.next().ok_or_else(|| bad("missing source".into()))?;
        if toks.next() != Some(">") {
            return Err(bad("expected `>` between source and destination".into()));
        }
        let dst = toks.next().ok_or_else(|| bad("missing destination".into()))?;
        let endpoint = |s: &str| -> Result<Endpoint, PacketError> {
            let (a, p) = match s.split_once(':') {
                Some((a, p)) => {
                    let port = p.parse::<u16>().map_err(|_| bad(format!("malformed port `{p}`")))?;
                    (a, port)
                }
                None => (s, 0),
            };
            Ok(Endpoint::new(parse_ipv4(a).map_err(|e| bad(e.to_string()))?, p))
        };
        let src = endpoint(src)?;
        let dst = endpoint(dst)?;
        let mut pkt = Packet::new(proto, src.addr, src.port, dst.addr, dst.port);
        if proto == Proto::Icmp && (src.port != 0 || dst.port != 0) {
            return Err(PacketError::IcmpPorts);
        }
        let mut iif: Option<Option<String>> = None;
        let mut oif: Option<Option<String>> = None;
        for tok in toks {
            match tok {
                "syn" => pkt.tcp_flags = pkt.tcp_flags | TcpFlags::SYN,
                "ack" => pkt.tcp_flags = pkt.tcp_flags | TcpFlags::ACK,
                "fin" => pkt.tcp_flags = pkt.tcp_flags | TcpFlags::FIN,
                "rst" => pkt.tcp_flags = pkt.tcp_flags | TcpFlags::RST,
                "fwd" => {}
                "local" => pkt = pkt.local(),
                "out" => pkt = pkt.outbound(),
                t => {
                    if let Some(n) = t.strip_prefix("len=") {
                        pkt.size_bytes = n.parse().map_err(|_| bad(format!("malformed length `{n}`")))?;
                    } else if let Some(n) = t.strip_prefix("iif=") {
                        iif = Some(if n == "-" { None } else { Some(n.to_string()) });
                    } else if let Some(n) = t.strip_prefix("oif=") {
                        oif = Some(if n == "-" { None } else { Some(n.to_string()) });
                    } else {
                        return Err(bad(format!("unknown token `{t}`")));
                    }
                }
            }
        }
        if let Some(i) = iif {
            pkt.in_iface = i.as_deref().map(Iface::new);
        }
        if let Some(o) = oif {
            pkt.out_iface = o.as_deref().map(Iface::new);
        }
        pkt.validate()?;
        Ok(pkt)
    }
}

impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}:{} > {}:{}", self.proto, self.src, self.sport, self.dst, self.dport)?;
        if !self.tcp_flags.is_empty() {
            write!(f, " [{}]", self.tcp_flags)?;
        }
        write!(f, " len={}", self.size_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub addr: Ipv4Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(addr: Ipv4Addr, port: u16) -> Self {
        Endpoint { addr, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.addr, self.port)
    }
}

/// Direction-independent connection identifier: endpoints are stored in
/// ascending order so a packet and its reply yield the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub proto: Proto,
    pub endpoint_lo: Endpoint,
    pub endpoint_hi: Endpoint,
}

impl FlowKey {
    pub fn new(proto: Proto, a: Endpoint, b: Endpoint) -> Self {
        let (endpoint_lo, endpoint_hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey { proto, endpoint_lo, endpoint_hi }
    }
}

pub fn flow_key(p: &Packet) -> FlowKey {
    p.flow_key()
}

/// Net bandwidth of the alternative access networks a device might sit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkPreset {
    ZigBee,
    Satellite,
    WirelessMesh,
    LongDistanceWiFi,
    WiMax,
}

impl LinkPreset {
    pub const ALL: [LinkPreset; 5] = [
        LinkPreset::ZigBee,
        LinkPreset::Satellite,
        LinkPreset::WirelessMesh,
        LinkPreset::LongDistanceWiFi,
        LinkPreset::WiMax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LinkPreset::ZigBee => "ZigBee",
            LinkPreset::Satellite => "Satellite",
            LinkPreset::WirelessMesh => "WirelessMesh",
            LinkPreset::LongDistanceWiFi => "LongDistanceWiFi",
            LinkPreset::WiMax => "WiMAX",
        }
    }

    pub fn net_bandwidth_mbps(&self) -> f64 {
        match self {
            LinkPreset::ZigBee => 0.060,
            LinkPreset::Satellite => 1.0,
            LinkPreset::WirelessMesh => 2.5,
            LinkPreset::LongDistanceWiFi => 5.0,
            LinkPreset::WiMax => 6.0,
        }
    }

    /// The bandwidth as conventionally tabulated (`0.060`, `1`, `2.5`, ...).
    pub fn bandwidth_text(&self) -> &'static str {
        match self {
            LinkPreset::ZigBee => "0.060",
            LinkPreset::Satellite => "1",
            LinkPreset::WirelessMesh => "2.5",
            LinkPreset::LongDistanceWiFi => "5",
            LinkPreset::WiMax => "6",
        }
    }
}
