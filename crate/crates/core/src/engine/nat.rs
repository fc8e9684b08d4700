use std::collections::HashSet;
use std::net::Ipv4Addr;

use crate::net::{Endpoint, Proto};

/// Source endpoints handed out by SNAT and MASQUERADE. An (addr, port) pair
/// is held by at most one live connection per protocol.
#[derive(Debug, Clone)]
pub struct PortPool {
    pub external_addr: Ipv4Addr,
    pub lo: u16,
    pub hi: u16,
    in_use: HashSet<(Proto, Endpoint)>,
}

impl PortPool {
    pub fn new(external_addr: Ipv4Addr, lo: u16, hi: u16) -> Self {
        assert!(lo <= hi, "empty NAT port range");
        PortPool { external_addr, lo, hi, in_use: HashSet::new() }
    }

    pub fn is_free(&self, proto: Proto, ep: Endpoint) -> bool {
        !self.in_use.contains(&(proto, ep))
    }

    /// Keeps `preferred` if free, otherwise takes the lowest free port in
    /// the pool range. ICMP has no ports to multiplex on and always gets
    /// port 0 without reservation.
    pub fn allocate(&mut self, proto: Proto, addr: Ipv4Addr, preferred: u16) -> Option<u16> {
        if !proto.has_ports() {
            return Some(0);
        }
        let port = if self.is_free(proto, Endpoint::new(addr, preferred)) {
            preferred
        } else {
            (self.lo..=self.hi).find(|p| self.is_free(proto, Endpoint::new(addr, *p)))?
        };
        self.in_use.insert((proto, Endpoint::new(addr, port)));
        Some(port)
    }

    pub fn release(&mut self, proto: Proto, ep: Endpoint) {
        self.in_use.remove(&(proto, ep));
    }

    pub fn in_use(&self) -> usize {
        self.in_use.len()
    }
}
