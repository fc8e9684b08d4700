//! `picofw`: a userspace firewall with netfilter-style chain semantics.
//!
//! * [`net`] - packets, addresses, flow keys and link presets
//! * [`ruleset`] - rule grammar, the ruleset image format and rule generation
//! * [`engine`] - the packet path: chain traversal, conntrack, NAT, counters
//! * [`bench`] - stream generator, native and model throughput sweeps, energy
//! * [`sync`] - policy server and edge agent speaking line-delimited JSON
//! * [`cli`] - the `fwctl` command surface

pub mod net;
pub mod engine;
pub mod ruleset;
pub mod bench;
pub mod sync;
pub mod cli;
