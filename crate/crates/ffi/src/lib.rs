//! C ABI over `picofw`. Rulesets and engines are opaque handles owned by
//! the caller and released with their `_free` function. Fallible calls
//! return an `FwStatus`; the message of the last failure on the calling
//! thread is available from `fw_last_error`. Strings returned through out
//! parameters must be released with `fw_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use picofw::bench::{estimate_energy, model_throughput, PlatformProfile};
use picofw::engine::{Engine, Outcome};
use picofw::net::Packet;
use picofw::ruleset::{parse_rule, parse_ruleset, serialize_ruleset, Ruleset, RulesetError};

/// Opaque ruleset handle.
pub struct FwRuleset(Ruleset);

/// Opaque engine handle. Not safe for concurrent use from several threads.
pub struct FwEngine(Engine);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    IntegrityError = 4,
    ValidationError = 5,
    PacketError = 6,
    InvalidArgument = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwOutcome {
    DeliveredLocal = 0,
    Forwarded = 1,
    Dropped = 2,
    Rejected = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FwVerdict {
    pub outcome: FwOutcome,
    pub rules_traversed: u64,
    /// Number of events (LOG, REJECT notification, NAT) emitted.
    pub event_count: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwEnergy {
    pub watts: f64,
    pub tariff_per_kwh: f64,
    pub daily_kwh: f64,
    pub daily_cost: f64,
    pub annual_cost: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(FwStatus, String);

impl From<RulesetError> for Failure {
    fn from(e: RulesetError) -> Self {
        let status = match &e {
            e if e.is_integrity() => FwStatus::IntegrityError,
            RulesetError::Validation(_) => FwStatus::ValidationError,
            _ => FwStatus::ParseError,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FwStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FwStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(FwStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FwStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> Failure {
    Failure(FwStatus::NullArgument, format!("{what} is null"))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure(FwStatus::InvalidArgument, "string contains NUL".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// An empty ruleset: five built-in chains, all ACCEPT, version 0.
#[no_mangle]
pub extern "C" fn fw_ruleset_new() -> *mut FwRuleset {
    Box::into_raw(Box::new(FwRuleset(Ruleset::new())))
}

/// Parses and validates an image.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_parse(text: *const c_char, out: *mut *mut FwRuleset) -> FwStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let rs = parse_ruleset(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(FwRuleset(rs)));
        Ok(())
    })
}

/// Canonical image text, checksum line included.
///
/// # Safety
/// `rs` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_serialize(rs: *const FwRuleset, out: *mut *mut c_char) -> FwStatus {
    guard(|| {
        let rs = rs.as_ref().ok_or_else(|| null("ruleset"))?;
        out_string(out, serialize_ruleset(&rs.0))
    })
}

/// Appends a `-A CHAIN ...` line. On failure the ruleset is unchanged.
///
/// # Safety
/// `rs` must be a live handle; `line` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_append(rs: *mut FwRuleset, line: *const c_char) -> FwStatus {
    guard(|| {
        let rs = rs.as_mut().ok_or_else(|| null("ruleset"))?;
        let parsed = parse_rule(str_arg(line, "line")?).map_err(|e| Failure(FwStatus::ParseError, e.to_string()))?;
        rs.0 = rs.0.append_rule(&parsed.chain, parsed.rule)?;
        Ok(())
    })
}

/// # Safety
/// `rs` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_version(rs: *const FwRuleset) -> u64 {
    rs.as_ref().map_or(0, |r| r.0.version())
}

/// # Safety
/// `rs` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_rule_count(rs: *const FwRuleset) -> usize {
    rs.as_ref().map_or(0, |r| r.0.rule_count())
}

/// # Safety
/// `rs` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fw_ruleset_free(rs: *mut FwRuleset) {
    if !rs.is_null() {
        drop(Box::from_raw(rs));
    }
}

/// Creates an engine running a copy of `rs`.
///
/// # Safety
/// `rs` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fw_engine_new(rs: *const FwRuleset, out: *mut *mut FwEngine) -> FwStatus {
    guard(|| {
        let rs = rs.as_ref().ok_or_else(|| null("ruleset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let engine = Engine::new(rs.0.clone()).map_err(RulesetError::from)?;
        *out = Box::into_raw(Box::new(FwEngine(engine)));
        Ok(())
    })
}

/// Installs a copy of `rs`; connections survive, counters restart.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn fw_engine_swap(engine: *mut FwEngine, rs: *const FwRuleset) -> FwStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let rs = rs.as_ref().ok_or_else(|| null("ruleset"))?;
        engine.0.swap_ruleset(rs.0.clone()).map_err(RulesetError::from)?;
        Ok(())
    })
}

/// Processes one packet given as a literal such as
/// `tcp 10.0.0.1:1234 > 10.0.0.2:80 syn fwd`.
///
/// # Safety
/// `engine` must be live; `packet` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fw_engine_eval(engine: *mut FwEngine, packet: *const c_char, out: *mut FwVerdict) -> FwStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = Packet::from_literal(str_arg(packet, "packet")?)
            .map_err(|e| Failure(FwStatus::PacketError, e.to_string()))?;
        let d = engine.0.process_packet(&p);
        let outcome = match d.outcome {
            Outcome::DeliveredLocal => FwOutcome::DeliveredLocal,
            Outcome::Forwarded => FwOutcome::Forwarded,
            Outcome::Dropped => FwOutcome::Dropped,
            Outcome::Rejected => FwOutcome::Rejected,
        };
        *out = FwVerdict { outcome, rules_traversed: d.rules_traversed, event_count: d.events.len() as u32 };
        Ok(())
    })
}

/// Counter snapshot as JSON.
///
/// # Safety
/// `engine` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fw_engine_stats_json(engine: *const FwEngine, out: *mut *mut c_char) -> FwStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let json = serde_json::to_string(&engine.0.snapshot_counters())
            .map_err(|e| Failure(FwStatus::InvalidArgument, e.to_string()))?;
        out_string(out, json)
    })
}

/// # Safety
/// `engine` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fw_engine_free(engine: *mut FwEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Modelled throughput in Mbps of a named platform (`rpi`, `cubieboard`)
/// at `n_rules`. Returns a negative value for an unknown platform.
///
/// # Safety
/// `platform` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fw_model_throughput(platform: *const c_char, n_rules: u64) -> f64 {
    let mut result = -1.0;
    let status = guard(|| {
        let name = str_arg(platform, "platform")?;
        let p = PlatformProfile::preset(name)
            .ok_or_else(|| Failure(FwStatus::InvalidArgument, format!("unknown platform `{name}`")))?;
        result = model_throughput(&p, n_rules);
        Ok(())
    });
    if status == FwStatus::Ok {
        result
    } else {
        -1.0
    }
}

/// Running cost at constant `watts` and a price per kWh.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fw_energy(watts: f64, tariff_per_kwh: f64, out: *mut FwEnergy) -> FwStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let e = estimate_energy(watts, tariff_per_kwh).map_err(|e| Failure(FwStatus::InvalidArgument, e.to_string()))?;
        *out = FwEnergy {
            watts: e.watts,
            tariff_per_kwh: e.tariff_per_kwh,
            daily_kwh: e.daily_kwh,
            daily_cost: e.daily_cost,
            annual_cost: e.annual_cost,
        };
        Ok(())
    })
}
