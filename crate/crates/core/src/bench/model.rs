use serde::{Deserialize, Serialize};

use super::BenchError;

/// Per-packet cost model of a device: a fixed cost plus a cost per rule
/// scanned, both in inverse Mbps. `cpu_mhz` is informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub cpu_mhz: f64,
    pub base_cost: f64,
    pub per_rule_cost: f64,
    pub power_watts: f64,
}

/// Power draw assumed for the Cubieboard. No measured figure is available,
/// so it reuses the Raspberry Pi rating.
pub const CUBIEBOARD_POWER_WATTS: f64 = 3.5;

impl PlatformProfile {
    pub fn validate(&self) -> Result<(), BenchError> {
        let positive = |what: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(BenchError::Calibration(format!("{what} must be positive, got {v}")))
            }
        };
        positive("base_cost", self.base_cost)?;
        positive("per_rule_cost", self.per_rule_cost)?;
        positive("power_watts", self.power_watts)
    }

    /// Raspberry Pi Model B: 58 Mbps with no rules, 20 Mbps at 800.
    pub fn rpi() -> PlatformProfile {
        calibrate_profile("rpi", 700.0, 58.0, 20.0, 800, 3.5).expect("preset inputs are valid")
    }

    /// Cubieboard: 54 Mbps with no rules, 30 Mbps at 800.
    pub fn cubieboard() -> PlatformProfile {
        calibrate_profile("cubieboard", 1000.0, 54.0, 30.0, 800, CUBIEBOARD_POWER_WATTS)
            .expect("preset inputs are valid")
    }

    pub fn preset(name: &str) -> Option<PlatformProfile> {
        match name.to_ascii_lowercase().as_str() {
            "rpi" | "raspberrypi" | "raspberry-pi" => Some(PlatformProfile::rpi()),
            "cubieboard" | "cubie" => Some(PlatformProfile::cubieboard()),
            _ => None,
        }
    }

    /// Rule count where this curve meets `other`, if the two intersect at
    /// a non-negative rule count.
    pub fn crossover(&self, other: &PlatformProfile) -> Option<f64> {
        let db = self.per_rule_cost - other.per_rule_cost;
        if db == 0.0 {
            return None;
        }
        let n = (other.base_cost - self.base_cost) / db;
        (n >= 0.0).then_some(n)
    }
}

/// Fits `T(r) = 1 / (base + per_rule * r)` through `(0, t0)` and `(n, tn)`.
pub fn calibrate_profile(
    name: &str,
    cpu_mhz: f64,
    t0_mbps: f64,
    tn_mbps: f64,
    n: u64,
    power_watts: f64,
) -> Result<PlatformProfile, BenchError> {
    if !(tn_mbps > 0.0 && tn_mbps.is_finite() && t0_mbps.is_finite()) {
        return Err(BenchError::Calibration(format!("throughputs must be positive, got {t0_mbps} and {tn_mbps}")));
    }
    if t0_mbps <= tn_mbps {
        return Err(BenchError::Calibration(format!(
            "throughput must decrease with rules: t0={t0_mbps} tn={tn_mbps}"
        )));
    }
    if n == 0 {
        return Err(BenchError::Calibration("rule count must be positive".into()));
    }
    if cpu_mhz.is_nan() || cpu_mhz <= 0.0 {
        return Err(BenchError::Calibration(format!("cpu_mhz must be positive, got {cpu_mhz}")));
    }
    let base_cost = 1.0 / t0_mbps;
    let per_rule_cost = (1.0 / tn_mbps - base_cost) / n as f64;
    let profile = PlatformProfile { name: name.to_string(), cpu_mhz, base_cost, per_rule_cost, power_watts };
    profile.validate()?;
    Ok(profile)
}

pub fn model_throughput(profile: &PlatformProfile, n_rules: u64) -> f64 {
    1.0 / (profile.base_cost + profile.per_rule_cost * n_rules as f64)
}
