use serde::{Deserialize, Serialize};

use super::BenchError;

/// Running cost of a device drawing constant power around the clock.
/// Money fields are unrounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub watts: f64,
    pub tariff_per_kwh: f64,
    pub daily_kwh: f64,
    pub daily_cost: f64,
    pub annual_cost: f64,
}

impl EnergyEstimate {
    /// Energy per day in watt-hours.
    pub fn daily_wh(&self) -> f64 {
        self.daily_kwh * 1000.0
    }
}

pub fn estimate_energy(watts: f64, tariff_per_kwh: f64) -> Result<EnergyEstimate, BenchError> {
    if !(watts.is_finite() && watts > 0.0) {
        return Err(BenchError::Energy(format!("watts must be positive, got {watts}")));
    }
    if !(tariff_per_kwh.is_finite() && tariff_per_kwh >= 0.0) {
        return Err(BenchError::Energy(format!("tariff must be non-negative, got {tariff_per_kwh}")));
    }
    let daily_kwh = watts * 24.0 / 1000.0;
    let daily_cost = daily_kwh * tariff_per_kwh;
    Ok(EnergyEstimate { watts, tariff_per_kwh, daily_kwh, daily_cost, annual_cost: daily_cost * 365.0 })
}
