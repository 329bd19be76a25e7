//! Prosumer assets: hourly generation/demand profiles, forecast noise and
//! the lossy battery model.
//!
//! All energies are in kWh and all powers in kW. The simulation runs at an
//! hourly resolution, so a power held for one step is numerically equal to
//! the energy moved in that step.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AgentId;

/// Number of hourly steps in a profile.
pub const HORIZON: usize = 24;

pub const DEFAULT_SOC_MIN: f64 = 0.05;
pub const DEFAULT_SOC_MAX: f64 = 0.95;
pub const DEFAULT_EFFICIENCY: f64 = 0.95;
pub const DEFAULT_FORECAST_ERROR: f64 = 0.3;

/// Static description of one prosumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent_id: AgentId,
    pub name: String,
    pub node_id: String,
    pub capacity_kw: f64,
    pub battery_ratio: f64,
    pub battery_capacity_kwh: f64,
    pub generation_profile: Vec<f64>,
    pub demand_profile: Vec<f64>,
}

impl AgentConfig {
    /// Builds an agent, deriving the battery size from `capacity_kw * battery_ratio`.
    pub fn new(
        agent_id: impl Into<AgentId>,
        name: impl Into<String>,
        node_id: impl Into<String>,
        capacity_kw: f64,
        battery_ratio: f64,
        generation_profile: Vec<f64>,
        demand_profile: Vec<f64>,
    ) -> Result<Self> {
        let agent_id = agent_id.into();
        if !(capacity_kw.is_finite() && capacity_kw > 0.0) {
            return Err(Error::Argument(format!(
                "agent {agent_id}: capacity_kw must be positive, got {capacity_kw}"
            )));
        }
        if !(0.0..=1.0).contains(&battery_ratio) {
            return Err(Error::Argument(format!(
                "agent {agent_id}: battery_ratio must lie in [0, 1], got {battery_ratio}"
            )));
        }
        for (label, profile) in [
            ("generation", &generation_profile),
            ("demand", &demand_profile),
        ] {
            if profile.len() != HORIZON {
                return Err(Error::Argument(format!(
                    "agent {agent_id}: {label} profile has {} values, expected {HORIZON}",
                    profile.len()
                )));
            }
            if let Some(v) = profile.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Argument(format!(
                    "agent {agent_id}: {label} profile contains invalid value {v}"
                )));
            }
        }
        Ok(AgentConfig {
            agent_id,
            name: name.into(),
            node_id: node_id.into(),
            capacity_kw,
            battery_ratio,
            battery_capacity_kwh: capacity_kw * battery_ratio,
            generation_profile,
            demand_profile,
        })
    }

    /// Deterministic `(generation_kw, demand_kw)` at hour `step`.
    pub fn realized_profile(&self, step: usize) -> Result<(f64, f64)> {
        match (
            self.generation_profile.get(step),
            self.demand_profile.get(step),
        ) {
            (Some(g), Some(d)) => Ok((*g, *d)),
            _ => Err(Error::StepOutOfRange {
                step,
                horizon: self.generation_profile.len(),
            }),
        }
    }
}

/// Profile as read from a `hour,generation_kw,demand_kw` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub generation_kw: Vec<f64>,
    pub demand_kw: Vec<f64>,
}

#[derive(Deserialize)]
struct ProfileRow {
    hour: usize,
    generation_kw: f64,
    demand_kw: f64,
}

impl Profile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(path, format!("cannot open profile: {e}")))?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::data(origin, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["hour", "generation_kw", "demand_kw"] {
            return Err(Error::data(
                origin,
                "expected header `hour,generation_kw,demand_kw`",
            ));
        }
        let mut generation_kw = vec![f64::NAN; HORIZON];
        let mut demand_kw = vec![f64::NAN; HORIZON];
        let mut rows = 0;
        for (line, row) in rdr.deserialize::<ProfileRow>().enumerate() {
            let row = row.map_err(|e| Error::data(origin, format!("row {}: {e}", line + 2)))?;
            if row.hour >= HORIZON {
                return Err(Error::data(origin, format!("hour {} out of range", row.hour)));
            }
            if !generation_kw[row.hour].is_nan() {
                return Err(Error::data(origin, format!("duplicate hour {}", row.hour)));
            }
            if row.generation_kw < 0.0 || row.demand_kw < 0.0 {
                return Err(Error::data(
                    origin,
                    format!("negative value at hour {}", row.hour),
                ));
            }
            generation_kw[row.hour] = row.generation_kw;
            demand_kw[row.hour] = row.demand_kw;
            rows += 1;
        }
        if rows != HORIZON {
            return Err(Error::data(
                origin,
                format!("expected {HORIZON} rows, found {rows}"),
            ));
        }
        Ok(Profile {
            generation_kw,
            demand_kw,
        })
    }
}

/// Battery energy content plus lifetime throughput counters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub energy_kwh: f64,
    pub capacity_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub efficiency: f64,
    pub cumulative_charge_kwh: f64,
    pub cumulative_discharge_kwh: f64,
}

impl BatteryState {
    /// A battery with default limits, initialized at the middle of its usable band.
    pub fn mid_band(capacity_kwh: f64) -> Self {
        let mut b = Self::with_energy(capacity_kwh, 0.0);
        b.energy_kwh = 0.5 * (b.min_energy() + b.max_energy());
        b
    }

    /// A battery with default limits and `energy_kwh` clamped into the usable band.
    pub fn with_energy(capacity_kwh: f64, energy_kwh: f64) -> Self {
        let mut b = BatteryState {
            energy_kwh,
            capacity_kwh,
            soc_min: DEFAULT_SOC_MIN,
            soc_max: DEFAULT_SOC_MAX,
            efficiency: DEFAULT_EFFICIENCY,
            cumulative_charge_kwh: 0.0,
            cumulative_discharge_kwh: 0.0,
        };
        b.energy_kwh = energy_kwh.clamp(b.min_energy(), b.max_energy());
        b
    }

    pub fn min_energy(&self) -> f64 {
        self.soc_min * self.capacity_kwh
    }

    pub fn max_energy(&self) -> f64 {
        self.soc_max * self.capacity_kwh
    }

    pub fn soc(&self) -> f64 {
        if self.capacity_kwh > 0.0 {
            self.energy_kwh / self.capacity_kwh
        } else {
            0.0
        }
    }

    /// Largest energy the battery can draw from the bus right now.
    pub fn max_charge_kwh(&self) -> f64 {
        ((self.max_energy() - self.energy_kwh) / self.efficiency).max(0.0)
    }

    /// Largest energy the battery can deliver to the bus right now.
    pub fn max_discharge_kwh(&self) -> f64 {
        ((self.energy_kwh - self.min_energy()) * self.efficiency).max(0.0)
    }

    /// Draws up to `request_kwh` from the bus. Returns the new state and the
    /// accepted (bus-side) energy; stored energy grows by `accepted * efficiency`.
    pub fn charge(&self, request_kwh: f64) -> Result<(BatteryState, f64)> {
        check_request(request_kwh)?;
        let limit = self.max_charge_kwh();
        let mut next = *self;
        let accepted = if request_kwh >= limit {
            next.energy_kwh = self.energy_kwh.max(self.max_energy());
            limit
        } else {
            next.energy_kwh = self.energy_kwh + request_kwh * self.efficiency;
            request_kwh
        };
        next.cumulative_charge_kwh += accepted;
        Ok((next, accepted))
    }

    /// Delivers up to `request_kwh` to the bus. Returns the new state and the
    /// delivered energy; stored energy falls by `delivered / efficiency`.
    pub fn discharge(&self, request_kwh: f64) -> Result<(BatteryState, f64)> {
        check_request(request_kwh)?;
        let limit = self.max_discharge_kwh();
        let mut next = *self;
        let delivered = if request_kwh >= limit {
            next.energy_kwh = self.energy_kwh.min(self.min_energy());
            limit
        } else {
            next.energy_kwh = self.energy_kwh - request_kwh / self.efficiency;
            request_kwh
        };
        next.cumulative_discharge_kwh += delivered;
        Ok((next, delivered))
    }
}

fn check_request(request_kwh: f64) -> Result<()> {
    if request_kwh.is_finite() && request_kwh >= 0.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "battery request must be a non-negative energy, got {request_kwh}"
        )))
    }
}

/// Energy an agent could offer or absorb in one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Flex {
    pub sellable_kwh: f64,
    pub buyable_kwh: f64,
}

impl Flex {
    pub fn total(&self) -> f64 {
        self.sellable_kwh + self.buyable_kwh
    }
}

/// Surplus plus discharge headroom on the sell side, deficit plus charge
/// acceptance on the buy side.
pub fn available_flex(battery: &BatteryState, gen_kw: f64, dem_kw: f64) -> Flex {
    Flex {
        sellable_kwh: (gen_kw - dem_kw).max(0.0) + battery.max_discharge_kwh(),
        buyable_kwh: (dem_kw - gen_kw).max(0.0) + battery.max_charge_kwh(),
    }
}

/// An actual value and the noisy forecast an agent bids on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPair {
    pub actual_kw: f64,
    pub forecast_kw: f64,
    pub max_error: f64,
}

impl ForecastPair {
    /// Applies relative error `eps` (clamped to `±max_error`) to `actual_kw`.
    pub fn with_error(actual_kw: f64, eps: f64, max_error: f64) -> Self {
        let eps = eps.clamp(-max_error, max_error);
        ForecastPair {
            actual_kw,
            forecast_kw: actual_kw * (1.0 + eps),
            max_error,
        }
    }
}

/// Multiplicative forecast noise, uniform on `[-max_error, +max_error]`.
pub fn make_forecast<R: Rng + ?Sized>(actual_kw: f64, max_error: f64, rng: &mut R) -> ForecastPair {
    let eps = if max_error > 0.0 {
        rng.random_range(-max_error..=max_error)
    } else {
        0.0
    };
    ForecastPair::with_error(actual_kw, eps, max_error)
}
