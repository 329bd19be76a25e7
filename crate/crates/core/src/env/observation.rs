//! The 42-entry observation vector: 16 public market signals, 16 private
//! agent signals and 10 broadcast KPIs.
//!
//! Normalization used for each entry:
//!
//! * volumes and grid balance: divided by grid capacity
//! * prices: divided by the price cap
//! * agent energies: divided by the agent's rated capacity (per-step values)
//!   or by `capacity × max_steps` (cumulative counters)
//! * battery throughput: divided by `battery capacity × max_steps`
//! * social welfare: divided by `price cap × grid capacity`
//! * market liquidity: cumulative traded volume over `grid capacity × steps elapsed`

use serde::{Deserialize, Serialize};

pub const MARKET_DIM: usize = 16;
pub const AGENT_DIM: usize = 16;
pub const KPI_DIM: usize = 10;
pub const OBS_DIM: usize = MARKET_DIM + AGENT_DIM + KPI_DIM;

pub const MARKET_OFFSET: usize = 0;
pub const AGENT_OFFSET: usize = MARKET_DIM;
pub const KPI_OFFSET: usize = MARKET_DIM + AGENT_DIM;

pub const FIELD_NAMES: [&str; OBS_DIM] = [
    "current_step",
    "time_of_day",
    "clearing_price",
    "clearing_volume",
    "grid_balance",
    "dso_buy_volume",
    "dso_sell_volume",
    "dso_total_volume",
    "p2p_volume",
    "dso_trade_ratio",
    "net_grid_import",
    "dso_buy_price",
    "dso_sell_price",
    "mean_local_price",
    "price_spread",
    "local_price_advantage",
    "energy_generation",
    "energy_demand",
    "cumulative_demand_satisfied",
    "cumulative_demand_deferred",
    "remaining_demand",
    "cumulative_supply_satisfied",
    "cumulative_supply_deferred",
    "remaining_supply",
    "mean_profit",
    "reputation",
    "battery_energy_level",
    "battery_soc",
    "battery_available_charge",
    "battery_available_discharge",
    "battery_cumulative_charge",
    "battery_cumulative_discharge",
    "social_welfare",
    "market_liquidity",
    "bid_ask_spread",
    "price_volatility",
    "supply_demand_imbalance",
    "grid_congestion",
    "coordination_score",
    "coordination_convergence",
    "self_consumption",
    "flexibility_utilization",
];

/// Named offsets for entries policies read directly.
pub mod idx {
    use super::{AGENT_OFFSET, KPI_OFFSET};

    pub const CURRENT_STEP: usize = 0;
    pub const CLEARING_PRICE: usize = 2;
    pub const DSO_BUY_VOLUME: usize = 5;
    pub const DSO_SELL_VOLUME: usize = 6;
    pub const P2P_VOLUME: usize = 8;
    pub const DSO_TRADE_RATIO: usize = 9;
    pub const DSO_BUY_PRICE: usize = 11;
    pub const DSO_SELL_PRICE: usize = 12;
    pub const GENERATION: usize = AGENT_OFFSET;
    pub const DEMAND: usize = AGENT_OFFSET + 1;
    pub const REMAINING_DEMAND: usize = AGENT_OFFSET + 4;
    pub const REMAINING_SUPPLY: usize = AGENT_OFFSET + 7;
    pub const REPUTATION: usize = AGENT_OFFSET + 9;
    pub const BATTERY_LEVEL: usize = AGENT_OFFSET + 10;
    pub const BATTERY_SOC: usize = AGENT_OFFSET + 11;
    pub const BATTERY_CHARGE: usize = AGENT_OFFSET + 12;
    pub const BATTERY_DISCHARGE: usize = AGENT_OFFSET + 13;
    pub const IMBALANCE: usize = KPI_OFFSET + 4;
    pub const COORDINATION_SCORE: usize = KPI_OFFSET + 6;
}

/// Fixed-length observation for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(#[serde(with = "obs_serde")] pub [f64; OBS_DIM]);

mod obs_serde {
    use super::OBS_DIM;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; OBS_DIM], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; OBS_DIM], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"42 values"))
    }
}

impl Observation {
    pub fn assemble(
        market: &[f64; MARKET_DIM],
        agent: &[f64; AGENT_DIM],
        kpis: &[f64; KPI_DIM],
    ) -> Self {
        let mut v = [0.0; OBS_DIM];
        v[MARKET_OFFSET..AGENT_OFFSET].copy_from_slice(market);
        v[AGENT_OFFSET..KPI_OFFSET].copy_from_slice(agent);
        v[KPI_OFFSET..].copy_from_slice(kpis);
        Observation(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn market(&self) -> &[f64] {
        &self.0[MARKET_OFFSET..AGENT_OFFSET]
    }

    pub fn agent(&self) -> &[f64] {
        &self.0[AGENT_OFFSET..KPI_OFFSET]
    }

    pub fn kpis(&self) -> &[f64] {
        &self.0[KPI_OFFSET..]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Box-space description for external trainers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceSpec {
    pub names: Vec<&'static str>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl SpaceSpec {
    pub fn dim(&self) -> usize {
        self.names.len()
    }
}

/// Documented bounds of every observation entry. Unbounded entries use ±∞.
pub fn observation_space() -> SpaceSpec {
    let inf = f64::INFINITY;
    let mut low = vec![0.0; OBS_DIM];
    let mut high = vec![1.0; OBS_DIM];
    // Signed market entries.
    for i in [4, 10, 15] {
        low[i] = -inf;
        high[i] = inf;
    }
    // Volumes can exceed one grid capacity in pathological books.
    for i in [3, 5, 6, 7, 8] {
        high[i] = inf;
    }
    // Agent energies relative to rated capacity.
    for i in [16, 17, 20, 23, 26] {
        high[i] = inf;
    }
    low[AGENT_OFFSET + 8] = -inf;
    high[AGENT_OFFSET + 8] = inf;
    // Social welfare, liquidity, spread, volatility.
    high[KPI_OFFSET..KPI_OFFSET + 4].fill(inf);
    low[KPI_OFFSET + 2] = -1.0;
    SpaceSpec {
        names: FIELD_NAMES.to_vec(),
        low,
        high,
    }
}

/// Two continuous controls: price signal in [0, 1], quantity signal in [−1, 1].
pub fn action_space() -> SpaceSpec {
    SpaceSpec {
        names: vec!["price_signal", "quantity_signal"],
        low: vec![0.0, -1.0],
        high: vec![1.0, 1.0],
    }
}
