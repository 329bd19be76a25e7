//! Frozen record of everything that happened in one market step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assets::Flex;
use crate::grid::{EnergyPosition, FlowResult};
use crate::market::{Layer, Order, Trade};
use crate::types::AgentId;

/// One agent's share of a step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentStep {
    pub agent_id: AgentId,
    pub node_id: String,
    pub capacity_kw: f64,
    pub generation_kwh: f64,
    pub demand_kwh: f64,
    pub forecast_generation_kwh: f64,
    pub forecast_demand_kwh: f64,
    /// Flexibility the agent bid against (forecast based, before trading).
    pub flex: Flex,
    pub quantity_signal: f64,
    pub p2p_bought_kwh: f64,
    pub p2p_sold_kwh: f64,
    pub dso_bought_kwh: f64,
    pub dso_sold_kwh: f64,
    /// Bus-side energy taken by the battery.
    pub charge_kwh: f64,
    /// Bus-side energy delivered by the battery.
    pub discharge_kwh: f64,
    /// Physical shortfall left after the battery, including undelivered sales.
    pub unmet_demand_kwh: f64,
    /// Surplus that neither trades nor the battery could absorb.
    pub deferred_supply_kwh: f64,
    /// Part of `unmet_demand_kwh` that was owed to buyers.
    pub undelivered_kwh: f64,
    pub revenue: f64,
    pub cost: f64,
    pub battery_energy_kwh: f64,
}

impl AgentStep {
    pub fn bought_kwh(&self) -> f64 {
        self.p2p_bought_kwh + self.dso_bought_kwh
    }

    pub fn sold_kwh(&self) -> f64 {
        self.p2p_sold_kwh + self.dso_sold_kwh
    }

    pub fn p2p_kwh(&self) -> f64 {
        self.p2p_bought_kwh + self.p2p_sold_kwh
    }

    pub fn dso_kwh(&self) -> f64 {
        self.dso_bought_kwh + self.dso_sold_kwh
    }

    pub fn profit(&self) -> f64 {
        self.revenue - self.cost
    }

    /// Export to the feeder at the agent's node.
    pub fn injection_kwh(&self) -> f64 {
        self.sold_kwh() - self.bought_kwh()
    }

    /// gen − dem + bought − sold + discharge − charge + unmet − deferred.
    /// Zero up to rounding for a consistent ledger.
    pub fn energy_account(&self) -> f64 {
        self.generation_kwh - self.demand_kwh + self.bought_kwh() - self.sold_kwh()
            + self.discharge_kwh
            - self.charge_kwh
            + self.unmet_demand_kwh
            - self.deferred_supply_kwh
    }

    pub fn position(&self) -> EnergyPosition {
        EnergyPosition {
            generation_kwh: self.generation_kwh,
            demand_kwh: self.demand_kwh,
            bought_kwh: self.bought_kwh(),
            sold_kwh: self.sold_kwh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLedger {
    pub step: usize,
    pub orders: Vec<Order>,
    pub trades: Vec<Trade>,
    pub clearing_price: Option<f64>,
    pub clearing_volume: f64,
    pub feed_in: f64,
    pub utility: f64,
    pub price_floor: f64,
    pub price_cap: f64,
    pub grid_capacity_kw: f64,
    pub agents: Vec<AgentStep>,
    pub injections: BTreeMap<String, f64>,
    pub flows: FlowResult,
    pub grid_balance: f64,
}

impl StepLedger {
    pub fn agent(&self, id: &AgentId) -> Option<&AgentStep> {
        self.agents.iter().find(|a| &a.agent_id == id)
    }

    pub fn p2p_volume(&self) -> f64 {
        self.trades
            .iter()
            .filter(|t| t.layer == Layer::P2p)
            .map(|t| t.quantity)
            .sum()
    }

    pub fn p2p_trades_of<'a>(&'a self, id: &'a AgentId) -> impl Iterator<Item = &'a Trade> + 'a {
        self.trades
            .iter()
            .filter(move |t| t.layer.is_p2p() && (&t.buyer == id || &t.seller == id))
    }

    pub fn available_flex_kwh(&self) -> f64 {
        self.agents.iter().map(|a| a.flex.total()).sum()
    }

    /// Mean of P2P trade prices, if any traded.
    pub fn mean_local_price(&self) -> Option<f64> {
        let prices: Vec<f64> = self
            .trades
            .iter()
            .filter(|t| t.layer.is_p2p())
            .map(|t| t.price)
            .collect();
        (!prices.is_empty()).then(|| prices.iter().sum::<f64>() / prices.len() as f64)
    }
}
