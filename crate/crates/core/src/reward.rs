//! Composite per-agent reward:
//!
//! `total = base · (1 + f_coop · f_contrib) − dso_penalty − unmet_penalty`
//!
//! `base` is a weighted sum of five normalized components, `f_coop` a weighted
//! sum of system KPIs shared by everyone, and `f_contrib` the agent's own
//! contribution to system health. Every term is kept in [`RewardBreakdown`]
//! so that totals can be audited after the fact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpi::KpiRecord;
use crate::ledger::{AgentStep, StepLedger};
use crate::types::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseWeights {
    pub economic: f64,
    pub grid_balance: f64,
    pub resource_alloc: f64,
    pub trading: f64,
    pub stability: f64,
}

impl Default for BaseWeights {
    fn default() -> Self {
        BaseWeights {
            economic: 0.2,
            grid_balance: 0.2,
            resource_alloc: 0.2,
            trading: 0.2,
            stability: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContributionWeights {
    pub imbalance: f64,
    pub price_efficiency: f64,
    pub local_volume: f64,
}

impl Default for ContributionWeights {
    fn default() -> Self {
        ContributionWeights {
            imbalance: 1.0 / 3.0,
            price_efficiency: 1.0 / 3.0,
            local_volume: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooperationWeights {
    pub self_consumption: f64,
    pub coordination_score: f64,
    pub coordination_convergence: f64,
}

impl Default for CooperationWeights {
    fn default() -> Self {
        CooperationWeights {
            self_consumption: 1.0 / 3.0,
            coordination_score: 1.0 / 3.0,
            coordination_convergence: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyCoefficients {
    /// Per kWh traded with the DSO, before imbalance scaling.
    pub dso_coeff: f64,
    /// Per kWh of unmet demand.
    pub unmet_coeff: f64,
}

impl Default for PenaltyCoefficients {
    fn default() -> Self {
        PenaltyCoefficients {
            dso_coeff: 0.01,
            unmet_coeff: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    #[serde(default)]
    pub base: BaseWeights,
    #[serde(default)]
    pub contribution: ContributionWeights,
    #[serde(default)]
    pub cooperation: CooperationWeights,
    #[serde(default)]
    pub penalty: PenaltyCoefficients,
}

impl RewardWeights {
    /// Checks non-negativity and that each weight group sums to one.
    /// Errors carry the offending key path.
    pub fn validate(&self) -> Result<()> {
        let b = &self.base;
        let c = &self.contribution;
        let k = &self.cooperation;
        let groups: [(&str, &[(&str, f64)]); 3] = [
            (
                "reward.base",
                &[
                    ("economic", b.economic),
                    ("grid_balance", b.grid_balance),
                    ("resource_alloc", b.resource_alloc),
                    ("trading", b.trading),
                    ("stability", b.stability),
                ],
            ),
            (
                "reward.contribution",
                &[
                    ("imbalance", c.imbalance),
                    ("price_efficiency", c.price_efficiency),
                    ("local_volume", c.local_volume),
                ],
            ),
            (
                "reward.cooperation",
                &[
                    ("self_consumption", k.self_consumption),
                    ("coordination_score", k.coordination_score),
                    ("coordination_convergence", k.coordination_convergence),
                ],
            ),
        ];
        for (group, weights) in groups {
            for (name, w) in weights {
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(Error::config(
                        format!("{group}.{name}"),
                        format!("weight must be a non-negative number, got {w}"),
                    ));
                }
            }
            let sum: f64 = weights.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(group, format!("weights must sum to 1, got {sum}")));
            }
        }
        for (name, v) in [
            ("dso_coeff", self.penalty.dso_coeff),
            ("unmet_coeff", self.penalty.unmet_coeff),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("reward.penalty.{name}"),
                    format!("coefficient must be non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Five base components, each already normalized to O(1).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseComponents {
    pub economic: f64,
    pub grid_balance_term: f64,
    pub resource_alloc: f64,
    pub trading: f64,
    pub stability: f64,
}

impl BaseComponents {
    pub fn weighted(&self, w: &BaseWeights) -> f64 {
        w.economic * self.economic
            + w.grid_balance * self.grid_balance_term
            + w.resource_alloc * self.resource_alloc
            + w.trading * self.trading
            + w.stability * self.stability
    }
}

/// Market-wide context an agent's base reward is measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketContext {
    pub feed_in: f64,
    pub utility: f64,
    pub grid_balance: f64,
    pub price_volatility: f64,
    pub price_range: f64,
}

impl MarketContext {
    pub fn from_ledger(ledger: &StepLedger, kpis: &KpiRecord) -> Self {
        MarketContext {
            feed_in: ledger.feed_in,
            utility: ledger.utility,
            grid_balance: ledger.grid_balance,
            price_volatility: kpis.price_volatility,
            price_range: ledger.price_cap - ledger.price_floor,
        }
    }
}

/// Savings of the agent's P2P trades relative to settling the same volume
/// with the DSO, in currency.
pub fn dso_advantage(agent: &AgentId, ledger: &StepLedger) -> f64 {
    ledger
        .p2p_trades_of(agent)
        .map(|t| {
            if &t.buyer == agent {
                (ledger.utility - t.price) * t.quantity
            } else {
                (t.price - ledger.feed_in) * t.quantity
            }
        })
        .sum()
}

/// Base components for one agent.
///
/// * economic: P2P savings against the DSO tariff, over `tariff midpoint × capacity`
/// * grid balance: P2P net purchase signed by the grid balance, over capacity;
///   positive for buying into a surplus or selling into a deficit
/// * resource allocation: the agent's P2P volume over its available flexibility
/// * trading: P2P share of the agent's traded volume
/// * stability: one minus price volatility over the admissible price range
pub fn base_reward(
    agent: &AgentStep,
    advantage: f64,
    ctx: &MarketContext,
    weights: &BaseWeights,
) -> (BaseComponents, f64) {
    let scale = 0.5 * (ctx.feed_in + ctx.utility) * agent.capacity_kw;
    let economic = if scale > 0.0 { advantage / scale } else { 0.0 };

    let net_p2p = agent.p2p_bought_kwh - agent.p2p_sold_kwh;
    let direction = if ctx.grid_balance > 0.0 {
        1.0
    } else if ctx.grid_balance < 0.0 {
        -1.0
    } else {
        0.0
    };
    let grid_balance_term = (direction * net_p2p / agent.capacity_kw).clamp(-1.0, 1.0);

    let flex = agent.flex.total();
    let resource_alloc = if flex > 0.0 {
        (agent.p2p_kwh() / flex).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let traded = agent.p2p_kwh() + agent.dso_kwh();
    let trading = if traded > 0.0 {
        agent.p2p_kwh() / traded
    } else {
        0.0
    };

    let stability = if ctx.price_range > 0.0 {
        1.0 - (ctx.price_volatility / ctx.price_range).min(1.0)
    } else {
        1.0
    };

    let components = BaseComponents {
        economic,
        grid_balance_term,
        resource_alloc,
        trading,
        stability,
    };
    let base = components.weighted(weights);
    (components, base)
}

/// Weighted sum of self-consumption, coordination score and convergence.
pub fn cooperation_factor(kpis: &KpiRecord, weights: &CooperationWeights) -> f64 {
    (weights.self_consumption * kpis.self_consumption
        + weights.coordination_score * kpis.coordination_score
        + weights.coordination_convergence * kpis.coordination_convergence)
        .clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Contribution {
    /// Change in |B_grid| if the agent's trades were removed, over grid capacity.
    pub imbalance_term: f64,
    pub price_term: f64,
    pub volume_term: f64,
    pub value: f64,
}

/// Grid balance with one agent's trades taken out.
pub fn balance_without(agent: &AgentStep, grid_balance: f64) -> f64 {
    grid_balance - (agent.bought_kwh() - agent.sold_kwh())
}

pub fn contribution_factor(
    agent_id: &AgentId,
    ledger: &StepLedger,
    weights: &ContributionWeights,
) -> Result<Contribution> {
    let agent = ledger
        .agent(agent_id)
        .ok_or_else(|| Error::UnknownAgent(agent_id.to_string()))?;

    let b = ledger.grid_balance;
    let imbalance_term =
        (balance_without(agent, b).abs() - b.abs()) / ledger.grid_capacity_kw;

    let (value, qty) = ledger
        .p2p_trades_of(agent_id)
        .fold((0.0, 0.0), |(v, q), t| (v + t.price * t.quantity, q + t.quantity));
    let spread = ledger.utility - ledger.feed_in;
    let price_term = match ledger.clearing_price {
        Some(market) if qty > 0.0 && spread > 0.0 => {
            let mid = 0.5 * (ledger.utility + ledger.feed_in);
            let own = value / qty;
            (((market - mid).abs() - (own - mid).abs()) / spread).clamp(-1.0, 1.0)
        }
        _ => 0.0,
    };

    let total_p2p = ledger.p2p_volume();
    let volume_term = if total_p2p > 0.0 {
        (agent.p2p_kwh() / total_p2p).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let value = (weights.imbalance * imbalance_term
        + weights.price_efficiency * price_term
        + weights.local_volume * volume_term)
        .clamp(-1.0, 1.0);
    Ok(Contribution {
        imbalance_term,
        price_term,
        volume_term,
        value,
    })
}

/// `(dso_penalty, unmet_penalty)`; the DSO part grows with |B_grid| / capacity.
pub fn penalties(
    dso_volume_kwh: f64,
    unmet_demand_kwh: f64,
    grid_balance: f64,
    grid_capacity_kw: f64,
    coeffs: &PenaltyCoefficients,
) -> (f64, f64) {
    let dso = coeffs.dso_coeff * dso_volume_kwh * (1.0 + grid_balance.abs() / grid_capacity_kw);
    let unmet = coeffs.unmet_coeff * unmet_demand_kwh;
    (dso, unmet)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub economic: f64,
    pub grid_balance_term: f64,
    pub resource_alloc: f64,
    pub trading: f64,
    pub stability: f64,
    pub base: f64,
    pub f_coop: f64,
    pub f_contrib: f64,
    pub dso_penalty: f64,
    pub unmet_penalty: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn assemble(
        components: BaseComponents,
        base: f64,
        f_coop: f64,
        f_contrib: f64,
        dso_penalty: f64,
        unmet_penalty: f64,
    ) -> Self {
        RewardBreakdown {
            economic: components.economic,
            grid_balance_term: components.grid_balance_term,
            resource_alloc: components.resource_alloc,
            trading: components.trading,
            stability: components.stability,
            base,
            f_coop,
            f_contrib,
            dso_penalty,
            unmet_penalty,
            total: base * (1.0 + f_coop * f_contrib) - dso_penalty - unmet_penalty,
        }
    }

    /// Recomputes the total from the stored terms.
    pub fn recomposed_total(&self) -> f64 {
        self.base * (1.0 + self.f_coop * self.f_contrib) - self.dso_penalty - self.unmet_penalty
    }

    pub fn components(&self) -> BaseComponents {
        BaseComponents {
            economic: self.economic,
            grid_balance_term: self.grid_balance_term,
            resource_alloc: self.resource_alloc,
            trading: self.trading,
            stability: self.stability,
        }
    }
}

pub fn compute_reward(
    agent_id: &AgentId,
    ledger: &StepLedger,
    kpis: &KpiRecord,
    weights: &RewardWeights,
) -> Result<RewardBreakdown> {
    let agent = ledger
        .agent(agent_id)
        .ok_or_else(|| Error::UnknownAgent(agent_id.to_string()))?;
    let ctx = MarketContext::from_ledger(ledger, kpis);
    let (components, base) = base_reward(
        agent,
        dso_advantage(agent_id, ledger),
        &ctx,
        &weights.base,
    );
    let f_coop = cooperation_factor(kpis, &weights.cooperation);
    let f_contrib = contribution_factor(agent_id, ledger, &weights.contribution)?.value;
    let (dso_penalty, unmet_penalty) = penalties(
        agent.dso_kwh(),
        agent.unmet_demand_kwh,
        ledger.grid_balance,
        ledger.grid_capacity_kw,
        &weights.penalty,
    );
    Ok(RewardBreakdown::assemble(
        components,
        base,
        f_coop,
        f_contrib,
        dso_penalty,
        unmet_penalty,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FlowResult;
    use crate::market::{Layer, Trade};
    use std::collections::BTreeMap;

    fn agent(id: &str) -> AgentStep {
        AgentStep {
            agent_id: AgentId::new(id),
            capacity_kw: 100.0,
            ..Default::default()
        }
    }

    fn ledger(agents: Vec<AgentStep>, trades: Vec<Trade>, grid_balance: f64) -> StepLedger {
        let clearing_volume: f64 = trades.iter().filter(|t| t.layer.is_p2p()).map(|t| t.quantity).sum();
        let clearing_price = (clearing_volume > 0.0).then(|| {
            trades
                .iter()
                .filter(|t| t.layer.is_p2p())
                .map(|t| t.price * t.quantity)
                .sum::<f64>()
                / clearing_volume
        });
        StepLedger {
            step: 0,
            orders: vec![],
            trades,
            clearing_price,
            clearing_volume,
            feed_in: 100.0,
            utility: 300.0,
            price_floor: 20.0,
            price_cap: 600.0,
            grid_capacity_kw: 1800.0,
            agents,
            injections: BTreeMap::new(),
            flows: FlowResult {
                edge_flow: vec![],
                congestion_mean: 0.0,
                max_edge_utilization: 0.0,
            },
            grid_balance,
        }
    }

    fn ctx(grid_balance: f64) -> MarketContext {
        MarketContext {
            feed_in: 100.0,
            utility: 300.0,
            grid_balance,
            price_volatility: 0.0,
            price_range: 580.0,
        }
    }

    #[test]
    fn idle_agent_has_no_trade_terms() {
        let (c, _) = base_reward(&agent("a"), 0.0, &ctx(0.0), &BaseWeights::default());
        assert_eq!(c.economic, 0.0);
        assert_eq!(c.grid_balance_term, 0.0);
        assert_eq!(c.resource_alloc, 0.0);
        assert_eq!(c.trading, 0.0);
    }

    #[test]
    fn grid_term_sign_follows_balance() {
        let seller = AgentStep {
            p2p_sold_kwh: 10.0,
            ..agent("a")
        };
        let w = BaseWeights::default();
        let (deficit, _) = base_reward(&seller, 0.0, &ctx(-50.0), &w);
        let (surplus, _) = base_reward(&seller, 0.0, &ctx(50.0), &w);
        assert!(deficit.grid_balance_term > 0.0);
        assert!(surplus.grid_balance_term < 0.0);
    }

    #[test]
    fn p2p_volume_beats_dso_volume() {
        let w = BaseWeights::default();
        let p2p = AgentStep {
            p2p_bought_kwh: 10.0,
            ..agent("a")
        };
        let dso = AgentStep {
            dso_bought_kwh: 10.0,
            ..agent("a")
        };
        let (a, _) = base_reward(&p2p, 0.0, &ctx(0.0), &w);
        let (b, _) = base_reward(&dso, 0.0, &ctx(0.0), &w);
        assert!(a.trading > b.trading);
    }

    #[test]
    fn cooperation_examples() {
        let w = CooperationWeights::default();
        let ones = KpiRecord {
            self_consumption: 1.0,
            coordination_score: 1.0,
            coordination_convergence: 1.0,
            ..Default::default()
        };
        assert!((cooperation_factor(&ones, &w) - 1.0).abs() < 1e-15);
        assert_eq!(cooperation_factor(&KpiRecord::default(), &w), 0.0);
        let mixed = KpiRecord {
            self_consumption: 0.6,
            coordination_score: 0.9,
            coordination_convergence: 0.3,
            ..Default::default()
        };
        assert!((cooperation_factor(&mixed, &w) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn contribution_of_idle_agent() {
        let l = ledger(vec![agent("a")], vec![], 0.0);
        let c = contribution_factor(&AgentId::new("a"), &l, &ContributionWeights::default()).unwrap();
        assert_eq!(c.imbalance_term, 0.0);
        assert_eq!(c.volume_term, 0.0);
        assert!(contribution_factor(&AgentId::new("zz"), &l, &ContributionWeights::default()).is_err());
    }

    #[test]
    fn counterfactual_buy_removal() {
        // Grid balance −10 with the agent's 50 kWh purchase; −60 without it.
        let buyer = AgentStep {
            dso_bought_kwh: 50.0,
            ..agent("a")
        };
        let l = ledger(vec![buyer], vec![], -10.0);
        let c = contribution_factor(&AgentId::new("a"), &l, &ContributionWeights::default()).unwrap();
        assert!((c.imbalance_term - 50.0 / 1800.0).abs() < 1e-15);
        assert!((c.imbalance_term - 0.0278).abs() < 1e-4);
    }

    #[test]
    fn sole_p2p_trader_owns_all_volume() {
        let trade = Trade {
            step: 0,
            buyer: AgentId::new("a"),
            seller: AgentId::new("b"),
            price: 200.0,
            quantity: 5.0,
            layer: Layer::P2p,
        };
        let a = AgentStep {
            p2p_bought_kwh: 5.0,
            ..agent("a")
        };
        let b = AgentStep {
            p2p_sold_kwh: 5.0,
            ..agent("b")
        };
        let l = ledger(vec![a, b], vec![trade], 0.0);
        let c = contribution_factor(&AgentId::new("a"), &l, &ContributionWeights::default()).unwrap();
        assert_eq!(c.volume_term, 1.0);
        // Trading exactly at the market mean gives no price credit.
        assert_eq!(c.price_term, 0.0);
    }

    #[test]
    fn penalty_examples() {
        let k = PenaltyCoefficients {
            dso_coeff: 1.0,
            unmet_coeff: 1.0,
        };
        assert_eq!(penalties(0.0, 0.0, 500.0, 1800.0, &k), (0.0, 0.0));
        assert_eq!(penalties(10.0, 0.0, 0.0, 1800.0, &k), (10.0, 0.0));
        let (d, _) = penalties(10.0, 0.0, -180.0, 1800.0, &k);
        assert!((d - 11.0).abs() < 1e-12);
        assert_eq!(penalties(0.0, 4.0, 0.0, 1800.0, &k).1, 4.0);
    }

    #[test]
    fn eq3_assembly() {
        let r = RewardBreakdown::assemble(BaseComponents::default(), 100.0, 0.5, 0.2, 10.0, 5.0);
        assert!((r.total - 95.0).abs() < 1e-12);
        let r = RewardBreakdown::assemble(BaseComponents::default(), 100.0, 0.0, 0.7, 10.0, 5.0);
        assert_eq!(r.total, 85.0);
        let r = RewardBreakdown::assemble(BaseComponents::default(), 100.0, 0.5, -0.2, 10.0, 5.0);
        assert!(r.total < 85.0);
    }

    #[test]
    fn weight_validation_reports_path() {
        let mut w = RewardWeights::default();
        assert!(w.validate().is_ok());
        w.cooperation.self_consumption = 0.9;
        match w.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "reward.cooperation"),
            other => panic!("unexpected {other:?}"),
        }
        let mut w = RewardWeights::default();
        w.penalty.dso_coeff = -1.0;
        match w.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "reward.penalty.dso_coeff"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
