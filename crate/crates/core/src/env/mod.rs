//! Multi-agent episode driver: reset, step, observations.

pub mod observation;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{available_flex, make_forecast, BatteryState, Flex, ForecastPair};
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::grid::{grid_balance, EnergyPosition};
use crate::kpi::{KpiInputs, KpiRecord, TradeTotals};
use crate::ledger::{AgentStep, StepLedger};
use crate::market::{
    arrival_shuffle, clear_market, settle_dso, Layer, MarketLimits, Order, Reputation, Side,
};
use crate::reward::{compute_reward, RewardBreakdown};
use crate::types::AgentId;

pub use observation::{action_space, observation_space, Observation, SpaceSpec, OBS_DIM};
use observation::{AGENT_DIM, KPI_DIM, MARKET_DIM};

/// Orders below this size are dropped.
pub const MIN_ORDER_KWH: f64 = 1e-9;

/// Continuous agent control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Position of the limit price between floor (0) and cap (1).
    pub price_signal: f64,
    /// Positive buys, negative sells, as a fraction of the order ceiling.
    pub quantity_signal: f64,
}

impl Action {
    /// Rejects non-finite signals and clamps the rest into range.
    pub fn new(price_signal: f64, quantity_signal: f64) -> Result<Self> {
        if !(price_signal.is_finite() && quantity_signal.is_finite()) {
            return Err(Error::Argument(format!(
                "action signals must be finite, got ({price_signal}, {quantity_signal})"
            )));
        }
        Ok(Action {
            price_signal: price_signal.clamp(0.0, 1.0),
            quantity_signal: quantity_signal.clamp(-1.0, 1.0),
        })
    }

    pub fn idle() -> Self {
        Action {
            price_signal: 0.5,
            quantity_signal: 0.0,
        }
    }
}

/// Turns an action into a limit order. Buy and sell quantities are capped by
/// the per-order ceiling and by the matching side of the agent's flexibility.
pub fn decode_action(
    agent_id: &AgentId,
    action: &Action,
    flex: &Flex,
    limits: &MarketLimits,
    step: usize,
) -> Result<Option<Order>> {
    let action = Action::new(action.price_signal, action.quantity_signal)?;
    let price = limits.price_floor + action.price_signal * (limits.price_cap - limits.price_floor);
    let q = action.quantity_signal;
    let (side, room) = if q > 0.0 {
        (Side::Buy, flex.buyable_kwh)
    } else {
        (Side::Sell, flex.sellable_kwh)
    };
    let quantity = q.abs() * limits.max_quantity.min(room.max(0.0));
    if quantity < MIN_ORDER_KWH {
        return Ok(None);
    }
    Ok(Some(Order::new(agent_id.clone(), side, price, quantity, step)))
}

#[derive(Debug, Clone)]
struct AgentState {
    battery: BatteryState,
    reputation: Reputation,
    generation: ForecastPair,
    demand: ForecastPair,
    demand_satisfied_kwh: f64,
    demand_deferred_kwh: f64,
    supply_satisfied_kwh: f64,
    supply_deferred_kwh: f64,
    profit_total: f64,
}

/// What the environment reports after each step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: BTreeMap<AgentId, Observation>,
    pub rewards: BTreeMap<AgentId, RewardBreakdown>,
    pub done: bool,
    pub kpis: KpiRecord,
    pub ledger: StepLedger,
}

/// One episode of the local energy market.
#[derive(Debug, Clone)]
pub struct MarketEnv {
    scenario: Arc<Scenario>,
    instance_id: u64,
    seed: u64,
    step: usize,
    done: bool,
    agents: Vec<AgentState>,
    forecast_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    price_history: Vec<f64>,
    volume_history: Vec<f64>,
    /// Last defined clearing price, or the tariff midpoint before any trade.
    last_price: f64,
    cumulative_liquidity: f64,
    last_kpis: KpiRecord,
    last_ledger: Option<StepLedger>,
}

fn streams(seed: u64, instance_id: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut forecast = ChaCha8Rng::seed_from_u64(seed);
    forecast.set_stream(instance_id.wrapping_mul(2));
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(instance_id.wrapping_mul(2).wrapping_add(1));
    (forecast, shuffle)
}

fn initial_kpis() -> KpiRecord {
    KpiRecord {
        coordination_score: 1.0,
        coordination_convergence: 1.0,
        grid_balance_index: 1.0,
        ..KpiRecord::default()
    }
}

impl MarketEnv {
    /// Creates an environment already reset with the scenario's configured seed.
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self::with_instance(scenario, 0)
    }

    /// Parallel instances with distinct ids draw from independent RNG streams.
    pub fn with_instance(scenario: Arc<Scenario>, instance_id: u64) -> Self {
        let seed = scenario.episode.seed;
        let (forecast_rng, shuffle_rng) = streams(seed, instance_id);
        let mut env = MarketEnv {
            scenario,
            instance_id,
            seed,
            step: 0,
            done: false,
            agents: Vec::new(),
            forecast_rng,
            shuffle_rng,
            price_history: Vec::new(),
            volume_history: Vec::new(),
            last_price: 0.0,
            cumulative_liquidity: 0.0,
            last_kpis: initial_kpis(),
            last_ledger: None,
        };
        env.reset(seed);
        env
    }

    /// Starts a new episode. Batteries start mid-band, reputations at 1,
    /// counters at zero; forecasts for step 0 are drawn here.
    pub fn reset(&mut self, seed: u64) -> BTreeMap<AgentId, Observation> {
        let (forecast_rng, shuffle_rng) = streams(seed, self.instance_id);
        self.seed = seed;
        self.forecast_rng = forecast_rng;
        self.shuffle_rng = shuffle_rng;
        self.step = 0;
        self.done = false;
        self.price_history.clear();
        self.volume_history.clear();
        self.last_price = self.scenario.tariff.midpoint_at(0);
        self.cumulative_liquidity = 0.0;
        self.last_kpis = initial_kpis();
        self.last_ledger = None;
        let window = self.scenario.episode.reputation_window;
        self.agents = self
            .scenario
            .fleet
            .iter()
            .map(|a| AgentState {
                battery: BatteryState::mid_band(a.battery_capacity_kwh),
                reputation: Reputation::new(a.agent_id.clone(), window),
                generation: ForecastPair::with_error(0.0, 0.0, 0.0),
                demand: ForecastPair::with_error(0.0, 0.0, 0.0),
                demand_satisfied_kwh: 0.0,
                demand_deferred_kwh: 0.0,
                supply_satisfied_kwh: 0.0,
                supply_deferred_kwh: 0.0,
                profit_total: 0.0,
            })
            .collect();
        self.draw_forecasts();
        self.observations()
    }

    fn draw_forecasts(&mut self) {
        let max_error = self.scenario.episode.forecast_max_error;
        for (state, cfg) in self.agents.iter_mut().zip(&self.scenario.fleet) {
            let (g, d) = cfg
                .realized_profile(self.step)
                .expect("step is inside the profile horizon");
            state.generation = make_forecast(g, max_error, &mut self.forecast_rng);
            state.demand = make_forecast(d, max_error, &mut self.forecast_rng);
        }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn instance_id(&self) -> u64 {
        self.instance_id
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.scenario.fleet.iter().map(|a| a.agent_id.clone()).collect()
    }

    pub fn last_kpis(&self) -> &KpiRecord {
        &self.last_kpis
    }

    fn index_of(&self, id: &AgentId) -> Result<usize> {
        self.scenario
            .fleet
            .iter()
            .position(|a| &a.agent_id == id)
            .ok_or_else(|| Error::UnknownAgent(id.to_string()))
    }

    pub fn battery(&self, id: &AgentId) -> Result<BatteryState> {
        Ok(self.agents[self.index_of(id)?].battery)
    }

    /// Overrides a battery's energy content, clamped to its usable band.
    pub fn set_battery_energy(&mut self, id: &AgentId, energy_kwh: f64) -> Result<()> {
        if !energy_kwh.is_finite() {
            return Err(Error::Argument(format!("battery energy must be finite, got {energy_kwh}")));
        }
        let i = self.index_of(id)?;
        let b = self.agents[i].battery;
        let mut next = BatteryState::with_energy(b.capacity_kwh, energy_kwh);
        next.cumulative_charge_kwh = b.cumulative_charge_kwh;
        next.cumulative_discharge_kwh = b.cumulative_discharge_kwh;
        self.agents[i].battery = next;
        Ok(())
    }

    pub fn reputation(&self, id: &AgentId) -> Result<f64> {
        Ok(self.agents[self.index_of(id)?].reputation.score)
    }

    /// Forecast `(generation, demand)` the agent bids on this step.
    pub fn forecast(&self, id: &AgentId) -> Result<(ForecastPair, ForecastPair)> {
        let a = &self.agents[self.index_of(id)?];
        Ok((a.generation, a.demand))
    }

    /// Flexibility each agent can offer this step, from forecasts.
    pub fn flex(&self, id: &AgentId) -> Result<Flex> {
        let a = &self.agents[self.index_of(id)?];
        Ok(available_flex(&a.battery, a.generation.forecast_kw, a.demand.forecast_kw))
    }

    /// Decodes actions and advances one step. Agents without an action idle.
    pub fn step(&mut self, actions: &BTreeMap<AgentId, Action>) -> Result<StepResult> {
        self.ensure_running()?;
        let limits = self.scenario.episode.limits();
        let mut orders = Vec::new();
        let mut signals = BTreeMap::new();
        for id in actions.keys() {
            self.index_of(id)?;
        }
        for (cfg, state) in self.scenario.fleet.iter().zip(&self.agents) {
            let Some(action) = actions.get(&cfg.agent_id) else {
                continue;
            };
            let flex = available_flex(
                &state.battery,
                state.generation.forecast_kw,
                state.demand.forecast_kw,
            );
            if let Some(order) = decode_action(&cfg.agent_id, action, &flex, &limits, self.step)? {
                orders.push(order);
            }
            signals.insert(cfg.agent_id.clone(), action.quantity_signal.clamp(-1.0, 1.0));
        }
        self.step_orders(orders, &signals)
    }

    fn ensure_running(&self) -> Result<()> {
        if self.done {
            return Err(Error::State(format!(
                "episode finished after {} steps; call reset",
                self.step
            )));
        }
        Ok(())
    }

    /// Advances one step from explicit limit orders. Orders must belong to
    /// known agents, carry the current step and respect the market limits.
    pub fn step_orders(
        &mut self,
        orders: Vec<Order>,
        quantity_signals: &BTreeMap<AgentId, f64>,
    ) -> Result<StepResult> {
        self.ensure_running()?;
        let sc = Arc::clone(&self.scenario);
        let ep = &sc.episode;
        let t = self.step;
        let limits = ep.limits();
        for o in &orders {
            self.index_of(&o.agent_id)?;
            limits.check(o)?;
            if o.step != t {
                return Err(Error::Argument(format!(
                    "order for step {} submitted at step {t}",
                    o.step
                )));
            }
        }

        let orders = if ep.async_orders {
            arrival_shuffle(orders, &mut self.shuffle_rng)
        } else {
            orders
                .into_iter()
                .map(|mut o| {
                    o.arrival_rank = 0;
                    o
                })
                .collect()
        };
        let reps: BTreeMap<AgentId, f64> = sc
            .fleet
            .iter()
            .zip(&self.agents)
            .map(|(c, s)| (c.agent_id.clone(), s.reputation.score))
            .collect();
        let clearing = clear_market(&orders, &reps)?;
        let mut trades = clearing.trades.clone();
        trades.extend(settle_dso(
            &clearing.residual_buys,
            &clearing.residual_sells,
            &sc.tariff,
            t,
        ));

        let mut rows = Vec::with_capacity(sc.fleet.len());
        let mut next_batteries = Vec::with_capacity(sc.fleet.len());
        let mut injections: BTreeMap<String, f64> =
            sc.topology.nodes().iter().map(|n| (n.clone(), 0.0)).collect();
        for (cfg, state) in sc.fleet.iter().zip(&self.agents) {
            let (gen, dem) = cfg.realized_profile(t)?;
            let mut row = AgentStep {
                agent_id: cfg.agent_id.clone(),
                node_id: cfg.node_id.clone(),
                capacity_kw: cfg.capacity_kw,
                generation_kwh: gen,
                demand_kwh: dem,
                forecast_generation_kwh: state.generation.forecast_kw,
                forecast_demand_kwh: state.demand.forecast_kw,
                flex: available_flex(
                    &state.battery,
                    state.generation.forecast_kw,
                    state.demand.forecast_kw,
                ),
                quantity_signal: quantity_signals.get(&cfg.agent_id).copied().unwrap_or(0.0),
                ..AgentStep::default()
            };
            for tr in &trades {
                let value = tr.price * tr.quantity;
                if tr.buyer == cfg.agent_id {
                    match tr.layer {
                        Layer::P2p => row.p2p_bought_kwh += tr.quantity,
                        _ => row.dso_bought_kwh += tr.quantity,
                    }
                    row.cost += value;
                }
                if tr.seller == cfg.agent_id {
                    match tr.layer {
                        Layer::P2p => row.p2p_sold_kwh += tr.quantity,
                        _ => row.dso_sold_kwh += tr.quantity,
                    }
                    row.revenue += value;
                }
            }
            let net = gen - dem + row.bought_kwh() - row.sold_kwh();
            let battery = if net >= 0.0 {
                let (b, accepted) = state.battery.charge(net)?;
                row.charge_kwh = accepted;
                row.deferred_supply_kwh = (net - accepted).max(0.0);
                b
            } else {
                let (b, delivered) = state.battery.discharge(-net)?;
                row.discharge_kwh = delivered;
                row.unmet_demand_kwh = (-net - delivered).max(0.0);
                row.undelivered_kwh = row.unmet_demand_kwh.min(row.sold_kwh());
                b
            };
            row.battery_energy_kwh = battery.energy_kwh;
            *injections.entry(cfg.node_id.clone()).or_insert(0.0) += row.injection_kwh();
            next_batteries.push(battery);
            rows.push(row);
        }

        let flows = sc.topology.edge_flows(&injections)?;
        let positions: Vec<EnergyPosition> = rows.iter().map(AgentStep::position).collect();
        let balance = grid_balance(&positions);

        let mut price_history = self.price_history.clone();
        if let Some(p) = clearing.clearing_price {
            price_history.push(p);
        }
        let mut volume_history = self.volume_history.clone();
        volume_history.push(clearing.clearing_volume);
        let available: f64 = rows.iter().map(|r| r.flex.total()).sum();
        let kpis = KpiRecord::compute(&KpiInputs {
            trades: &trades,
            orders: &orders,
            price_history: &price_history,
            volume_history: &volume_history,
            grid_balance: balance,
            congestion: flows.congestion_mean,
            available_flex_kwh: available,
            grid_capacity_kw: ep.grid_capacity_kw,
            loss_fraction: ep.loss_fraction,
            window: ep.kpi_window,
        });

        let ledger = StepLedger {
            step: t,
            orders,
            trades,
            clearing_price: clearing.clearing_price,
            clearing_volume: clearing.clearing_volume,
            feed_in: sc.tariff.feed_in_at(t),
            utility: sc.tariff.utility_at(t),
            price_floor: ep.price_floor,
            price_cap: ep.price_cap,
            grid_capacity_kw: ep.grid_capacity_kw,
            agents: rows,
            injections,
            flows,
            grid_balance: balance,
        };

        let mut rewards = BTreeMap::new();
        let mut reputations = Vec::with_capacity(self.agents.len());
        for (row, state) in ledger.agents.iter().zip(&self.agents) {
            rewards.insert(
                row.agent_id.clone(),
                compute_reward(&row.agent_id, &ledger, &kpis, &sc.reward)?,
            );
            let sold = row.sold_kwh();
            reputations.push(state.reputation.update(sold, (sold - row.undelivered_kwh).max(0.0))?);
        }

        // Everything fallible is done; commit.
        for (((state, row), battery), rep) in self
            .agents
            .iter_mut()
            .zip(&ledger.agents)
            .zip(next_batteries)
            .zip(reputations)
        {
            let own_shortfall = row.unmet_demand_kwh - row.undelivered_kwh;
            state.battery = battery;
            state.reputation = rep;
            state.demand_satisfied_kwh += row.demand_kwh - own_shortfall;
            state.demand_deferred_kwh += own_shortfall;
            state.supply_satisfied_kwh += row.sold_kwh() - row.undelivered_kwh;
            state.supply_deferred_kwh += row.deferred_supply_kwh;
            state.profit_total += row.profit();
        }
        self.price_history = price_history;
        self.volume_history = volume_history;
        if let Some(p) = ledger.clearing_price {
            self.last_price = p;
        }
        self.cumulative_liquidity += kpis.liquidity;
        self.last_kpis = kpis;
        self.last_ledger = Some(ledger.clone());
        self.step += 1;
        self.done = self.step >= ep.max_steps;
        if !self.done {
            self.draw_forecasts();
        }
        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done: self.done,
            kpis,
            ledger,
        })
    }

    /// Current observation of every agent.
    pub fn observations(&self) -> BTreeMap<AgentId, Observation> {
        let market = self.market_segment();
        let kpis = self.kpi_segment();
        self.scenario
            .fleet
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                (
                    cfg.agent_id.clone(),
                    Observation::assemble(&market, &self.agent_segment(i), &kpis),
                )
            })
            .collect()
    }

    pub fn observation(&self, id: &AgentId) -> Result<Observation> {
        let i = self.index_of(id)?;
        Ok(Observation::assemble(
            &self.market_segment(),
            &self.agent_segment(i),
            &self.kpi_segment(),
        ))
    }

    fn market_segment(&self) -> [f64; MARKET_DIM] {
        let ep = &self.scenario.episode;
        let tariff = &self.scenario.tariff;
        let t = self.step;
        let cap = ep.price_cap;
        let c = ep.grid_capacity_kw;
        let (volume, balance, totals, mean_local, advantage) = match &self.last_ledger {
            Some(l) => {
                let mean_local = l.mean_local_price().unwrap_or(self.last_price);
                (
                    l.clearing_volume,
                    l.grid_balance,
                    TradeTotals::from_trades(&l.trades),
                    mean_local,
                    l.utility - mean_local,
                )
            }
            None => (0.0, 0.0, TradeTotals::default(), self.last_price, 0.0),
        };
        let dso = totals.dso();
        let dso_ratio = if dso + totals.p2p > 0.0 {
            dso / (dso + totals.p2p)
        } else {
            0.0
        };
        let feed_in = tariff.feed_in_at(t);
        let utility = tariff.utility_at(t);
        [
            t as f64 / ep.max_steps as f64,
            (t % 24) as f64 / 24.0,
            self.last_price / cap,
            volume / c,
            balance / c,
            totals.dso_buy / c,
            totals.dso_sell / c,
            dso / c,
            totals.p2p / c,
            dso_ratio,
            (totals.dso_buy - totals.dso_sell) / c,
            feed_in / cap,
            utility / cap,
            mean_local / cap,
            (utility - feed_in) / cap,
            advantage / cap,
        ]
    }

    fn agent_segment(&self, i: usize) -> [f64; AGENT_DIM] {
        let cfg = &self.scenario.fleet[i];
        let s = &self.agents[i];
        let ep = &self.scenario.episode;
        let cap = cfg.capacity_kw;
        let horizon = cap * ep.max_steps as f64;
        let b = &s.battery;
        let per_battery = |v: f64| {
            if b.capacity_kwh > 0.0 {
                v / b.capacity_kwh
            } else {
                0.0
            }
        };
        let throughput = |v: f64| per_battery(v) / ep.max_steps as f64;
        let g = s.generation.forecast_kw;
        let d = s.demand.forecast_kw;
        let mean_profit = if self.step > 0 {
            s.profit_total / self.step as f64
        } else {
            0.0
        };
        [
            g / cap,
            d / cap,
            s.demand_satisfied_kwh / horizon,
            s.demand_deferred_kwh / horizon,
            (d - g).max(0.0) / cap,
            s.supply_satisfied_kwh / horizon,
            s.supply_deferred_kwh / horizon,
            (g - d).max(0.0) / cap,
            mean_profit / (ep.price_cap * cap),
            s.reputation.score,
            b.energy_kwh / cap,
            b.soc(),
            per_battery(b.max_charge_kwh()),
            per_battery(b.max_discharge_kwh()),
            throughput(b.cumulative_charge_kwh),
            throughput(b.cumulative_discharge_kwh),
        ]
    }

    fn kpi_segment(&self) -> [f64; KPI_DIM] {
        let ep = &self.scenario.episode;
        let k = &self.last_kpis;
        let c = ep.grid_capacity_kw;
        let liquidity = if self.step > 0 {
            self.cumulative_liquidity / (c * self.step as f64)
        } else {
            0.0
        };
        [
            k.social_welfare / (ep.price_cap * c),
            liquidity,
            k.bid_ask_spread / ep.price_cap,
            k.price_volatility / ep.price_cap,
            k.imbalance,
            k.congestion,
            k.coordination_score,
            k.coordination_convergence,
            k.self_consumption,
            k.flexibility_utilization,
        ]
    }
}
