//! Scripted baselines and the linear policy searched by CEM.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::observation::{idx, OBS_DIM};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::market::MarketLimits;
use crate::types::AgentId;

/// Something that maps one agent's observation to an action.
pub trait Policy: Send {
    fn act(&mut self, agent_index: usize, agent: &AgentId, obs: &Observation) -> Action;

    /// Called before every episode.
    fn reset(&mut self, _seed: u64) {}

    fn name(&self) -> String;
}

/// Uniform price and quantity signals.
pub fn zi_policy<R: Rng + ?Sized>(_obs: &Observation, rng: &mut R) -> Action {
    Action {
        price_signal: rng.random_range(0.0..=1.0),
        quantity_signal: rng.random_range(-1.0..=1.0),
    }
}

const ZI_STREAM_BASE: u64 = 1 << 32;

/// Zero-intelligence trader with one RNG stream per agent.
#[derive(Debug, Clone)]
pub struct ZiPolicy {
    seed: u64,
    streams: BTreeMap<usize, ChaCha8Rng>,
}

impl ZiPolicy {
    pub fn new(seed: u64) -> Self {
        ZiPolicy {
            seed,
            streams: BTreeMap::new(),
        }
    }

    /// Independent stream for one agent slot.
    pub fn stream(seed: u64, agent_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ZI_STREAM_BASE + agent_index as u64);
        rng
    }
}

impl Policy for ZiPolicy {
    fn act(&mut self, agent_index: usize, _agent: &AgentId, obs: &Observation) -> Action {
        let seed = self.seed;
        let rng = self
            .streams
            .entry(agent_index)
            .or_insert_with(|| Self::stream(seed, agent_index));
        zi_policy(obs, rng)
    }

    fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.streams.clear();
    }

    fn name(&self) -> String {
        "zi".into()
    }
}

/// Below this normalized surplus or deficit the greedy trader stays out.
const GREEDY_EPS: f64 = 1e-6;
/// Fraction of the tariff band the greedy trader concedes from the DSO price.
const GREEDY_MARGIN: f64 = 0.05;
/// DSO penalty coefficient at which the greedy trader is fully DSO-averse.
pub const FULL_AVERSION_COEFF: f64 = 0.1;

/// Tariff-band heuristic with default market limits and no DSO aversion.
pub fn greedy_policy(obs: &Observation) -> Action {
    greedy_action(obs, &MarketLimits::default(), 0.0)
}

/// Sells a surplus just above feed-in, buys a deficit just below utility.
///
/// At `aversion = 0` the order covers the whole flexibility, battery included.
/// As aversion grows the battery is only traded toward the side that was short
/// last step (read from the DSO buy and sell volumes), and buyers cover their
/// own deficit from storage unless supply was in excess.
pub fn greedy_action(obs: &Observation, limits: &MarketLimits, aversion: f64) -> Action {
    let cap = limits.price_cap;
    let feed_in = obs.get(idx::DSO_BUY_PRICE) * cap;
    let utility = obs.get(idx::DSO_SELL_PRICE) * cap;
    let margin = GREEDY_MARGIN * (utility - feed_in).max(0.0);
    let to_signal =
        |p: f64| ((p - limits.price_floor) / (limits.price_cap - limits.price_floor)).clamp(0.0, 1.0);
    let a = aversion.clamp(0.0, 1.0);
    // Battery capacity relative to rated power, recovered from level / SoC.
    let soc = obs.get(idx::BATTERY_SOC);
    let ratio = if soc > 0.0 { obs.get(idx::BATTERY_LEVEL) / soc } else { 0.0 };
    let charge = obs.get(idx::BATTERY_CHARGE) * ratio;
    let discharge = obs.get(idx::BATTERY_DISCHARGE) * ratio;
    let surplus = obs.get(idx::REMAINING_SUPPLY);
    let deficit = obs.get(idx::REMAINING_DEMAND);
    let buyers_long = obs.get(idx::DSO_BUY_VOLUME) > obs.get(idx::DSO_SELL_VOLUME);
    let sellers_long = obs.get(idx::DSO_SELL_VOLUME) > obs.get(idx::DSO_BUY_VOLUME);
    let share = |want: f64, room: f64| if room > 0.0 { (want / room).clamp(0.0, 1.0) } else { 0.0 };
    if surplus > GREEDY_EPS {
        let reserve = if buyers_long { 1.0 } else { 1.0 - a };
        let want = surplus + reserve * discharge;
        Action {
            price_signal: to_signal(feed_in + margin),
            quantity_signal: -share(want, surplus + discharge),
        }
    } else if deficit > GREEDY_EPS {
        let want = if sellers_long {
            deficit + charge
        } else {
            (deficit - a * discharge).max(0.0) + (1.0 - a) * charge
        };
        Action {
            price_signal: to_signal(utility - margin),
            quantity_signal: share(want, deficit + charge),
        }
    } else {
        Action {
            price_signal: 0.5,
            quantity_signal: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub limits: MarketLimits,
    pub aversion: f64,
}

impl GreedyPolicy {
    pub fn new(limits: MarketLimits) -> Self {
        GreedyPolicy {
            limits,
            aversion: 0.0,
        }
    }

    /// Aversion grows linearly with the DSO penalty coefficient and saturates
    /// at [`FULL_AVERSION_COEFF`].
    pub fn for_penalty(limits: MarketLimits, dso_coeff: f64) -> Self {
        GreedyPolicy {
            limits,
            aversion: (dso_coeff / FULL_AVERSION_COEFF).clamp(0.0, 1.0),
        }
    }
}

impl Policy for GreedyPolicy {
    fn act(&mut self, _agent_index: usize, _agent: &AgentId, obs: &Observation) -> Action {
        greedy_action(obs, &self.limits, self.aversion)
    }

    fn name(&self) -> String {
        "greedy".into()
    }
}

/// Number of parameters of one [`LinearPolicy`].
pub const LINEAR_PARAMS: usize = 2 * OBS_DIM + 2;

/// `price = σ(w₀·o + b₀)`, `quantity = tanh(w₁·o + b₁)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    /// Row-major 2 × 42 weights followed by the two biases.
    pub params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LinearPolicy {
    pub fn zeros() -> Self {
        LinearPolicy {
            params: vec![0.0; LINEAR_PARAMS],
        }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != LINEAR_PARAMS {
            return Err(Error::Argument(format!(
                "linear policy needs {LINEAR_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("linear policy parameters must be finite".into()));
        }
        Ok(LinearPolicy { params })
    }

    pub fn action(&self, obs: &Observation) -> Action {
        let (w, b) = self.params.split_at(2 * OBS_DIM);
        let dot = |row: &[f64]| row.iter().zip(obs.as_slice()).map(|(a, x)| a * x).sum::<f64>();
        let price = sigmoid(dot(&w[..OBS_DIM]) + b[0]);
        let quantity = (dot(&w[OBS_DIM..]) + b[1]).tanh();
        Action {
            price_signal: if price.is_finite() { price.clamp(0.0, 1.0) } else { 0.5 },
            quantity_signal: if quantity.is_finite() { quantity.clamp(-1.0, 1.0) } else { 0.0 },
        }
    }
}

/// One linear policy shared by all agents, or one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTeam {
    pub members: Vec<LinearPolicy>,
}

impl LinearTeam {
    pub fn shared(policy: LinearPolicy) -> Self {
        LinearTeam {
            members: vec![policy],
        }
    }

    /// Splits a flat vector into `agents` blocks (one block when shared).
    pub fn from_flat(flat: &[f64], blocks: usize) -> Result<Self> {
        if blocks == 0 || flat.len() != blocks * LINEAR_PARAMS {
            return Err(Error::Argument(format!(
                "expected {} parameters for {blocks} policies, got {}",
                blocks * LINEAR_PARAMS,
                flat.len()
            )));
        }
        let members = flat
            .chunks(LINEAR_PARAMS)
            .map(|c| LinearPolicy::from_params(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearTeam { members })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.members.iter().flat_map(|m| m.params.iter().copied()).collect()
    }

    pub fn is_shared(&self) -> bool {
        self.members.len() == 1
    }
}

impl Policy for LinearTeam {
    fn act(&mut self, agent_index: usize, _agent: &AgentId, obs: &Observation) -> Action {
        let member = if self.is_shared() {
            &self.members[0]
        } else {
            &self.members[agent_index % self.members.len()]
        };
        member.action(obs)
    }

    fn name(&self) -> String {
        if self.is_shared() {
            "linear".into()
        } else {
            format!("linear-x{}", self.members.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::observation::OBS_DIM;

    fn obs_with(entries: &[(usize, f64)]) -> Observation {
        let mut v = [0.0; OBS_DIM];
        v[idx::DSO_BUY_PRICE] = 100.0 / 600.0;
        v[idx::DSO_SELL_PRICE] = 300.0 / 600.0;
        for (i, x) in entries {
            v[*i] = *x;
        }
        Observation(v)
    }

    #[test]
    fn zi_is_reproducible_and_bounded() {
        let obs = obs_with(&[]);
        let a: Vec<Action> = {
            let mut p = ZiPolicy::new(5);
            (0..50).map(|_| p.act(0, &AgentId::new("x"), &obs)).collect()
        };
        let mut p = ZiPolicy::new(5);
        let b: Vec<Action> = (0..50).map(|_| p.act(0, &AgentId::new("x"), &obs)).collect();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let a = zi_policy(&obs, &mut rng);
            assert!((0.0..=1.0).contains(&a.price_signal));
            assert!((-1.0..=1.0).contains(&a.quantity_signal));
        }
    }

    #[test]
    fn zi_agents_use_distinct_streams() {
        let obs = obs_with(&[]);
        let mut p = ZiPolicy::new(5);
        let a: Vec<Action> = (0..20).map(|_| p.act(0, &AgentId::new("a"), &obs)).collect();
        let b: Vec<Action> = (0..20).map(|_| p.act(1, &AgentId::new("b"), &obs)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn greedy_sides() {
        let sell = greedy_policy(&obs_with(&[(idx::REMAINING_SUPPLY, 0.3)]));
        assert!(sell.quantity_signal < 0.0);
        // 100 + 0.05 * 200 = 110
        assert!((sell.price_signal - (110.0 - 20.0) / 580.0).abs() < 1e-12);
        let buy = greedy_policy(&obs_with(&[(idx::REMAINING_DEMAND, 0.3)]));
        assert!(buy.quantity_signal > 0.0);
        assert!((buy.price_signal - (290.0 - 20.0) / 580.0).abs() < 1e-12);
        let idle = greedy_policy(&obs_with(&[(idx::BATTERY_SOC, 0.5)]));
        assert_eq!(idle.quantity_signal, 0.0);
    }

    #[test]
    fn averse_greedy_leans_on_storage() {
        // Battery twice half of rated power, 0.2 of rated power free each way.
        let battery = [
            (idx::BATTERY_SOC, 0.5),
            (idx::BATTERY_LEVEL, 0.25),
            (idx::BATTERY_CHARGE, 0.4),
            (idx::BATTERY_DISCHARGE, 0.4),
        ];
        let limits = MarketLimits::default();
        let mut entries = vec![(idx::REMAINING_DEMAND, 0.3), (idx::DSO_BUY_VOLUME, 0.3)];
        entries.extend(battery);
        let buyers_long = obs_with(&entries);
        assert_eq!(greedy_action(&buyers_long, &limits, 0.0).quantity_signal, 1.0);
        // (0.3 − 0.2) / (0.3 + 0.2)
        assert!((greedy_action(&buyers_long, &limits, 1.0).quantity_signal - 0.2).abs() < 1e-12);

        let mut entries = vec![(idx::REMAINING_DEMAND, 0.3), (idx::DSO_SELL_VOLUME, 0.3)];
        entries.extend(battery);
        let sellers_long = obs_with(&entries);
        assert_eq!(greedy_action(&sellers_long, &limits, 1.0).quantity_signal, 1.0);

        let mut entries = vec![(idx::REMAINING_SUPPLY, 0.3), (idx::DSO_SELL_VOLUME, 0.3)];
        entries.extend(battery);
        // Surplus is always offered; the reserve only when buyers were long.
        let q = greedy_action(&obs_with(&entries), &limits, 1.0).quantity_signal;
        assert!((q + 0.6).abs() < 1e-12);

        assert_eq!(GreedyPolicy::for_penalty(limits, 10.0).aversion, 1.0);
        assert_eq!(GreedyPolicy::for_penalty(limits, 0.0).aversion, 0.0);
    }

    #[test]
    fn linear_outputs_stay_in_bounds() {
        let mut params = vec![0.0; LINEAR_PARAMS];
        params[OBS_DIM] = 1e6;
        params[LINEAR_PARAMS - 2] = -1e6;
        let p = LinearPolicy::from_params(params).unwrap();
        let a = p.action(&obs_with(&[(0, 1.0)]));
        assert!((0.0..=1.0).contains(&a.price_signal));
        assert_eq!(a.quantity_signal, 1.0);
        assert_eq!(LinearPolicy::zeros().action(&obs_with(&[])), Action { price_signal: 0.5, quantity_signal: 0.0 });
        assert!(LinearPolicy::from_params(vec![f64::NAN; LINEAR_PARAMS]).is_err());
        assert!(LinearPolicy::from_params(vec![0.0; 3]).is_err());
    }

    #[test]
    fn team_flat_round_trip() {
        let flat: Vec<f64> = (0..2 * LINEAR_PARAMS).map(|i| i as f64 * 1e-3).collect();
        let team = LinearTeam::from_flat(&flat, 2).unwrap();
        assert!(!team.is_shared());
        assert_eq!(team.flat(), flat);
        assert!(LinearTeam::from_flat(&flat, 3).is_err());
    }
}
