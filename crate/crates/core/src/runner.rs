//! Drives a policy through whole episodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{Action, MarketEnv};
use crate::error::Result;
use crate::kpi::{KpiRecord, TradeTotals};
use crate::ledger::StepLedger;
use crate::policies::Policy;
use crate::reward::RewardBreakdown;
use crate::types::AgentId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub ledger: StepLedger,
    pub kpis: KpiRecord,
    pub rewards: BTreeMap<AgentId, RewardBreakdown>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    /// Undiscounted return of each agent.
    pub fn agent_returns(&self) -> BTreeMap<AgentId, f64> {
        let mut out: BTreeMap<AgentId, f64> = BTreeMap::new();
        for s in &self.steps {
            for (id, r) in &s.rewards {
                *out.entry(id.clone()).or_insert(0.0) += r.total;
            }
        }
        out
    }

    /// Sum of all agents' returns.
    pub fn social_return(&self) -> f64 {
        self.agent_returns().values().sum()
    }

    /// Mean episodic return per agent.
    pub fn mean_return(&self) -> f64 {
        let r = self.agent_returns();
        if r.is_empty() {
            0.0
        } else {
            r.values().sum::<f64>() / r.len() as f64
        }
    }

    /// Episode-level share of traded energy that stayed peer-to-peer.
    pub fn p2p_ratio(&self) -> f64 {
        let mut p2p = 0.0;
        let mut dso = 0.0;
        for s in &self.steps {
            let t = TradeTotals::from_trades(&s.ledger.trades);
            p2p += t.p2p;
            dso += t.dso();
        }
        crate::kpi::self_consumption(p2p, dso)
    }

    pub fn kpi_series(&self) -> Vec<KpiRecord> {
        self.steps.iter().map(|s| s.kpis).collect()
    }
}

/// Resets `env` with `seed` and plays one full episode.
pub fn run_episode(env: &mut MarketEnv, seed: u64, policy: &mut dyn Policy) -> Result<EpisodeRecord> {
    policy.reset(seed);
    let mut obs = env.reset(seed);
    let ids = env.agent_ids();
    let mut record = EpisodeRecord {
        seed,
        steps: Vec::with_capacity(env.scenario().episode.max_steps),
    };
    loop {
        let actions: BTreeMap<AgentId, Action> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), policy.act(i, id, &obs[id])))
            .collect();
        let r = env.step(&actions)?;
        obs = r.observations;
        record.steps.push(StepRecord {
            ledger: r.ledger,
            kpis: r.kpis,
            rewards: r.rewards,
        });
        if r.done {
            return Ok(record);
        }
    }
}
