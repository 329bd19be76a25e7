//! Cross-entropy search over linear policies.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::env::MarketEnv;
use crate::error::{Error, Result};
use crate::policies::{LinearTeam, LINEAR_PARAMS};
use crate::runner::run_episode;
use crate::types::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_std: f64,
    /// Added to the refitted standard deviation every iteration.
    pub extra_noise: f64,
    pub seed: u64,
    /// Episode seeds every candidate is scored on (common random numbers).
    pub eval_seeds: Vec<u64>,
    /// Keep last iteration's elites in the selection pool.
    pub elitism: bool,
    /// One policy for all agents; otherwise one block per agent.
    pub shared: bool,
    /// Score a single agent's return instead of the fleet mean.
    pub fitness_agent: Option<AgentId>,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 32,
            elite_fraction: 0.25,
            iterations: 30,
            init_std: 0.5,
            extra_noise: 0.0,
            seed: 42,
            eval_seeds: vec![42],
            elitism: true,
            shared: true,
            fitness_agent: None,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("cem.{field}"), msg));
        if self.population < 4 {
            return bad("population", format!("must be at least 4, got {}", self.population));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return bad(
                "elite_fraction",
                format!("must lie in (0, 1], got {}", self.elite_fraction),
            );
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std", format!("must be non-negative, got {}", self.init_std));
        }
        if !(self.extra_noise.is_finite() && self.extra_noise >= 0.0) {
            return bad("extra_noise", format!("must be non-negative, got {}", self.extra_noise));
        }
        if self.eval_seeds.is_empty() {
            return bad("eval_seeds", "needs at least one seed".into());
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.population as f64).round() as usize).clamp(1, self.population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub params: Vec<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub population_mean: f64,
    pub elite_mean: f64,
    pub best: f64,
}

/// Search distribution plus history; enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemState {
    pub iteration: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub elites: Vec<Candidate>,
    pub best: Option<Candidate>,
    pub curve: Vec<CurvePoint>,
}

impl CemState {
    pub fn initial(dim: usize, init_std: f64) -> Self {
        CemState {
            iteration: 0,
            mean: vec![0.0; dim],
            std: vec![init_std; dim],
            elites: Vec::new(),
            best: None,
            curve: Vec::new(),
        }
    }
}

/// Draws `population` parameter vectors for iteration `iteration`.
pub fn sample_population(state: &CemState, cfg: &CemConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(state.iteration as u64);
    (0..cfg.population)
        .map(|_| {
            state
                .mean
                .iter()
                .zip(&state.std)
                .map(|(m, s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * z
                })
                .collect()
        })
        .collect()
}

/// One sample → evaluate → select → refit round.
///
/// Candidates with a non-finite score are dropped. Returns the new state and
/// the scored population.
pub fn cem_iteration(
    state: &CemState,
    cfg: &CemConfig,
    evaluate: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<(CemState, Vec<Candidate>)> {
    cfg.validate()?;
    let samples = sample_population(state, cfg);
    let scored: Vec<Candidate> = samples
        .into_par_iter()
        .map(|params| {
            let fitness = evaluate(&params);
            Candidate { params, fitness }
        })
        .collect();
    let population: Vec<Candidate> = scored
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| {
            if c.fitness.is_finite() {
                Some(c)
            } else {
                log::warn!("iteration {}: candidate {i} returned {}; discarded", state.iteration + 1, c.fitness);
                None
            }
        })
        .collect();
    if population.is_empty() {
        return Err(Error::State(format!(
            "iteration {}: every candidate returned a non-finite score",
            state.iteration + 1
        )));
    }

    let mut pool = population.clone();
    if cfg.elitism {
        pool.extend(state.elites.iter().cloned());
    }
    pool.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
    let elites: Vec<Candidate> = pool.into_iter().take(cfg.elite_count()).collect();

    let dim = state.mean.len();
    let n = elites.len() as f64;
    let mut mean = vec![0.0; dim];
    for e in &elites {
        for (m, p) in mean.iter_mut().zip(&e.params) {
            *m += p / n;
        }
    }
    let mut std = vec![0.0; dim];
    for e in &elites {
        for ((s, p), m) in std.iter_mut().zip(&e.params).zip(&mean) {
            *s += (p - m) * (p - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt() + cfg.extra_noise;
    }

    let top = &elites[0];
    let best = match &state.best {
        Some(b) if b.fitness >= top.fitness => b.clone(),
        _ => top.clone(),
    };
    let mean_of = |c: &[Candidate]| c.iter().map(|c| c.fitness).sum::<f64>() / c.len() as f64;
    let point = CurvePoint {
        iteration: state.iteration + 1,
        population_mean: mean_of(&population),
        elite_mean: mean_of(&elites),
        best: best.fitness,
    };
    log::info!(
        "cem iteration {}: population {:.4}, elites {:.4}, best {:.4}",
        point.iteration,
        point.population_mean,
        point.elite_mean,
        point.best
    );
    let mut curve = state.curve.clone();
    curve.push(point);
    Ok((
        CemState {
            iteration: state.iteration + 1,
            mean,
            std,
            elites,
            best: Some(best),
            curve,
        },
        population,
    ))
}

/// Mean over `seeds` of the fleet-mean (or one agent's) episodic return.
pub fn evaluate_team(
    scenario: &Arc<Scenario>,
    team: &LinearTeam,
    seeds: &[u64],
    fitness_agent: Option<&AgentId>,
) -> Result<f64> {
    let mut env = MarketEnv::new(Arc::clone(scenario));
    let mut total = 0.0;
    for &seed in seeds {
        let mut policy = team.clone();
        let ep = run_episode(&mut env, seed, &mut policy)?;
        total += match fitness_agent {
            None => ep.mean_return(),
            Some(id) => ep
                .agent_returns()
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownAgent(id.to_string()))?,
        };
    }
    Ok(total / seeds.len() as f64)
}

pub struct CemResult {
    pub best: LinearTeam,
    pub best_fitness: f64,
    pub state: CemState,
}

impl CemResult {
    pub fn curve(&self) -> &[CurvePoint] {
        &self.state.curve
    }
}

fn blocks(scenario: &Scenario, cfg: &CemConfig) -> usize {
    if cfg.shared {
        1
    } else {
        scenario.fleet.len()
    }
}

/// Runs `cfg.iterations` rounds, starting fresh or from `resume`.
pub fn cem_train(scenario: Arc<Scenario>, cfg: &CemConfig, resume: Option<CemState>) -> Result<CemResult> {
    cfg.validate()?;
    if let Some(id) = &cfg.fitness_agent {
        if !scenario.fleet.iter().any(|a| &a.agent_id == id) {
            return Err(Error::config("cem.fitness_agent", format!("unknown agent {id}")));
        }
    }
    let nblocks = blocks(&scenario, cfg);
    let dim = nblocks * LINEAR_PARAMS;
    let mut state = match resume {
        Some(s) => {
            if s.mean.len() != dim || s.std.len() != dim {
                return Err(Error::Argument(format!(
                    "checkpoint has {} parameters, this run needs {dim}",
                    s.mean.len()
                )));
            }
            s
        }
        None => CemState::initial(dim, cfg.init_std),
    };
    let evaluate = |params: &[f64]| -> f64 {
        LinearTeam::from_flat(params, nblocks)
            .and_then(|team| evaluate_team(&scenario, &team, &cfg.eval_seeds, cfg.fitness_agent.as_ref()))
            .unwrap_or(f64::NAN)
    };
    for _ in 0..cfg.iterations {
        state = cem_iteration(&state, cfg, &evaluate)?.0;
    }
    let best = match &state.best {
        Some(b) => b.clone(),
        None => Candidate {
            params: state.mean.clone(),
            fitness: evaluate(&state.mean),
        },
    };
    Ok(CemResult {
        best: LinearTeam::from_flat(&best.params, nblocks)?,
        best_fitness: best.fitness,
        state,
    })
}

/// Trained policy plus everything needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub shared: bool,
    pub params: Vec<f64>,
    pub best_fitness: f64,
    pub cem: CemConfig,
    pub state: CemState,
}

impl Checkpoint {
    pub fn from_result(result: &CemResult, cfg: &CemConfig, config_hash: &str) -> Self {
        Checkpoint {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed: cfg.seed,
            iteration: result.state.iteration,
            shared: cfg.shared,
            params: result.best.flat(),
            best_fitness: result.best_fitness,
            cem: cfg.clone(),
            state: result.state.clone(),
        }
    }

    pub fn policy(&self) -> Result<LinearTeam> {
        let blocks = self.params.len() / LINEAR_PARAMS;
        LinearTeam::from_flat(&self.params, blocks.max(1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("cannot encode checkpoint: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path, format!("cannot read checkpoint: {e}")))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::data(path, format!("bad checkpoint: {e}")))?;
        ck.policy().map_err(|e| Error::data(path, e.to_string()))?;
        Ok(ck)
    }
}
