#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use lemsim_core::assets::Flex;
use lemsim_core::grid::{FlowResult, GridTopology};
use lemsim_core::kpi::{KpiInputs, KpiRecord};
use lemsim_core::ledger::{AgentStep, StepLedger};
use lemsim_core::market::{Layer, Order, Side, Trade};
use lemsim_core::AgentId;
use rand::Rng;

/// A trade seen by the oracle, with the two limit prices it matched.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrade {
    pub buyer: AgentId,
    pub seller: AgentId,
    pub bid: f64,
    pub ask: f64,
    pub quantity: f64,
}

fn rep(reps: &BTreeMap<AgentId, f64>, id: &AgentId) -> f64 {
    *reps.get(id).unwrap_or(&1.0)
}

/// True when `a` has strictly higher queue priority than `b` on the same side.
fn ahead(a: &Order, b: &Order, reps: &BTreeMap<AgentId, f64>) -> bool {
    let better_price = match a.side {
        Side::Buy => a.price > b.price,
        Side::Sell => a.price < b.price,
    };
    if better_price {
        return true;
    }
    if a.price != b.price {
        return false;
    }
    if a.arrival_rank != b.arrival_rank {
        return a.arrival_rank < b.arrival_rank;
    }
    let (ra, rb) = (rep(reps, &a.agent_id), rep(reps, &b.agent_id));
    if ra != rb {
        return ra > rb;
    }
    a.agent_id < b.agent_id
}

/// Index of the best-ranked entry among `candidates`.
fn best_of(orders: &[Order], candidates: &[usize], reps: &BTreeMap<AgentId, f64>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &i in candidates {
        match best {
            Some(b) if !ahead(&orders[i], &orders[b], reps) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Brute-force greedy double auction. Repeatedly takes the best open bid and
/// fills it from the best compatible ask (another agent, ask ≤ bid) until the
/// bid is filled or nothing compatible is left.
pub fn oracle_clear(orders: &[Order], reps: &BTreeMap<AgentId, f64>) -> Vec<OracleTrade> {
    let book: Vec<Order> = orders.iter().filter(|o| o.quantity > 0.0).cloned().collect();
    let mut left: Vec<f64> = book.iter().map(|o| o.quantity).collect();
    let mut open_bids: Vec<usize> = (0..book.len()).filter(|&i| book[i].side == Side::Buy).collect();
    let mut trades = Vec::new();
    while let Some(b) = best_of(&book, &open_bids, reps) {
        open_bids.retain(|&i| i != b);
        loop {
            if left[b] <= 0.0 {
                break;
            }
            let asks: Vec<usize> = (0..book.len())
                .filter(|&j| {
                    book[j].side == Side::Sell
                        && left[j] > 0.0
                        && book[j].price <= book[b].price
                        && book[j].agent_id != book[b].agent_id
                })
                .collect();
            let Some(s) = best_of(&book, &asks, reps) else { break };
            let q = left[b].min(left[s]);
            left[b] -= q;
            left[s] -= q;
            trades.push(OracleTrade {
                buyer: book[b].agent_id.clone(),
                seller: book[s].agent_id.clone(),
                bid: book[b].price,
                ask: book[s].price,
                quantity: q,
            });
        }
    }
    trades
}

pub fn oracle_volume(trades: &[OracleTrade]) -> f64 {
    trades.iter().map(|t| t.quantity).sum()
}

pub fn oracle_vwap(trades: &[OracleTrade]) -> Option<f64> {
    let v = oracle_volume(trades);
    (v > 0.0).then(|| trades.iter().map(|t| 0.5 * (t.bid + t.ask) * t.quantity).sum::<f64>() / v)
}

/// Volume where the stepped demand and supply curves cross. Equals the greedy
/// volume when no agent sits on both sides of the book.
pub fn crossing_volume(orders: &[Order]) -> f64 {
    let mut bids: Vec<(f64, f64)> = orders
        .iter()
        .filter(|o| o.side == Side::Buy && o.quantity > 0.0)
        .map(|o| (o.price, o.quantity))
        .collect();
    let mut asks: Vec<(f64, f64)> = orders
        .iter()
        .filter(|o| o.side == Side::Sell && o.quantity > 0.0)
        .map(|o| (o.price, o.quantity))
        .collect();
    bids.sort_by(|a, b| b.0.total_cmp(&a.0));
    asks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut i, mut j) = (0, 0);
    let (mut bl, mut al) = (
        bids.first().map_or(0.0, |b| b.1),
        asks.first().map_or(0.0, |a| a.1),
    );
    let mut volume = 0.0;
    while i < bids.len() && j < asks.len() && bids[i].0 >= asks[j].0 {
        let q = bl.min(al);
        volume += q;
        bl -= q;
        al -= q;
        if bl <= 0.0 {
            i += 1;
            bl = bids.get(i).map_or(0.0, |b| b.1);
        }
        if al <= 0.0 {
            j += 1;
            al = asks.get(j).map_or(0.0, |a| a.1);
        }
    }
    volume
}

/// Random book of up to 16 orders. Prices are whole numbers and quantities
/// quarter-kWh so that every sum the auction forms is exact in f64.
pub fn random_book<R: Rng>(rng: &mut R, distinct_agents: bool) -> (Vec<Order>, BTreeMap<AgentId, f64>) {
    let n = rng.random_range(0..=16);
    let pool = rng.random_range(1..=6);
    let mut orders = Vec::with_capacity(n);
    for k in 0..n {
        let agent = if distinct_agents {
            format!("A{k:02}")
        } else {
            format!("A{:02}", rng.random_range(0..pool))
        };
        let side = if rng.random_bool(0.5) { Side::Buy } else { Side::Sell };
        let price = rng.random_range(60..=140) as f64;
        let quantity = if rng.random_bool(0.05) {
            0.0
        } else {
            rng.random_range(1..=80) as f64 * 0.25
        };
        let mut o = Order::new(agent.as_str(), side, price, quantity, 3);
        o.arrival_rank = rng.random_range(0..3);
        orders.push(o);
    }
    let mut reps = BTreeMap::new();
    for o in &orders {
        reps.entry(o.agent_id.clone())
            .or_insert_with(|| rng.random_range(0..=4) as f64 * 0.25);
    }
    (orders, reps)
}

/// Flow on every edge from explicit subtree membership: a node belongs to
/// the subtree of `c` when `c` lies on its path to the root.
pub fn oracle_flows(topo: &GridTopology, injection: &BTreeMap<String, f64>) -> Vec<f64> {
    let parent: HashMap<&str, &str> = topo
        .edges()
        .iter()
        .map(|e| (e.child.as_str(), e.parent.as_str()))
        .collect();
    let under = |node: &str, top: &str| -> bool {
        let mut cur = node;
        loop {
            if cur == top {
                return true;
            }
            match parent.get(cur) {
                Some(p) => cur = p,
                None => return false,
            }
        }
    };
    topo.edges()
        .iter()
        .map(|e| {
            injection
                .iter()
                .filter(|(n, _)| under(n, &e.child))
                .map(|(_, v)| *v)
                .sum()
        })
        .collect()
}

/// Random injections on a random subset of non-root nodes. `dyadic` draws multiples
/// of 1/64 so that any summation order gives the same bits.
pub fn random_injection<R: Rng>(rng: &mut R, topo: &GridTopology, dyadic: bool) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for n in topo.nodes().iter().filter(|n| n.as_str() != topo.root()) {
        if rng.random_bool(0.6) {
            let v = if dyadic {
                rng.random_range(-6400..=6400) as f64 / 64.0
            } else {
                rng.random_range(-100.0..100.0)
            };
            out.insert(n.clone(), v);
        }
    }
    out
}

/// Σ (G − D + bought − sold), written out per agent.
pub fn balance_of(agents: &[AgentStep]) -> f64 {
    let mut b = 0.0;
    for a in agents {
        b += a.generation_kwh - a.demand_kwh;
        b += a.p2p_bought_kwh + a.dso_bought_kwh;
        b -= a.p2p_sold_kwh + a.dso_sold_kwh;
    }
    b
}

/// Grid balance after the agent's trades are cancelled and everyone else is
/// left as is.
pub fn counterfactual_balance(ledger: &StepLedger, id: &AgentId) -> f64 {
    let agents: Vec<AgentStep> = ledger
        .agents
        .iter()
        .map(|a| {
            if &a.agent_id == id {
                AgentStep {
                    p2p_bought_kwh: 0.0,
                    p2p_sold_kwh: 0.0,
                    dso_bought_kwh: 0.0,
                    dso_sold_kwh: 0.0,
                    ..a.clone()
                }
            } else {
                a.clone()
            }
        })
        .collect();
    balance_of(&agents)
}

/// A self-consistent random ledger: P2P trades between fleet members plus
/// DSO top-ups, with agent totals and grid balance derived from the trades.
pub fn random_ledger<R: Rng>(rng: &mut R) -> StepLedger {
    let n = rng.random_range(2..=8);
    let mut agents: Vec<AgentStep> = (0..n)
        .map(|i| AgentStep {
            agent_id: AgentId::new(format!("P{i}")),
            node_id: "800".into(),
            capacity_kw: rng.random_range(50.0..200.0),
            generation_kwh: rng.random_range(0.0..150.0),
            demand_kwh: rng.random_range(0.0..150.0),
            flex: Flex {
                sellable_kwh: rng.random_range(0.0..100.0),
                buyable_kwh: rng.random_range(0.0..100.0),
            },
            ..Default::default()
        })
        .collect();
    let (feed_in, utility) = (rng.random_range(40.0..90.0), rng.random_range(100.0..160.0));
    let mut trades = Vec::new();
    for _ in 0..rng.random_range(0..6) {
        let b = rng.random_range(0..n);
        let s = (b + rng.random_range(1..n)) % n;
        let q = rng.random_range(0.1..40.0);
        trades.push(Trade {
            step: 0,
            buyer: agents[b].agent_id.clone(),
            seller: agents[s].agent_id.clone(),
            price: rng.random_range(feed_in..utility),
            quantity: q,
            layer: Layer::P2p,
        });
        agents[b].p2p_bought_kwh += q;
        agents[s].p2p_sold_kwh += q;
    }
    for a in agents.iter_mut() {
        let q = rng.random_range(0.0..30.0);
        if rng.random_bool(0.5) {
            a.dso_bought_kwh = q;
            trades.push(Trade {
                step: 0,
                buyer: a.agent_id.clone(),
                seller: AgentId::dso(),
                price: utility,
                quantity: q,
                layer: Layer::DsoBuy,
            });
        } else {
            a.dso_sold_kwh = q;
            trades.push(Trade {
                step: 0,
                buyer: AgentId::dso(),
                seller: a.agent_id.clone(),
                price: feed_in,
                quantity: q,
                layer: Layer::DsoSell,
            });
        }
    }
    let p2p: Vec<&Trade> = trades.iter().filter(|t| t.layer.is_p2p()).collect();
    let clearing_volume: f64 = p2p.iter().map(|t| t.quantity).sum();
    let clearing_price = (clearing_volume > 0.0)
        .then(|| p2p.iter().map(|t| t.price * t.quantity).sum::<f64>() / clearing_volume);
    let grid_balance = balance_of(&agents);
    StepLedger {
        step: 0,
        orders: Vec::new(),
        trades,
        clearing_price,
        clearing_volume,
        feed_in,
        utility,
        price_floor: 0.0,
        price_cap: 600.0,
        grid_capacity_kw: 1800.0,
        agents,
        injections: BTreeMap::new(),
        flows: FlowResult {
            edge_flow: Vec::new(),
            congestion_mean: 0.0,
            max_edge_utilization: 0.0,
        },
        grid_balance,
    }
}

/// KPI record from random trades, orders and histories spanning several
/// orders of magnitude.
pub fn fuzzed_kpis<R: Rng>(rng: &mut R) -> KpiRecord {
    let scale = 10f64.powi(rng.random_range(-3..4));
    let trades: Vec<Trade> = (0..rng.random_range(0..10))
        .map(|_| Trade {
            step: 0,
            buyer: "A".into(),
            seller: "B".into(),
            price: rng.random_range(0.0..600.0),
            quantity: rng.random_range(0.0..1.0) * scale,
            layer: [Layer::P2p, Layer::DsoBuy, Layer::DsoSell][rng.random_range(0..3)],
        })
        .collect();
    let orders: Vec<Order> = (0..rng.random_range(0..10))
        .map(|_| {
            let side = if rng.random_bool(0.5) { Side::Buy } else { Side::Sell };
            Order::new("A", side, rng.random_range(0.0..600.0), rng.random_range(0.0..1.0) * scale, 0)
        })
        .collect();
    let prices: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0.0..600.0)).collect();
    let volumes: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0.0..1.0) * scale).collect();
    KpiRecord::compute(&KpiInputs {
        trades: &trades,
        orders: &orders,
        price_history: &prices,
        volume_history: &volumes,
        grid_balance: rng.random_range(-1.0..1.0) * scale * 5.0,
        congestion: rng.random_range(0.0..1.0),
        available_flex_kwh: rng.random_range(0.0..1.0) * scale * 5.0,
        grid_capacity_kw: rng.random_range(0.1..1.0) * scale * 5.0,
        loss_fraction: rng.random_range(0.0..0.1),
        window: rng.random_range(1..12),
    })
}
