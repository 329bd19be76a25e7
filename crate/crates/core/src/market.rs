//! Order intake, double-auction clearing with midpoint pricing, DSO fallback
//! settlement and delivery reputation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assets::HORIZON;
use crate::error::{Error, Result};
use crate::types::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub agent_id: AgentId,
    pub side: Side,
    pub price: f64,
    pub quantity: f64,
    pub step: usize,
    pub arrival_rank: usize,
}

impl Order {
    pub fn new(agent_id: impl Into<AgentId>, side: Side, price: f64, quantity: f64, step: usize) -> Self {
        Order {
            agent_id: agent_id.into(),
            side,
            price,
            quantity,
            step,
            arrival_rank: 0,
        }
    }

    pub fn buy(agent_id: impl Into<AgentId>, price: f64, quantity: f64, step: usize) -> Self {
        Self::new(agent_id, Side::Buy, price, quantity, step)
    }

    pub fn sell(agent_id: impl Into<AgentId>, price: f64, quantity: f64, step: usize) -> Self {
        Self::new(agent_id, Side::Sell, price, quantity, step)
    }
}

/// Admissible price and size range for orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketLimits {
    pub price_floor: f64,
    pub price_cap: f64,
    pub max_quantity: f64,
}

impl Default for MarketLimits {
    fn default() -> Self {
        MarketLimits {
            price_floor: 20.0,
            price_cap: 600.0,
            max_quantity: 180.0,
        }
    }
}

impl MarketLimits {
    pub fn check(&self, order: &Order) -> Result<()> {
        if !(order.price.is_finite()
            && order.price >= self.price_floor
            && order.price <= self.price_cap)
        {
            return Err(Error::Argument(format!(
                "order price {} outside [{}, {}]",
                order.price, self.price_floor, self.price_cap
            )));
        }
        if !(order.quantity.is_finite()
            && order.quantity >= 0.0
            && order.quantity <= self.max_quantity)
        {
            return Err(Error::Argument(format!(
                "order quantity {} outside [0, {}]",
                order.quantity, self.max_quantity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "P2P")]
    P2p,
    /// Agent buys from the DSO at the utility price.
    #[serde(rename = "DSO_buy")]
    DsoBuy,
    /// Agent sells to the DSO at the feed-in tariff.
    #[serde(rename = "DSO_sell")]
    DsoSell,
}

impl Layer {
    pub fn is_p2p(&self) -> bool {
        matches!(self, Layer::P2p)
    }
}

/// A settled transaction. Field order is the trade-log column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub step: usize,
    pub buyer: AgentId,
    pub seller: AgentId,
    pub price: f64,
    pub quantity: f64,
    pub layer: Layer,
}

/// Output of one double-auction pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clearing {
    pub trades: Vec<Trade>,
    /// Volume-weighted mean trade price; `None` when nothing matched.
    pub clearing_price: Option<f64>,
    pub clearing_volume: f64,
    pub residual_buys: Vec<Order>,
    pub residual_sells: Vec<Order>,
}

fn reputation_of(reps: &BTreeMap<AgentId, f64>, id: &AgentId) -> f64 {
    reps.get(id).copied().unwrap_or(1.0)
}

/// Price priority, then arrival rank, then reputation (higher first), then id.
fn priority(a: &Order, b: &Order, reps: &BTreeMap<AgentId, f64>) -> Ordering {
    let by_price = match a.side {
        Side::Buy => b.price.total_cmp(&a.price),
        Side::Sell => a.price.total_cmp(&b.price),
    };
    by_price
        .then(a.arrival_rank.cmp(&b.arrival_rank))
        .then(reputation_of(reps, &b.agent_id).total_cmp(&reputation_of(reps, &a.agent_id)))
        .then(a.agent_id.cmp(&b.agent_id))
}

/// Matches buys (highest price first) against sells (lowest first) while the
/// bid covers the ask. Each match trades `min` of the residual quantities at
/// the midpoint of the two limit prices. An agent never trades with itself;
/// a self-cross is skipped in favour of the next eligible ask.
pub fn clear_market(orders: &[Order], reputations: &BTreeMap<AgentId, f64>) -> Result<Clearing> {
    let Some(step) = orders.first().map(|o| o.step) else {
        return Ok(Clearing::default());
    };
    if let Some(o) = orders.iter().find(|o| o.step != step) {
        return Err(Error::Argument(format!(
            "order book mixes steps {step} and {}",
            o.step
        )));
    }
    if let Some(o) = orders
        .iter()
        .find(|o| !(o.price.is_finite() && o.quantity.is_finite() && o.quantity >= 0.0))
    {
        return Err(Error::Argument(format!(
            "order from {} has non-finite price or invalid quantity",
            o.agent_id
        )));
    }

    let mut buys: Vec<Order> = orders
        .iter()
        .filter(|o| o.side == Side::Buy && o.quantity > 0.0)
        .cloned()
        .collect();
    let mut sells: Vec<Order> = orders
        .iter()
        .filter(|o| o.side == Side::Sell && o.quantity > 0.0)
        .cloned()
        .collect();
    buys.sort_by(|a, b| priority(a, b, reputations));
    sells.sort_by(|a, b| priority(a, b, reputations));

    let mut sell_left: Vec<f64> = sells.iter().map(|s| s.quantity).collect();
    let mut trades = Vec::new();
    let mut residual_buys = Vec::new();
    let mut first_open = 0;

    for buy in &buys {
        let mut left = buy.quantity;
        while first_open < sells.len() && sell_left[first_open] <= 0.0 {
            first_open += 1;
        }
        for (j, sell) in sells.iter().enumerate().skip(first_open) {
            if left <= 0.0 || sell.price > buy.price {
                break;
            }
            if sell_left[j] <= 0.0 || sell.agent_id == buy.agent_id {
                continue;
            }
            let qty = left.min(sell_left[j]);
            left -= qty;
            sell_left[j] -= qty;
            trades.push(Trade {
                step,
                buyer: buy.agent_id.clone(),
                seller: sell.agent_id.clone(),
                price: 0.5 * (buy.price + sell.price),
                quantity: qty,
                layer: Layer::P2p,
            });
        }
        if left > 0.0 {
            residual_buys.push(Order {
                quantity: left,
                ..buy.clone()
            });
        }
    }

    let residual_sells = sells
        .iter()
        .zip(&sell_left)
        .filter(|(_, q)| **q > 0.0)
        .map(|(s, q)| Order {
            quantity: *q,
            ..s.clone()
        })
        .collect();

    let clearing_volume: f64 = trades.iter().map(|t| t.quantity).sum();
    let clearing_price = (clearing_volume > 0.0)
        .then(|| trades.iter().map(|t| t.price * t.quantity).sum::<f64>() / clearing_volume);

    Ok(Clearing {
        trades,
        clearing_price,
        clearing_volume,
        residual_buys,
        residual_sells,
    })
}

/// Posted DSO prices for each hour of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsoTariff {
    pub feed_in: Vec<f64>,
    pub utility: Vec<f64>,
}

#[derive(Deserialize)]
struct TariffRow {
    hour: usize,
    feed_in: f64,
    utility: f64,
}

impl DsoTariff {
    pub fn new(feed_in: Vec<f64>, utility: Vec<f64>) -> Result<Self> {
        if feed_in.len() != utility.len() || feed_in.is_empty() {
            return Err(Error::Argument(
                "feed-in and utility profiles must be non-empty and of equal length".into(),
            ));
        }
        for (h, (f, u)) in feed_in.iter().zip(&utility).enumerate() {
            if !(f.is_finite() && u.is_finite() && *f >= 0.0 && f < u) {
                return Err(Error::Argument(format!(
                    "hour {h}: feed-in {f} must be below utility {u}"
                )));
            }
        }
        Ok(DsoTariff { feed_in, utility })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(path, format!("cannot open tariff: {e}")))?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows: Vec<TariffRow> = Vec::new();
        for (i, row) in rdr.deserialize().enumerate() {
            rows.push(row.map_err(|e| Error::data(origin, format!("row {}: {e}", i + 2)))?);
        }
        rows.sort_by_key(|r| r.hour);
        if rows.len() != HORIZON || rows.iter().enumerate().any(|(i, r)| r.hour != i) {
            return Err(Error::data(
                origin,
                format!("expected one row per hour 0..{HORIZON}"),
            ));
        }
        Self::new(
            rows.iter().map(|r| r.feed_in).collect(),
            rows.iter().map(|r| r.utility).collect(),
        )
        .map_err(|e| Error::data(origin, e.to_string()))
    }

    fn hour(&self, step: usize) -> usize {
        step % self.feed_in.len()
    }

    pub fn feed_in_at(&self, step: usize) -> f64 {
        self.feed_in[self.hour(step)]
    }

    pub fn utility_at(&self, step: usize) -> f64 {
        self.utility[self.hour(step)]
    }

    pub fn midpoint_at(&self, step: usize) -> f64 {
        0.5 * (self.feed_in_at(step) + self.utility_at(step))
    }
}

/// Settles unmatched buys at the utility price and unmatched sells at the
/// feed-in tariff, preserving quantities.
pub fn settle_dso(
    residual_buys: &[Order],
    residual_sells: &[Order],
    tariff: &DsoTariff,
    step: usize,
) -> Vec<Trade> {
    let buys = residual_buys
        .iter()
        .filter(|o| o.quantity > 0.0)
        .map(|o| Trade {
            step,
            buyer: o.agent_id.clone(),
            seller: AgentId::dso(),
            price: tariff.utility_at(step),
            quantity: o.quantity,
            layer: Layer::DsoBuy,
        });
    let sells = residual_sells
        .iter()
        .filter(|o| o.quantity > 0.0)
        .map(|o| Trade {
            step,
            buyer: AgentId::dso(),
            seller: o.agent_id.clone(),
            price: tariff.feed_in_at(step),
            quantity: o.quantity,
            layer: Layer::DsoSell,
        });
    buys.chain(sells).collect()
}

/// Assigns `arrival_rank` from a seeded random permutation.
pub fn arrival_shuffle<R: Rng + ?Sized>(mut orders: Vec<Order>, rng: &mut R) -> Vec<Order> {
    let mut ranks: Vec<usize> = (0..orders.len()).collect();
    ranks.shuffle(rng);
    for (order, rank) in orders.iter_mut().zip(ranks) {
        order.arrival_rank = rank;
    }
    orders
}

/// Moving average of delivered/cleared ratios over the last `window` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reputation {
    pub agent_id: AgentId,
    pub score: f64,
    pub window: usize,
    history: VecDeque<f64>,
}

impl Reputation {
    pub fn new(agent_id: impl Into<AgentId>, window: usize) -> Self {
        Reputation {
            agent_id: agent_id.into(),
            score: 1.0,
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn update(&self, cleared_kwh: f64, delivered_kwh: f64) -> Result<Reputation> {
        if !(cleared_kwh.is_finite() && delivered_kwh.is_finite())
            || cleared_kwh < 0.0
            || delivered_kwh < 0.0
        {
            return Err(Error::Argument(format!(
                "reputation inputs must be non-negative, got cleared={cleared_kwh} delivered={delivered_kwh}"
            )));
        }
        if delivered_kwh > cleared_kwh * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Argument(format!(
                "delivered {delivered_kwh} exceeds cleared {cleared_kwh}"
            )));
        }
        let ratio = if cleared_kwh > 0.0 {
            (delivered_kwh / cleared_kwh).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let mut next = self.clone();
        next.history.push_back(ratio);
        while next.history.len() > next.window {
            next.history.pop_front();
        }
        next.score = next.history.iter().sum::<f64>() / next.history.len() as f64;
        Ok(next)
    }
}
