//! System-level indicators computed every step. The same record is broadcast
//! to every agent's observation and feeds the cooperation factor of the reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Layer, Order, Side, Trade};

pub const DEFAULT_WINDOW: usize = 6;
pub const DEFAULT_LOSS_FRACTION: f64 = 0.02;

/// Per-step KPI vector. Field order is the KPI CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KpiRecord {
    pub social_welfare: f64,
    pub liquidity: f64,
    pub bid_ask_spread: f64,
    pub price_volatility: f64,
    pub imbalance: f64,
    pub congestion: f64,
    pub grid_balance: f64,
    pub self_consumption: f64,
    pub flexibility_utilization: f64,
    pub coordination_score: f64,
    pub coordination_convergence: f64,
    pub p2p_trade_ratio: f64,
    pub grid_balance_index: f64,
}

impl KpiRecord {
    pub const FIELDS: [&'static str; 13] = [
        "social_welfare",
        "liquidity",
        "bid_ask_spread",
        "price_volatility",
        "imbalance",
        "congestion",
        "grid_balance",
        "self_consumption",
        "flexibility_utilization",
        "coordination_score",
        "coordination_convergence",
        "p2p_trade_ratio",
        "grid_balance_index",
    ];

    pub fn values(&self) -> [f64; 13] {
        [
            self.social_welfare,
            self.liquidity,
            self.bid_ask_spread,
            self.price_volatility,
            self.imbalance,
            self.congestion,
            self.grid_balance,
            self.self_consumption,
            self.flexibility_utilization,
            self.coordination_score,
            self.coordination_convergence,
            self.p2p_trade_ratio,
            self.grid_balance_index,
        ]
    }

    /// The KPIs that are fractions and must stay inside [0, 1].
    pub fn fractions(&self) -> [(&'static str, f64); 8] {
        [
            ("imbalance", self.imbalance),
            ("congestion", self.congestion),
            ("self_consumption", self.self_consumption),
            ("flexibility_utilization", self.flexibility_utilization),
            ("coordination_score", self.coordination_score),
            ("coordination_convergence", self.coordination_convergence),
            ("p2p_trade_ratio", self.p2p_trade_ratio),
            ("grid_balance_index", self.grid_balance_index),
        ]
    }
}

/// Everything a KPI record is derived from.
#[derive(Debug, Clone)]
pub struct KpiInputs<'a> {
    pub trades: &'a [Trade],
    pub orders: &'a [Order],
    /// Defined clearing prices so far, current step last.
    pub price_history: &'a [f64],
    /// Clearing volumes so far, current step last.
    pub volume_history: &'a [f64],
    pub grid_balance: f64,
    pub congestion: f64,
    pub available_flex_kwh: f64,
    pub grid_capacity_kw: f64,
    pub loss_fraction: f64,
    pub window: usize,
}

impl KpiRecord {
    pub fn compute(inputs: &KpiInputs<'_>) -> KpiRecord {
        let totals = TradeTotals::from_trades(inputs.trades);
        let imbalance = imbalance(totals.bought(), totals.sold(), inputs.grid_capacity_kw);
        let self_consumption = self_consumption(totals.p2p, totals.dso());
        KpiRecord {
            social_welfare: social_welfare(inputs.trades),
            liquidity: liquidity(inputs.trades),
            bid_ask_spread: bid_ask_spread(inputs.orders).value,
            price_volatility: price_volatility(inputs.price_history, inputs.window),
            imbalance,
            congestion: inputs.congestion,
            grid_balance: inputs.grid_balance,
            self_consumption,
            flexibility_utilization: flexibility_utilization(totals.p2p, inputs.available_flex_kwh),
            coordination_score: coordination_score(imbalance),
            coordination_convergence: coordination_convergence(inputs.volume_history, inputs.window),
            p2p_trade_ratio: self_consumption,
            grid_balance_index: grid_balance_index(
                inputs.grid_balance,
                inputs.loss_fraction * totals.p2p,
                totals.dso(),
                inputs.grid_capacity_kw,
            ),
        }
    }
}

/// Traded volume split by layer, in kWh.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeTotals {
    pub p2p: f64,
    /// Agents buying from the DSO.
    pub dso_buy: f64,
    /// Agents selling to the DSO.
    pub dso_sell: f64,
}

impl TradeTotals {
    pub fn from_trades(trades: &[Trade]) -> Self {
        let mut t = TradeTotals::default();
        for trade in trades {
            match trade.layer {
                Layer::P2p => t.p2p += trade.quantity,
                Layer::DsoBuy => t.dso_buy += trade.quantity,
                Layer::DsoSell => t.dso_sell += trade.quantity,
            }
        }
        t
    }

    pub fn dso(&self) -> f64 {
        self.dso_buy + self.dso_sell
    }

    /// Energy bought by agents across both layers.
    pub fn bought(&self) -> f64 {
        self.p2p + self.dso_buy
    }

    /// Energy sold by agents across both layers.
    pub fn sold(&self) -> f64 {
        self.p2p + self.dso_sell
    }
}

pub fn social_welfare(trades: &[Trade]) -> f64 {
    trades.iter().map(|t| t.price * t.quantity).sum()
}

pub fn liquidity(trades: &[Trade]) -> f64 {
    trades.iter().map(|t| t.quantity).sum()
}

/// Mean ask minus mean bid. `defined` is false when either side is empty,
/// in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub value: f64,
    pub defined: bool,
}

pub fn bid_ask_spread(orders: &[Order]) -> Spread {
    let mean = |side: Side| {
        let prices: Vec<f64> = orders
            .iter()
            .filter(|o| o.side == side)
            .map(|o| o.price)
            .collect();
        (!prices.is_empty()).then(|| prices.iter().sum::<f64>() / prices.len() as f64)
    };
    match (mean(Side::Sell), mean(Side::Buy)) {
        (Some(ask), Some(bid)) => Spread {
            value: ask - bid,
            defined: true,
        },
        _ => Spread {
            value: 0.0,
            defined: false,
        },
    }
}

pub(crate) fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn tail(xs: &[f64], window: usize) -> &[f64] {
    &xs[xs.len().saturating_sub(window.max(1))..]
}

/// Population standard deviation of the last `window` clearing prices.
pub fn price_volatility(price_history: &[f64], window: usize) -> f64 {
    population_std(tail(price_history, window))
}

pub fn imbalance(total_buy_kwh: f64, total_sell_kwh: f64, grid_capacity_kw: f64) -> f64 {
    ((total_buy_kwh - total_sell_kwh).abs() / grid_capacity_kw).clamp(0.0, 1.0)
}

/// Share of transacted energy that stayed peer-to-peer.
pub fn self_consumption(q_p2p: f64, q_dso: f64) -> f64 {
    let total = q_p2p + q_dso;
    if total > 0.0 {
        (q_p2p / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn flexibility_utilization(q_p2p: f64, q_available: f64) -> f64 {
    if q_available > 0.0 {
        (q_p2p / q_available).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn coordination_score(imbalance: f64) -> f64 {
    1.0 - imbalance
}

/// `1 / (1 + σ)` of the last `window` clearing volumes.
pub fn coordination_convergence(volume_history: &[f64], window: usize) -> f64 {
    1.0 / (1.0 + population_std(tail(volume_history, window)))
}

pub fn grid_balance_index(
    grid_balance: f64,
    losses_kwh: f64,
    dso_volume_kwh: f64,
    grid_capacity_kw: f64,
) -> f64 {
    1.0 - ((grid_balance.abs() + losses_kwh + dso_volume_kwh) / grid_capacity_kw).min(1.0)
}

/// Pearson correlation between a system signal and an action series.
/// Zero when either series is constant.
pub fn agent_responsiveness(kpi_series: &[f64], action_series: &[f64]) -> Result<f64> {
    if kpi_series.len() != action_series.len() {
        return Err(Error::Argument(format!(
            "series lengths differ: {} vs {}",
            kpi_series.len(),
            action_series.len()
        )));
    }
    if kpi_series.len() < 2 {
        return Err(Error::Argument("correlation needs at least two samples".into()));
    }
    let n = kpi_series.len() as f64;
    let mx = kpi_series.iter().sum::<f64>() / n;
    let my = action_series.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in kpi_series.iter().zip(action_series) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
