//! Directed trading network (seller → buyer, weight = energy) from a trade log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::Trade;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkEdge {
    pub seller: String,
    pub buyer: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TradeNetwork {
    pub nodes: Vec<String>,
    pub edges: Vec<NetworkEdge>,
}

impl TradeNetwork {
    /// Sums quantities per (seller, buyer) pair. `p2p_only` drops DSO trades.
    pub fn from_trades<'a>(trades: impl IntoIterator<Item = &'a Trade>, p2p_only: bool) -> Self {
        let mut weights: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut nodes = BTreeSet::new();
        for t in trades {
            if p2p_only && !t.layer.is_p2p() {
                continue;
            }
            let key = (t.seller.to_string(), t.buyer.to_string());
            nodes.insert(key.0.clone());
            nodes.insert(key.1.clone());
            *weights.entry(key).or_insert(0.0) += t.quantity;
        }
        TradeNetwork {
            nodes: nodes.into_iter().collect(),
            edges: weights
                .into_iter()
                .map(|((seller, buyer), weight)| NetworkEdge { seller, buyer, weight })
                .collect(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Graphviz source; pen width scales with the edge weight.
    pub fn to_dot(&self) -> String {
        let max = self.edges.iter().map(|e| e.weight).fold(0.0, f64::max);
        let mut out = String::from("digraph trading {\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  \"{n}\";");
        }
        for e in &self.edges {
            let width = if max > 0.0 { 1.0 + 7.0 * e.weight / max } else { 1.0 };
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [weight={}, label=\"{:.1}\", penwidth={:.3}];",
                e.seller, e.buyer, e.weight, e.weight, width
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

/// Parses a JSON-lines trade log. Blank lines are skipped; anything else
/// that is not a well-formed trade is a data error naming the line.
pub fn read_trades(path: &Path) -> Result<Vec<Trade>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(path, format!("cannot open trade log: {e}")))?;
    parse_trades(std::io::BufReader::new(file), path)
}

pub fn parse_trades<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Trade>> {
    let mut trades = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::data(origin, format!("line {n}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trade = serde_json::from_str(&line)
            .map_err(|e| Error::data(origin, format!("line {n}: {e}")))?;
        if !(t.quantity.is_finite() && t.quantity >= 0.0 && t.price.is_finite()) {
            return Err(Error::data(
                origin,
                format!("line {n}: quantity and price must be finite, quantity non-negative"),
            ));
        }
        trades.push(t);
    }
    Ok(trades)
}
