//! Radial feeder topology, subtree flow aggregation, congestion and grid balance.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_CAPACITY_KW: f64 = 1800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: String,
    pub child: String,
    pub capacity_kw: f64,
}

/// A rooted tree of feeder nodes. Immutable once built.
#[derive(Debug, Clone)]
pub struct GridTopology {
    nodes: Vec<String>,
    edges: Vec<Edge>,
    grid_capacity_kw: f64,
    index: HashMap<String, usize>,
    /// For every node, the index of the edge connecting it to its parent.
    up_edge: Vec<Option<usize>>,
    /// Nodes ordered so that every child precedes its parent.
    leaves_first: Vec<usize>,
    root: usize,
}

impl GridTopology {
    pub fn new(edges: Vec<Edge>, grid_capacity_kw: f64) -> Result<Self> {
        if !(grid_capacity_kw.is_finite() && grid_capacity_kw > 0.0) {
            return Err(Error::Argument(format!(
                "grid capacity must be positive, got {grid_capacity_kw}"
            )));
        }
        if edges.is_empty() {
            return Err(Error::Argument("topology has no edges".into()));
        }
        let mut nodes = Vec::new();
        let mut index = HashMap::new();
        let mut intern = |name: &str, nodes: &mut Vec<String>| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| {
                nodes.push(name.to_string());
                nodes.len() - 1
            })
        };
        let mut parent_child = Vec::with_capacity(edges.len());
        for e in &edges {
            if !(e.capacity_kw.is_finite() && e.capacity_kw > 0.0) {
                return Err(Error::Argument(format!(
                    "edge {}-{} has non-positive capacity {}",
                    e.parent, e.child, e.capacity_kw
                )));
            }
            let p = intern(&e.parent, &mut nodes);
            let c = intern(&e.child, &mut nodes);
            parent_child.push((p, c));
        }
        if edges.len() + 1 != nodes.len() {
            return Err(Error::Argument(format!(
                "a tree over {} nodes needs {} edges, found {}",
                nodes.len(),
                nodes.len() - 1,
                edges.len()
            )));
        }

        let mut up_edge = vec![None; nodes.len()];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (ei, &(p, c)) in parent_child.iter().enumerate() {
            if up_edge[c].is_some() {
                return Err(Error::Argument(format!("node {} has two parents", nodes[c])));
            }
            up_edge[c] = Some(ei);
            children[p].push(c);
        }
        let roots: Vec<usize> = (0..nodes.len()).filter(|&n| up_edge[n].is_none()).collect();
        let [root] = roots[..] else {
            return Err(Error::Argument(format!(
                "topology must have exactly one root, found {}",
                roots.len()
            )));
        };

        let mut order = Vec::with_capacity(nodes.len());
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(children[n].iter().copied());
        }
        if order.len() != nodes.len() {
            return Err(Error::Argument("topology is not connected".into()));
        }
        order.reverse();

        let index = nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(GridTopology {
            nodes,
            edges,
            grid_capacity_kw,
            index,
            up_edge,
            leaves_first: order,
            root,
        })
    }

    pub fn from_path(path: &Path, grid_capacity_kw: f64) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(path, format!("cannot open topology: {e}")))?;
        Self::from_reader(file, path, grid_capacity_kw)
    }

    /// Reads a `parent,child,capacity_kw` file.
    pub fn from_reader<R: Read>(reader: R, origin: &Path, grid_capacity_kw: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut edges = Vec::new();
        for (i, row) in rdr.deserialize::<Edge>().enumerate() {
            edges.push(row.map_err(|e| Error::data(origin, format!("row {}: {e}", i + 2)))?);
        }
        Self::new(edges, grid_capacity_kw).map_err(|e| Error::data(origin, e.to_string()))
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn root(&self) -> &str {
        &self.nodes[self.root]
    }

    pub fn grid_capacity_kw(&self) -> f64 {
        self.grid_capacity_kw
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    /// Index of the edge leaving the root.
    pub fn root_edges(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.parent == self.nodes[self.root])
            .map(|(i, _)| i)
            .collect()
    }

    /// Flow on edge (p, c) is the net injection summed over the subtree under c.
    /// Positive flow points toward the root.
    pub fn edge_flows(&self, net_injection: &BTreeMap<String, f64>) -> Result<FlowResult> {
        let mut subtree = vec![0.0; self.nodes.len()];
        for (node, kw) in net_injection {
            let i = *self
                .index
                .get(node)
                .ok_or_else(|| Error::UnknownNode(node.clone()))?;
            subtree[i] += kw;
        }
        let mut edge_flow = vec![0.0; self.edges.len()];
        for &n in &self.leaves_first {
            if let Some(e) = self.up_edge[n] {
                edge_flow[e] = subtree[n];
                let p = self.index[&self.edges[e].parent];
                subtree[p] += subtree[n];
            }
        }
        let max_edge_utilization = edge_flow
            .iter()
            .zip(&self.edges)
            .map(|(f, e)| f.abs() / e.capacity_kw)
            .fold(0.0, f64::max);
        let mut result = FlowResult {
            edge_flow,
            congestion_mean: 0.0,
            max_edge_utilization,
        };
        result.congestion_mean = congestion(&result, self);
        Ok(result)
    }
}

/// Per-edge flows aligned with [`GridTopology::edges`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub edge_flow: Vec<f64>,
    pub congestion_mean: f64,
    pub max_edge_utilization: f64,
}

/// Mean of |flow| / rated capacity over all edges, clamped to [0, 1].
pub fn congestion(flows: &FlowResult, topology: &GridTopology) -> f64 {
    let edges = topology.edges();
    if edges.is_empty() {
        return 0.0;
    }
    let sum: f64 = flows
        .edge_flow
        .iter()
        .zip(edges)
        .map(|(f, e)| f.abs() / e.capacity_kw)
        .sum();
    (sum / edges.len() as f64).clamp(0.0, 1.0)
}

/// One agent's physical and traded energy in a step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyPosition {
    pub generation_kwh: f64,
    pub demand_kwh: f64,
    pub bought_kwh: f64,
    pub sold_kwh: f64,
}

/// Net energy position of the grid: Σ (G − D + bought − sold).
pub fn grid_balance(per_agent: &[EnergyPosition]) -> f64 {
    per_agent
        .iter()
        .map(|p| p.generation_kwh - p.demand_kwh + p.bought_kwh - p.sold_kwh)
        .sum()
}
