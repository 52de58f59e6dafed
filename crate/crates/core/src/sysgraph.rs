//! System-level graph abstraction and per-scheme node features.
//!
//! Every client contributes a device node, a middleware node (its
//! communication endpoint) and an edge-handler node (the server-side endpoint
//! serving it). Data flows device → middleware → handler → server. A global
//! node is linked both ways with every other node, and every node has a
//! self-loop. Two schemes on the same system share the graph exactly; only
//! the node features differ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{comm_volume, LayerRange, Lut, LutError};
use crate::types::{NetworkState, Scheme, Strategy, SystemConfig};

/// One-hot width plus the latency scalar.
pub const FEATURE_DIM: usize = 6;
pub const CATEGORY_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeCategory {
    EdgeDevice,
    Middleware,
    EdgeHandler,
    EdgeServer,
    Global,
}

impl NodeCategory {
    pub const ALL: [NodeCategory; CATEGORY_COUNT] = [
        NodeCategory::EdgeDevice,
        NodeCategory::Middleware,
        NodeCategory::EdgeHandler,
        NodeCategory::EdgeServer,
        NodeCategory::Global,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub category: NodeCategory,
    /// Client device this node belongs to, if any.
    pub device: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemGraph {
    nodes: Vec<GraphNode>,
    /// Directed `(src, dst)` pairs, self-loops included.
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("no client devices")]
    NoClients,
    #[error("no server device")]
    NoServer,
    #[error("edge ({0}, {1}) references a node outside the graph")]
    EdgeOutOfRange(usize, usize),
    #[error("client {0:?} has no model")]
    MissingModel(String),
    #[error("scheme has no strategy for client {0:?}")]
    MissingStrategy(String),
    #[error("strategy {strategy} is out of range for client {device:?}")]
    InvalidStrategy { device: String, strategy: Strategy },
    #[error(transparent)]
    Lut(#[from] LutError),
}

impl SystemGraph {
    /// Arbitrary graph, for tests and hand-built inputs.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= nodes.len() || *b >= nodes.len()) {
            return Err(GraphError::EdgeOutOfRange(a, b));
        }
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn client_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.category == NodeCategory::EdgeDevice)
            .count()
    }

    /// In-neighbour lists, self-loops included.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(src, dst) in &self.edges {
            adj[dst].push(src);
        }
        adj
    }
}

/// Builds the graph for the client devices of `config`, in config order:
/// devices, middleware, handlers, then the server and global nodes.
pub fn build_system_graph(config: &SystemConfig) -> Result<SystemGraph, GraphError> {
    let clients: Vec<&str> = config.clients().map(|d| d.device_id.as_str()).collect();
    if clients.is_empty() {
        return Err(GraphError::NoClients);
    }
    let server = config.server().ok_or(GraphError::NoServer)?;
    let k = clients.len();

    let mut nodes = Vec::with_capacity(3 * k + 2);
    for (category, prefix) in [
        (NodeCategory::EdgeDevice, "dev"),
        (NodeCategory::Middleware, "mid"),
        (NodeCategory::EdgeHandler, "handler"),
    ] {
        for c in &clients {
            nodes.push(GraphNode {
                id: format!("{prefix}:{c}"),
                category,
                device: Some(c.to_string()),
            });
        }
    }
    let server_idx = nodes.len();
    nodes.push(GraphNode {
        id: format!("server:{}", server.device_id),
        category: NodeCategory::EdgeServer,
        device: None,
    });
    let global_idx = nodes.len();
    nodes.push(GraphNode {
        id: "global".to_string(),
        category: NodeCategory::Global,
        device: None,
    });

    let mut edges = Vec::new();
    for i in 0..k {
        edges.push((i, k + i));
        edges.push((k + i, 2 * k + i));
        edges.push((2 * k + i, server_idx));
    }
    for v in 0..global_idx {
        edges.push((global_idx, v));
        edges.push((v, global_idx));
    }
    for v in 0..nodes.len() {
        edges.push((v, v));
    }
    Ok(SystemGraph { nodes, edges })
}

/// Node categories plus unnormalized latencies in ms, one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub categories: Vec<NodeCategory>,
    pub latency_ms: Vec<f64>,
}

/// Normalized per-node feature rows: one-hot category followed by the
/// Log-MinMax scaled latency.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Vec<[f64; FEATURE_DIM]>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<[f64; FEATURE_DIM]>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[[f64; FEATURE_DIM]] {
        &self.rows
    }

    pub fn node_count(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormalizerError {
    #[error("cannot fit a normalizer on an empty sample")]
    Empty,
    #[error("degenerate normalizer: all log-transformed values equal {0}")]
    Degenerate(f64),
    #[error("value {0} is outside the domain of log(x + 1)")]
    OutOfDomain(f64),
}

/// Log-MinMax scaling: `(ln(x + 1) - v_min) / (v_max - v_min)`, with `v_min`
/// and `v_max` the extremes of the log-transformed fitting data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub v_min: f64,
    pub v_max: f64,
}

impl Normalizer {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self, NormalizerError> {
        if !(v_max > v_min) {
            return Err(NormalizerError::Degenerate(v_min));
        }
        Ok(Self { v_min, v_max })
    }

    pub fn fit(values: &[f64]) -> Result<Self, NormalizerError> {
        if values.is_empty() {
            return Err(NormalizerError::Empty);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in values {
            if !(x > -1.0) || !x.is_finite() {
                return Err(NormalizerError::OutOfDomain(x));
            }
            let v = (x + 1.0).ln();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Self::new(lo, hi)
    }

    /// Not clamped: inputs outside the fitted range map outside `[0, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        ((x + 1.0).ln() - self.v_min) / (self.v_max - self.v_min)
    }
}

pub fn normalizer_fit(values: &[f64]) -> Result<Normalizer, NormalizerError> {
    Normalizer::fit(values)
}

pub fn normalizer_apply(norm: &Normalizer, x: f64) -> f64 {
    norm.apply(x)
}

/// Raw node latencies for `scheme`:
///
/// * device: its own stage (`[0, s)`, or the whole model for DP)
/// * middleware: forward volume over the link plus per-message overhead
/// * handler: the server stage (`[s, n)`, or the whole model for DP)
/// * server: sum of handler latencies
/// * global: 0
pub fn build_raw_features(
    graph: &SystemGraph,
    scheme: &Scheme,
    config: &SystemConfig,
    lut: &Lut,
) -> Result<RawFeatures, GraphError> {
    let server_kind = &config.server().ok_or(GraphError::NoServer)?.kind;
    let clients: Vec<_> = config.clients().collect();
    let k = clients.len();
    let mut latency = vec![0.0; graph.node_count()];
    let mut handler_total = 0.0;
    for (i, dev) in clients.iter().enumerate() {
        let model = config
            .model_of(&dev.device_id)
            .ok_or_else(|| GraphError::MissingModel(dev.device_id.clone()))?;
        let strategy = scheme
            .get(&dev.device_id)
            .ok_or_else(|| GraphError::MissingStrategy(dev.device_id.clone()))?;
        if !strategy.is_valid_for(model) {
            return Err(GraphError::InvalidStrategy {
                device: dev.device_id.clone(),
                strategy,
            });
        }
        let n = model.n_layers;
        let (device_range, server_range) = match strategy {
            Strategy::Dp => (LayerRange::new(0, n), LayerRange::new(0, n)),
            Strategy::Pp(s) => (LayerRange::new(0, s), LayerRange::new(s, n)),
        };
        let device_ms = lut.lookup(&dev.kind, &model.model_id, device_range, 1)?;
        let handler_ms = lut.lookup(server_kind, &model.model_id, server_range, 1)?;
        let middleware_ms = NetworkState::wire_ms(
            comm_volume(model, strategy),
            config.network.bandwidth_mbps,
        ) + config.network.per_message_overhead_ms;
        latency[i] = device_ms;
        latency[k + i] = middleware_ms;
        latency[2 * k + i] = handler_ms;
        handler_total += handler_ms;
    }
    latency[3 * k] = handler_total;
    Ok(RawFeatures {
        categories: graph.nodes().iter().map(|n| n.category).collect(),
        latency_ms: latency,
    })
}

impl RawFeatures {
    pub fn normalize(&self, norm: &Normalizer) -> FeatureMatrix {
        let rows = self
            .categories
            .iter()
            .zip(&self.latency_ms)
            .map(|(c, &ms)| {
                let mut row = [0.0; FEATURE_DIM];
                row[c.index()] = 1.0;
                row[CATEGORY_COUNT] = norm.apply(ms);
                row
            })
            .collect();
        FeatureMatrix { rows }
    }
}

pub fn build_features(
    graph: &SystemGraph,
    scheme: &Scheme,
    config: &SystemConfig,
    lut: &Lut,
    normalizer: &Normalizer,
) -> Result<FeatureMatrix, GraphError> {
    Ok(build_raw_features(graph, scheme, config, lut)?.normalize(normalizer))
}
