//! Road graph, latency families and known-path (shortest-path tree) construction.
//!
//! Edges are kept in lexicographic `(source, target)` order. Every flat vector in
//! the crate that is indexed by edge uses this order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no nodes or no edges")]
    Empty,
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(NodeId, NodeId, usize),
    #[error("edge ({0}, {1}) listed twice")]
    DuplicateEdge(NodeId, NodeId),
    #[error("node {0} has no self-loop")]
    MissingSelfLoop(NodeId),
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("invalid parameters on edge {edge:?}: {reason}")]
    InvalidParams { edge: (NodeId, NodeId), reason: String },
    #[error("cannot read network file: {0}")]
    Io(String),
    #[error("malformed network file: {0}")]
    Parse(String),
}

/// Latency parameters as written in a network file.
///
/// `Bpt` is `tau * (1 + 0.15 ((sigma + zeta) / c)^(xi + 1))`, `Monomial` is
/// `tau + k / (xi + 1) * (sigma + zeta)^(xi + 1)` and `Affine` is `tau + k sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LatencyParams {
    Bpt { tau: f64, c: f64, zeta: f64, xi: f64 },
    Monomial { tau: f64, k: f64, zeta: f64, xi: f64 },
    Affine { tau: f64, k: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyFamily {
    Bpt,
    Monomial,
    Affine,
}

impl LatencyParams {
    pub fn family(&self) -> LatencyFamily {
        match self {
            LatencyParams::Bpt { .. } => LatencyFamily::Bpt,
            LatencyParams::Monomial { .. } => LatencyFamily::Monomial,
            LatencyParams::Affine { .. } => LatencyFamily::Affine,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and >= 0, got {v}"))
            }
        };
        match *self {
            LatencyParams::Bpt { tau, c, zeta, xi } => {
                nonneg("tau", tau)?;
                nonneg("zeta", zeta)?;
                nonneg("xi", xi)?;
                if !(c.is_finite() && c > 0.0) {
                    return Err(format!("c must be > 0, got {c}"));
                }
                Ok(())
            }
            LatencyParams::Monomial { tau, k, zeta, xi } => {
                nonneg("tau", tau)?;
                nonneg("k", k)?;
                nonneg("zeta", zeta)?;
                nonneg("xi", xi)
            }
            LatencyParams::Affine { tau, k } => {
                nonneg("tau", tau)?;
                nonneg("k", k)
            }
        }
    }

    /// Converts to the monomial form used everywhere else.
    pub fn normalize(&self) -> Latency {
        match *self {
            LatencyParams::Bpt { tau, c, zeta, xi } => Latency {
                family: LatencyFamily::Bpt,
                tau,
                k: 0.15 * tau * (xi + 1.0) / c.powf(xi + 1.0),
                zeta,
                xi,
            },
            LatencyParams::Monomial { tau, k, zeta, xi } => Latency {
                family: LatencyFamily::Monomial,
                tau,
                k,
                zeta,
                xi,
            },
            LatencyParams::Affine { tau, k } => Latency {
                family: LatencyFamily::Affine,
                tau,
                k,
                zeta: 0.0,
                xi: 0.0,
            },
        }
    }

    /// Evaluates the latency in its native (unconverted) form.
    pub fn native_value(&self, sigma: f64) -> f64 {
        match *self {
            LatencyParams::Bpt { tau, c, zeta, xi } => {
                tau * (1.0 + 0.15 * ((sigma + zeta) / c).powf(xi + 1.0))
            }
            LatencyParams::Monomial { tau, k, zeta, xi } => {
                tau + k / (xi + 1.0) * (sigma + zeta).powf(xi + 1.0)
            }
            LatencyParams::Affine { tau, k } => tau + k * sigma,
        }
    }
}

/// Latency in monomial form `tau + k / (xi + 1) * (sigma + zeta)^(xi + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    /// Family the parameters were given in.
    pub family: LatencyFamily,
    pub tau: f64,
    pub k: f64,
    pub zeta: f64,
    pub xi: f64,
}

impl Latency {
    pub fn affine(tau: f64, k: f64) -> Self {
        LatencyParams::Affine { tau, k }.normalize()
    }

    pub fn value(&self, sigma: f64) -> f64 {
        self.tau + self.k / (self.xi + 1.0) * (sigma + self.zeta).powf(self.xi + 1.0)
    }

    pub fn d1(&self, sigma: f64) -> f64 {
        self.k * (sigma + self.zeta).powf(self.xi)
    }

    pub fn d2(&self, sigma: f64) -> f64 {
        if self.xi == 0.0 {
            0.0
        } else {
            self.k * self.xi * (sigma + self.zeta).powf(self.xi - 1.0)
        }
    }
}

/// One edge of a network description prior to validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSpec {
    pub source: NodeId,
    pub target: NodeId,
    pub params: LatencyParams,
    /// Maximum average occupancy allowed on the edge (fraction of all vehicles).
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub params: LatencyParams,
    pub latency: Latency,
    pub capacity: f64,
}

impl Edge {
    pub fn is_self_loop(&self) -> bool {
        self.source == self.target
    }
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    n_nodes: usize,
    edges: Vec<Edge>,
    index: HashMap<(NodeId, NodeId), usize>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    self_loops: Vec<usize>,
}

/// Validates and builds a network: canonical edge order, self-loops on every
/// node, strong connectivity, per-family parameter checks.
pub fn build_network(n_nodes: usize, specs: &[EdgeSpec]) -> Result<RoadNetwork, NetworkError> {
    if n_nodes == 0 || specs.is_empty() {
        return Err(NetworkError::Empty);
    }
    let mut specs = specs.to_vec();
    specs.sort_by_key(|e| (e.source, e.target));
    for w in specs.windows(2) {
        if (w[0].source, w[0].target) == (w[1].source, w[1].target) {
            return Err(NetworkError::DuplicateEdge(w[0].source, w[0].target));
        }
    }

    let mut edges = Vec::with_capacity(specs.len());
    for s in &specs {
        if s.source >= n_nodes || s.target >= n_nodes {
            return Err(NetworkError::NodeOutOfRange(s.source, s.target, n_nodes));
        }
        let invalid = |reason: String| NetworkError::InvalidParams {
            edge: (s.source, s.target),
            reason,
        };
        s.params.validate().map_err(invalid)?;
        if !(s.capacity.is_finite() && s.capacity > 0.0) {
            return Err(invalid(format!("capacity must be > 0, got {}", s.capacity)));
        }
        if let LatencyParams::Affine { tau, k } = s.params {
            if s.source == s.target && (tau != 0.0 || k != 0.0) {
                return Err(invalid("affine self-loops must have tau = 0 and k = 0".into()));
            }
            if s.source != s.target && tau <= 0.0 {
                return Err(invalid("affine roads must have tau > 0".into()));
            }
        }
        edges.push(Edge {
            source: s.source,
            target: s.target,
            params: s.params,
            latency: s.params.normalize(),
            capacity: s.capacity,
        });
    }

    let mut index = HashMap::with_capacity(edges.len());
    let mut out_edges = vec![Vec::new(); n_nodes];
    let mut in_edges = vec![Vec::new(); n_nodes];
    let mut self_loops = vec![usize::MAX; n_nodes];
    for (j, e) in edges.iter().enumerate() {
        index.insert((e.source, e.target), j);
        out_edges[e.source].push(j);
        in_edges[e.target].push(j);
        if e.is_self_loop() {
            self_loops[e.source] = j;
        }
    }
    if let Some(a) = self_loops.iter().position(|&j| j == usize::MAX) {
        return Err(NetworkError::MissingSelfLoop(a));
    }

    let net = RoadNetwork {
        n_nodes,
        edges,
        index,
        out_edges,
        in_edges,
        self_loops,
    };
    let forward = net.bfs_depths(0, false);
    let backward = net.bfs_depths(0, true);
    if forward.iter().chain(backward.iter()).any(Option::is_none) {
        return Err(NetworkError::NotStronglyConnected);
    }
    Ok(net)
}

impl RoadNetwork {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, j: usize) -> &Edge {
        &self.edges[j]
    }

    pub fn edge_index(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.index.get(&(a, b)).copied()
    }

    pub fn out_edges(&self, a: NodeId) -> &[usize] {
        &self.out_edges[a]
    }

    pub fn in_edges(&self, b: NodeId) -> &[usize] {
        &self.in_edges[b]
    }

    pub fn self_loop(&self, a: NodeId) -> usize {
        self.self_loops[a]
    }

    pub fn is_affine(&self) -> bool {
        self.edges
            .iter()
            .all(|e| e.params.family() == LatencyFamily::Affine)
    }

    /// Smallest free-flow time over edges that are not self-loops.
    pub fn tau_min(&self) -> f64 {
        self.edges
            .iter()
            .filter(|e| !e.is_self_loop())
            .map(|e| e.latency.tau)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn k_max(&self) -> f64 {
        self.edges.iter().map(|e| e.latency.k).fold(0.0, f64::max)
    }

    /// Number of transitions needed to go from `from` to `to`, ignoring self-loops.
    pub fn hop_distance(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.bfs_depths(from, false)[to]
    }

    fn bfs_depths(&self, root: NodeId, reverse: bool) -> Vec<Option<usize>> {
        let mut depth = vec![None; self.n_nodes];
        depth[root] = Some(0);
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            let d = depth[a].unwrap_or(0);
            let adj = if reverse { &self.in_edges[a] } else { &self.out_edges[a] };
            for &j in adj {
                let e = &self.edges[j];
                let next = if reverse { e.source } else { e.target };
                if depth[next].is_none() {
                    depth[next] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        depth
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            nodes: self.n_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| (e.source, e.target, e.params, e.capacity))
                .collect(),
        }
    }

    pub fn from_file(file: &NetworkFile) -> Result<Self, NetworkError> {
        let specs: Vec<EdgeSpec> = file
            .edges
            .iter()
            .map(|&(source, target, params, capacity)| EdgeSpec {
                source,
                target,
                params,
                capacity,
            })
            .collect();
        build_network(file.nodes, &specs)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = fs::read_to_string(path)
            .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        let file: NetworkFile =
            serde_json::from_str(&text).map_err(|e| NetworkError::Parse(e.to_string()))?;
        Self::from_file(&file)
    }
}

/// On-disk network description.
///
/// ```json
/// { "nodes": 3,
///   "edges": [[0, 1, {"family": "affine", "tau": 1.0, "k": 0.5}, 0.2], ...] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: usize,
    pub edges: Vec<(NodeId, NodeId, LatencyParams, f64)>,
}

/// Next-hop tree towards one destination together with the per-node edge
/// weight and cost-to-go along it.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownPath {
    pub destination: NodeId,
    pub next_hop: Vec<NodeId>,
    /// Free-flow time of the edge `(a, next_hop[a])`.
    pub tau_kp: Vec<f64>,
    /// Sum of `tau_kp` along the path from `a` to the destination.
    pub cost_to_go: Vec<f64>,
    /// Every node reaches the destination after at most this many hops.
    pub path_bound: usize,
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    node: NodeId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const TIE_TOL: f64 = 1e-12;

/// Shortest-path tree to `destination` under free-flow times.
///
/// Self-loops are not relaxed; `next_hop[destination] = destination`. Among
/// equal-cost next hops the smallest node id wins.
pub fn known_path(net: &RoadNetwork, destination: NodeId) -> KnownPath {
    let n = net.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut next_hop = vec![usize::MAX; n];
    let mut settled = vec![false; n];
    dist[destination] = 0.0;
    next_hop[destination] = destination;
    let mut heap = BinaryHeap::from([Frontier {
        dist: 0.0,
        node: destination,
    }]);
    while let Some(Frontier { dist: d, node: b }) = heap.pop() {
        if settled[b] || d > dist[b] {
            continue;
        }
        settled[b] = true;
        for &j in net.in_edges(b) {
            let e = net.edge(j);
            let a = e.source;
            if a == b || settled[a] {
                continue;
            }
            let cand = d + e.latency.tau;
            let scale = TIE_TOL * cand.abs().max(1.0);
            if cand < dist[a] - scale {
                dist[a] = cand;
                next_hop[a] = b;
                heap.push(Frontier { dist: cand, node: a });
            } else if (cand - dist[a]).abs() <= scale && b < next_hop[a] {
                next_hop[a] = b;
            }
        }
    }

    let tau_kp: Vec<f64> = (0..n)
        .map(|a| {
            let j = net
                .edge_index(a, next_hop[a])
                .expect("next hop follows an edge");
            net.edge(j).latency.tau
        })
        .collect();

    // hop depth in the tree, then accumulate cost-to-go from the root outward
    let mut depth = vec![usize::MAX; n];
    depth[destination] = 0;
    let mut order = Vec::with_capacity(n);
    for a in 0..n {
        let mut chain = Vec::new();
        let mut cur = a;
        while depth[cur] == usize::MAX {
            chain.push(cur);
            cur = next_hop[cur];
        }
        let mut d = depth[cur];
        for &c in chain.iter().rev() {
            d += 1;
            depth[c] = d;
        }
    }
    order.extend(0..n);
    order.sort_by_key(|&a| depth[a]);
    let mut cost_to_go = vec![0.0; n];
    for &a in &order {
        if a != destination {
            cost_to_go[a] = tau_kp[a] + cost_to_go[next_hop[a]];
        }
    }
    let path_bound = depth.iter().copied().max().unwrap_or(0);
    KnownPath {
        destination,
        next_hop,
        tau_kp,
        cost_to_go,
        path_bound,
    }
}

impl KnownPath {
    /// Node sequence from `start` to the destination (inclusive).
    pub fn path_from(&self, start: NodeId) -> Vec<NodeId> {
        let mut path = vec![start];
        let mut cur = start;
        while cur != self.destination {
            cur = self.next_hop[cur];
            path.push(cur);
        }
        path
    }
}
