//! The routing game: decision layout, per-agent feasible sets, costs,
//! pseudogradients, KKT residual and policy recovery.
//!
//! Agent `i` decides `omega_i = (M_1, .., M_T, rho_1, .., rho_{T+1})`, where
//! `M_t` holds the probability mass moving along each edge at step `t` and
//! `rho_t` the probability of being at each node. The aggregate is the
//! average edge occupancy `sigma = (1/N) sum_i M^i`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{known_path, KnownPath, NodeId, RoadNetwork};
use crate::polytope::{PolytopeSpec, ProjectionError, ProjectionState, Projector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("game needs at least one agent and a horizon of at least one step")]
    Empty,
    #[error("agent {agent}: node {node} is not in the network")]
    UnknownNode { agent: usize, node: NodeId },
    #[error("agent {agent}: destination is unreachable within horizon {horizon}")]
    DestinationUnreachable { agent: usize, horizon: usize },
    #[error("agent {0}: initial distribution is not a probability vector")]
    InvalidInitialDistribution(usize),
    #[error("agent {agent}: {reason}")]
    InvalidLocalCost { agent: usize, reason: String },
    #[error("agent {0}: decision vector is not feasible")]
    InfeasibleInput(usize),
    #[error("dual variable has a negative entry")]
    NegativeDual,
    #[error("wrong vector length: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projection failed: {0}")]
    Projection(#[from] ProjectionError),
}

/// Index arithmetic for a decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.horizon * self.n_edges + (self.horizon + 1) * self.n_nodes
    }

    /// Length of the edge-mass block, which is also the coupling dimension.
    pub fn mass_len(&self) -> usize {
        self.horizon * self.n_edges
    }

    /// Index of `M_t[edge]`, `t` in `0..horizon`.
    pub fn mass(&self, t: usize, edge: usize) -> usize {
        t * self.n_edges + edge
    }

    /// Index of `rho_t[node]`, `t` in `0..=horizon` (`t = 0` is the initial distribution).
    pub fn rho(&self, t: usize, node: usize) -> usize {
        self.mass_len() + t * self.n_nodes + node
    }

    pub fn mass_block<'a>(&self, omega: &'a [f64], t: usize) -> &'a [f64] {
        &omega[t * self.n_edges..(t + 1) * self.n_edges]
    }

    pub fn rho_block<'a>(&self, omega: &'a [f64], t: usize) -> &'a [f64] {
        let s = self.rho(t, 0);
        &omega[s..s + self.n_nodes]
    }
}

/// Which feasible set an agent optimizes over.
#[derive(Debug, Clone, PartialEq)]
pub enum FeasibleSet {
    /// Start at `start` with certainty and reach `destination` with probability
    /// at least `1 - epsilon` by the end of the horizon.
    OpenLoop {
        start: NodeId,
        destination: NodeId,
        epsilon: f64,
    },
    /// Start from an arbitrary distribution; mass away from the destination
    /// may not wait on self-loops.
    RecedingHorizon {
        initial: Vec<f64>,
        destination: NodeId,
    },
}

impl FeasibleSet {
    pub fn destination(&self) -> NodeId {
        match self {
            FeasibleSet::OpenLoop { destination, .. } => *destination,
            FeasibleSet::RecedingHorizon { destination, .. } => *destination,
        }
    }
}

/// Agent-specific cost added to the congestion cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalCost {
    #[default]
    Zero,
    /// `0.5 * sum_k weights[k] * omega[k]^2`.
    Quadratic { weights: Vec<f64> },
    /// `gamma * kp_cost^T (rho_{T+1} - e_d) + stage_weight * sum_t kp_tau^T (rho_t - e_d)`,
    /// with the stage sum over `t = 1..T` and the known-path tree towards the
    /// agent's destination.
    KnownPathTerminal {
        gamma: f64,
        #[serde(default)]
        stage_weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub feasible: FeasibleSet,
    pub local_cost: LocalCost,
}

/// Immutable description of an N-agent routing game with its projectors.
#[derive(Debug, Clone)]
pub struct Game {
    network: Arc<RoadNetwork>,
    layout: Layout,
    agents: Vec<AgentSpec>,
    known_paths: Vec<KnownPath>,
    projectors: Vec<Projector>,
    capacity: Vec<f64>,
}

impl Game {
    /// Builds the game. The coupling constraint is `sum_i M^i <= N * capacity_scale * c`
    /// per edge and step, i.e. the average occupancy stays below the edge capacity.
    pub fn new(
        network: Arc<RoadNetwork>,
        horizon: usize,
        agents: Vec<AgentSpec>,
        capacity_scale: f64,
    ) -> Result<Self, GameError> {
        if agents.is_empty() || horizon == 0 {
            return Err(GameError::Empty);
        }
        let layout = Layout {
            n_nodes: network.n_nodes(),
            n_edges: network.n_edges(),
            horizon,
        };
        let n_agents = agents.len() as f64;
        let mut capacity = Vec::with_capacity(layout.mass_len());
        for _ in 0..horizon {
            capacity.extend(network.edges().iter().map(|e| n_agents * capacity_scale * e.capacity));
        }
        let mut known_paths = Vec::with_capacity(agents.len());
        let mut projectors = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            let d = agent.feasible.destination();
            if d >= layout.n_nodes {
                return Err(GameError::UnknownNode { agent: i, node: d });
            }
            validate_agent(&network, &layout, i, agent)?;
            known_paths.push(known_path(&network, d));
            let spec = feasible_polytope(&network, &layout, &agent.feasible);
            projectors.push(Projector::new(spec).map_err(|e| match e {
                ProjectionError::InfeasibleSpec => match agent.feasible {
                    FeasibleSet::OpenLoop { .. } => GameError::DestinationUnreachable { agent: i, horizon },
                    FeasibleSet::RecedingHorizon { .. } => GameError::InvalidInitialDistribution(i),
                },
                other => GameError::Projection(other),
            })?);
        }
        Ok(Self {
            network,
            layout,
            agents,
            known_paths,
            projectors,
            capacity,
        })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn network_arc(&self) -> Arc<RoadNetwork> {
        Arc::clone(&self.network)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn known_path(&self, agent: usize) -> &KnownPath {
        &self.known_paths[agent]
    }

    pub fn projector(&self, agent: usize) -> &Projector {
        &self.projectors[agent]
    }

    /// Right-hand side of the coupling constraint, one entry per (step, edge).
    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    /// Operator norm of the coupling matrix of one agent (it selects the mass block).
    pub fn coupling_norm(&self) -> f64 {
        1.0
    }

    pub fn project(&self, agent: usize, y: &[f64], state: &mut ProjectionState) -> Result<Vec<f64>, GameError> {
        Ok(self.projectors[agent].project_warm(y, state)?)
    }

    /// Projection of the uniform vector; the standard starting point.
    pub fn uniform_start(&self, agent: usize) -> Result<Vec<f64>, GameError> {
        let v = vec![1.0 / self.layout.n_nodes as f64; self.layout.dim()];
        Ok(self.projectors[agent].project(&v)?)
    }

    /// Average edge occupancy `(1/N) sum_i M^i`.
    pub fn aggregate(&self, omegas: &[Vec<f64>]) -> Vec<f64> {
        let len = self.layout.mass_len();
        let mut sigma = vec![0.0; len];
        for w in omegas {
            for (s, m) in sigma.iter_mut().zip(&w[..len]) {
                *s += m;
            }
        }
        let n = omegas.len() as f64;
        sigma.iter_mut().for_each(|s| *s /= n);
        sigma
    }

    fn check_len(&self, v: &[f64]) -> Result<(), GameError> {
        if v.len() != self.layout.dim() {
            return Err(GameError::DimensionMismatch {
                expected: self.layout.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Value of the local cost of `agent`.
    pub fn local_cost(&self, agent: usize, omega: &[f64]) -> f64 {
        match &self.agents[agent].local_cost {
            LocalCost::Zero => 0.0,
            LocalCost::Quadratic { weights } => {
                0.5 * weights.iter().zip(omega).map(|(w, x)| w * x * x).sum::<f64>()
            }
            LocalCost::KnownPathTerminal { gamma, stage_weight } => {
                let kp = &self.known_paths[agent];
                let d = kp.destination;
                let lay = self.layout;
                let shifted = |t: usize, weights: &[f64]| -> f64 {
                    let rho = lay.rho_block(omega, t);
                    (0..lay.n_nodes)
                        .map(|a| weights[a] * (rho[a] - if a == d { 1.0 } else { 0.0 }))
                        .sum::<f64>()
                };
                let mut v = gamma * shifted(lay.horizon, &kp.cost_to_go);
                if *stage_weight != 0.0 {
                    for t in 0..lay.horizon {
                        v += stage_weight * shifted(t, &kp.tau_kp);
                    }
                }
                v
            }
        }
    }

    fn add_local_gradient(&self, agent: usize, omega: &[f64], grad: &mut [f64]) {
        match &self.agents[agent].local_cost {
            LocalCost::Zero => {}
            LocalCost::Quadratic { weights } => {
                for ((g, w), x) in grad.iter_mut().zip(weights).zip(omega) {
                    *g += w * x;
                }
            }
            LocalCost::KnownPathTerminal { gamma, stage_weight } => {
                let kp = &self.known_paths[agent];
                let lay = self.layout;
                for a in 0..lay.n_nodes {
                    grad[lay.rho(lay.horizon, a)] += gamma * kp.cost_to_go[a];
                    if *stage_weight != 0.0 {
                        for t in 0..lay.horizon {
                            grad[lay.rho(t, a)] += stage_weight * kp.tau_kp[a];
                        }
                    }
                }
            }
        }
    }

    /// Lipschitz constant of the local-cost gradient.
    pub fn local_lipschitz(&self, agent: usize) -> f64 {
        match &self.agents[agent].local_cost {
            LocalCost::Quadratic { weights } => weights.iter().fold(0.0, |m, w| m.max(w.abs())),
            _ => 0.0,
        }
    }

    /// `J_i = f_i(omega_i) + sum_{t, e} M^i_{t,e} l_e(sigma_{t,e})`.
    pub fn cost(&self, agent: usize, omega: &[f64], sigma: &[f64]) -> f64 {
        let lay = self.layout;
        let edges = self.network.edges();
        let mut c = self.local_cost(agent, omega);
        for t in 0..lay.horizon {
            for (j, e) in edges.iter().enumerate() {
                let k = lay.mass(t, j);
                c += omega[k] * e.latency.value(sigma[k]);
            }
        }
        c
    }

    /// Gradient of `J_i` in `omega_i` with `sigma` depending on `omega_i` through
    /// its `1/N` share.
    pub fn gradient(&self, agent: usize, omega: &[f64], sigma: &[f64]) -> Vec<f64> {
        let (value, slope) = self.latency_tables(sigma);
        self.gradient_from_tables(agent, omega, &value, &slope)
    }

    /// Latency and its derivative at every (step, edge).
    fn latency_tables(&self, sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lay = self.layout;
        let edges = self.network.edges();
        let mut value = vec![0.0; lay.mass_len()];
        let mut slope = vec![0.0; lay.mass_len()];
        for t in 0..lay.horizon {
            for (j, e) in edges.iter().enumerate() {
                let k = lay.mass(t, j);
                value[k] = e.latency.value(sigma[k]);
                slope[k] = e.latency.d1(sigma[k]);
            }
        }
        (value, slope)
    }

    fn gradient_from_tables(&self, agent: usize, omega: &[f64], value: &[f64], slope: &[f64]) -> Vec<f64> {
        let n = self.n_agents() as f64;
        let mut g = vec![0.0; self.layout.dim()];
        for k in 0..self.layout.mass_len() {
            g[k] = value[k] + omega[k] / n * slope[k];
        }
        self.add_local_gradient(agent, omega, &mut g);
        g
    }

    /// Pseudogradient of every agent at the joint decision.
    pub fn pseudogradient(&self, omegas: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (value, slope) = self.latency_tables(&self.aggregate(omegas));
        omegas
            .par_iter()
            .enumerate()
            .map(|(i, w)| self.gradient_from_tables(i, w, &value, &slope))
            .collect()
    }

    /// Largest violation of the coupling constraint (0 if satisfied).
    pub fn coupling_violation(&self, omegas: &[Vec<f64>]) -> f64 {
        let n = omegas.len() as f64;
        self.aggregate(omegas)
            .iter()
            .zip(&self.capacity)
            .fold(0.0, |m, (s, b)| m.max(n * s - b))
    }

    /// KKT residual of a generalized equilibrium candidate. Without coupling
    /// only the stationarity term is computed and `lambda` is ignored.
    pub fn kkt_residual(&self, omegas: &[Vec<f64>], lambda: &[f64], coupled: bool) -> Result<KktReport, GameError> {
        if omegas.len() != self.n_agents() {
            return Err(GameError::DimensionMismatch {
                expected: self.n_agents(),
                got: omegas.len(),
            });
        }
        for w in omegas {
            self.check_len(w)?;
        }
        let len = self.layout.mass_len();
        if coupled {
            if lambda.len() != len {
                return Err(GameError::DimensionMismatch { expected: len, got: lambda.len() });
            }
            if lambda.iter().any(|&l| l < 0.0) {
                return Err(GameError::NegativeDual);
            }
        }
        let sigma = self.aggregate(omegas);
        let (value, slope) = self.latency_tables(&sigma);
        let stationarity = omegas
            .par_iter()
            .enumerate()
            .map(|(i, w)| -> Result<f64, GameError> {
                let mut g = self.gradient_from_tables(i, w, &value, &slope);
                if coupled {
                    for (gk, l) in g[..len].iter_mut().zip(lambda) {
                        *gk += l;
                    }
                }
                let y: Vec<f64> = w.iter().zip(&g).map(|(x, gk)| x - gk).collect();
                let p = self.projectors[i].project(&y)?;
                Ok(w.iter().zip(&p).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let (complementarity, primal_violation) = if coupled {
            let n = omegas.len() as f64;
            let mut comp = 0.0;
            let mut viol: f64 = 0.0;
            for k in 0..len {
                let slack = self.capacity[k] - n * sigma[k];
                comp += lambda[k] * slack;
                viol = viol.max(-slack);
            }
            (comp.abs(), viol)
        } else {
            (0.0, 0.0)
        };
        Ok(KktReport {
            stationarity,
            complementarity,
            primal_violation,
        })
    }

    /// Turns an occupation-measure decision into per-step Markov policies.
    pub fn recover_policies(&self, agent: usize, omega: &[f64], opts: &RecoveryOptions) -> Result<Vec<Policy>, GameError> {
        self.check_len(omega)?;
        if self.projectors[agent].spec().violation(omega) > opts.tol_feasibility {
            return Err(GameError::InfeasibleInput(agent));
        }
        let lay = self.layout;
        let net = &self.network;
        let n = lay.n_nodes;
        let mut policies = Vec::with_capacity(lay.horizon);
        for t in 0..lay.horizon {
            let m = lay.mass_block(omega, t);
            let rho = lay.rho_block(omega, t);
            let mut pol = Policy::zeros(n);
            for a in 0..n {
                let out = net.out_edges(a);
                let total: f64 = out.iter().map(|&j| m[j].max(0.0)).sum();
                if rho[a] > opts.tol_mass && total > 0.0 {
                    for &j in out {
                        pol.set(a, net.edge(j).target, m[j].max(0.0) / total);
                    }
                } else if opts.neighbor_fallback {
                    let share = 1.0 / out.len() as f64;
                    for &j in out {
                        pol.set(a, net.edge(j).target, share);
                    }
                } else {
                    for b in 0..n {
                        pol.set(a, b, 1.0 / n as f64);
                    }
                }
            }
            policies.push(pol);
        }
        Ok(policies)
    }
}

fn validate_agent(net: &RoadNetwork, lay: &Layout, i: usize, agent: &AgentSpec) -> Result<(), GameError> {
    match &agent.feasible {
        FeasibleSet::OpenLoop { start, destination, epsilon } => {
            if *start >= lay.n_nodes {
                return Err(GameError::UnknownNode { agent: i, node: *start });
            }
            if !(0.0..1.0).contains(epsilon) {
                return Err(GameError::InvalidLocalCost {
                    agent: i,
                    reason: format!("epsilon must lie in [0, 1), got {epsilon}"),
                });
            }
            match net.hop_distance(*start, *destination) {
                Some(h) if h <= lay.horizon => {}
                _ => return Err(GameError::DestinationUnreachable { agent: i, horizon: lay.horizon }),
            }
        }
        FeasibleSet::RecedingHorizon { initial, .. } => {
            let total: f64 = initial.iter().sum();
            if initial.len() != lay.n_nodes
                || initial.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
                || (total - 1.0).abs() > 1e-9
            {
                return Err(GameError::InvalidInitialDistribution(i));
            }
        }
    }
    if let LocalCost::Quadratic { weights } = &agent.local_cost {
        if weights.len() != lay.dim() {
            return Err(GameError::InvalidLocalCost {
                agent: i,
                reason: format!("expected {} quadratic weights, got {}", lay.dim(), weights.len()),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GameError::InvalidLocalCost {
                agent: i,
                reason: "quadratic weights must be finite and >= 0".into(),
            });
        }
    }
    if let LocalCost::KnownPathTerminal { gamma, stage_weight } = agent.local_cost {
        if !gamma.is_finite() || !stage_weight.is_finite() {
            return Err(GameError::InvalidLocalCost {
                agent: i,
                reason: "known-path weights must be finite".into(),
            });
        }
    }
    Ok(())
}

/// Flow-conservation polytope of one agent. Rows are ordered step by step
/// (outflow rows of step t, then inflow rows of step t) to keep the Newton
/// systems of the projector banded.
pub fn feasible_polytope(net: &RoadNetwork, lay: &Layout, set: &FeasibleSet) -> PolytopeSpec {
    let mut spec = PolytopeSpec::new(lay.dim());
    for t in 0..lay.horizon {
        for a in 0..lay.n_nodes {
            let mut row: Vec<(usize, f64)> = net.out_edges(a).iter().map(|&j| (lay.mass(t, j), 1.0)).collect();
            row.push((lay.rho(t, a), -1.0));
            spec.add_eq(row, 0.0);
        }
        for b in 0..lay.n_nodes {
            let mut row: Vec<(usize, f64)> = net.in_edges(b).iter().map(|&j| (lay.mass(t, j), 1.0)).collect();
            row.push((lay.rho(t + 1, b), -1.0));
            spec.add_eq(row, 0.0);
        }
        for j in 0..lay.n_edges {
            spec.bound(lay.mass(t, j), 0.0, f64::INFINITY);
        }
    }
    match set {
        FeasibleSet::OpenLoop { start, destination, epsilon } => {
            for a in 0..lay.n_nodes {
                spec.fix(lay.rho(0, a), if a == *start { 1.0 } else { 0.0 });
            }
            spec.bound(lay.rho(lay.horizon, *destination), 1.0 - epsilon, f64::INFINITY);
        }
        FeasibleSet::RecedingHorizon { initial, destination } => {
            for (a, &p) in initial.iter().enumerate() {
                spec.fix(lay.rho(0, a), p);
            }
            for a in (0..lay.n_nodes).filter(|a| a != destination) {
                let j = net.self_loop(a);
                for t in 0..lay.horizon {
                    spec.fix(lay.mass(t, j), 0.0);
                }
            }
        }
    }
    spec
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `max_i ||omega_i - Proj(omega_i - grad_i - A_i^T lambda)||_inf`.
    pub stationarity: f64,
    /// `|lambda^T (b - A omega)|`.
    pub complementarity: f64,
    /// `||max(A omega - b, 0)||_inf`.
    pub primal_violation: f64,
}

impl KktReport {
    pub fn residual(&self) -> f64 {
        self.stationarity.max(self.complementarity).max(self.primal_violation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    /// Nodes whose probability is at most this get the fallback policy.
    pub tol_mass: f64,
    /// Allowed constraint violation of the input.
    pub tol_feasibility: f64,
    /// Fallback is uniform over outgoing edges instead of uniform over all nodes.
    pub neighbor_fallback: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            tol_mass: 1e-12,
            tol_feasibility: 1e-8,
            neighbor_fallback: false,
        }
    }
}

/// Column-stochastic transition matrix: `prob(from, to)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n: usize,
    data: Vec<f64>,
}

impl Policy {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn prob(&self, from: NodeId, to: NodeId) -> f64 {
        self.data[from * self.n + to]
    }

    pub fn set(&mut self, from: NodeId, to: NodeId, p: f64) {
        self.data[from * self.n + to] = p;
    }

    /// Transition probabilities out of `from`.
    pub fn column(&self, from: NodeId) -> &[f64] {
        &self.data[from * self.n..(from + 1) * self.n]
    }

    /// Next node from `from` given a uniform draw `u` in `[0, 1)`.
    pub fn sample(&self, from: NodeId, u: f64) -> NodeId {
        sample_index(self.column(from), u).unwrap_or(from)
    }

    /// Distribution after one step from `rho`.
    pub fn apply(&self, rho: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; self.n];
        for (a, &p) in rho.iter().enumerate() {
            if p != 0.0 {
                for (b, q) in self.column(a).iter().enumerate() {
                    next[b] += q * p;
                }
            }
        }
        next
    }
}

/// Inverse-transform draw from nonnegative `weights` summing to one; the last
/// positive entry absorbs rounding. `None` if all weights are zero.
pub fn sample_index(weights: &[f64], u: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (k, &p) in weights.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = Some(k);
            if u < acc {
                return last;
            }
        }
    }
    last
}
