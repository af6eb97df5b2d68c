//! Receding-horizon routing on affine networks: the shifted linear system
//! `x+ = B u`, `x = P u`, its potential, the known-path terminal cost and the
//! closed loop that repeatedly applies the first step of a Nash equilibrium.
//!
//! States are `x_i = rho_i - e_d` and inputs `u_i = M_i - e_(d,d)`, one block per
//! agent; collective quantities are slices of per-agent vectors.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::forb::{solve_ne_from, ForbError, ForbOptions, Init};
use crate::game::{AgentSpec, FeasibleSet, Game, GameError, Layout, LocalCost, Policy, RecoveryOptions};
use crate::network::{known_path, KnownPath, NodeId, RoadNetwork};
use crate::rng::seeded_rng;

#[derive(Debug, Error)]
pub enum RecedingError {
    #[error("edge {edge} does not have an affine latency with free self-loops")]
    NonAffineLatency { edge: usize },
    #[error("the smallest free-flow time over roads is not positive")]
    ZeroMinTau,
    #[error("policy column of node {node} for agent {agent} sums to {sum} at step {step}")]
    NonStochasticColumn { step: usize, agent: usize, node: NodeId, sum: f64 },
    #[error("invalid distribution for agent {0}")]
    InvalidDistribution(usize),
    #[error("destination {node} of agent {agent} is not a node")]
    UnknownNode { agent: usize, node: NodeId },
    #[error("closed loop needs at least one step and one vehicle")]
    EmptyRun,
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Forb(#[from] ForbError),
}

/// Incidence structure of the shifted system plus the cost data of the
/// affine latencies (`tau` is the linear term, `k` the diagonal of `C`).
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    network: Arc<RoadNetwork>,
    destinations: Vec<NodeId>,
    known_paths: Vec<KnownPath>,
    tau: Vec<f64>,
    k: Vec<f64>,
}

pub fn build_lifted_system(network: Arc<RoadNetwork>, destinations: &[NodeId]) -> Result<LiftedSystem, RecedingError> {
    for (j, e) in network.edges().iter().enumerate() {
        let lat = &e.latency;
        let affine = lat.xi == 0.0 && lat.zeta == 0.0;
        let free_loop = !e.is_self_loop() || (lat.tau == 0.0 && lat.k == 0.0);
        if !affine || !free_loop || lat.k < 0.0 {
            return Err(RecedingError::NonAffineLatency { edge: j });
        }
    }
    for (i, &d) in destinations.iter().enumerate() {
        if d >= network.n_nodes() {
            return Err(RecedingError::UnknownNode { agent: i, node: d });
        }
    }
    let known_paths = destinations.iter().map(|&d| known_path(&network, d)).collect();
    let tau = network.edges().iter().map(|e| e.latency.tau).collect();
    let k = network.edges().iter().map(|e| e.latency.k).collect();
    Ok(LiftedSystem {
        network,
        destinations: destinations.to_vec(),
        known_paths,
        tau,
        k,
    })
}

impl LiftedSystem {
    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn n_agents(&self) -> usize {
        self.destinations.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.network.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.network.n_edges()
    }

    pub fn destinations(&self) -> &[NodeId] {
        &self.destinations
    }

    pub fn known_path(&self, agent: usize) -> &KnownPath {
        &self.known_paths[agent]
    }

    /// Linear cost per edge (`tau_bar`).
    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Diagonal of `C`.
    pub fn congestion(&self) -> &[f64] {
        &self.k
    }

    /// `B u`: mass arriving at each node.
    pub fn apply_b(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes()];
        for (e, v) in self.network.edges().iter().zip(u) {
            out[e.target] += v;
        }
        out
    }

    /// `P u`: mass leaving each node.
    pub fn apply_p(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes()];
        for (e, v) in self.network.edges().iter().zip(u) {
            out[e.source] += v;
        }
        out
    }

    /// Dense `B`, row per node.
    pub fn b_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_edges()]; self.n_nodes()];
        for (j, e) in self.network.edges().iter().enumerate() {
            m[e.target][j] = 1.0;
        }
        m
    }

    /// Dense `P`, row per node.
    pub fn p_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_edges()]; self.n_nodes()];
        for (j, e) in self.network.edges().iter().enumerate() {
            m[e.source][j] = 1.0;
        }
        m
    }

    pub fn rho_eq(&self, agent: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_nodes()];
        v[self.destinations[agent]] = 1.0;
        v
    }

    pub fn u_eq(&self, agent: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_edges()];
        v[self.network.self_loop(self.destinations[agent])] = 1.0;
        v
    }

    /// `x = rho - e_d`.
    pub fn state_of(&self, agent: usize, rho: &[f64]) -> Vec<f64> {
        let mut x = rho.to_vec();
        x[self.destinations[agent]] -= 1.0;
        x
    }

    /// `u = M - e_(d,d)`.
    pub fn input_of(&self, agent: usize, mass: &[f64]) -> Vec<f64> {
        let mut u = mass.to_vec();
        u[self.network.self_loop(self.destinations[agent])] -= 1.0;
        u
    }

    pub fn contains_x(&self, agent: usize, x: &[f64], tol: f64) -> bool {
        let d = self.destinations[agent];
        x.len() == self.n_nodes()
            && x.iter().enumerate().all(|(a, v)| v + if a == d { 1.0 } else { 0.0 } >= -tol)
            && x.iter().sum::<f64>().abs() <= tol
    }

    pub fn contains_u(&self, agent: usize, u: &[f64], tol: f64) -> bool {
        let d = self.destinations[agent];
        let dd = self.network.self_loop(d);
        u.len() == self.n_edges()
            && self.network.edges().iter().zip(u).enumerate().all(|(j, (e, v))| {
                if j == dd {
                    v + 1.0 >= -tol
                } else if e.is_self_loop() {
                    v.abs() <= tol
                } else {
                    *v >= -tol
                }
            })
    }

    /// `(x, u)` in `X_i x U_i` with `P u = x`.
    pub fn contains_z(&self, agent: usize, x: &[f64], u: &[f64], tol: f64) -> bool {
        self.contains_x(agent, x, tol)
            && self.contains_u(agent, u, tol)
            && self.apply_p(u).iter().zip(x).all(|(p, v)| (p - v).abs() <= tol)
    }

    /// `x+ = B u` for every agent.
    pub fn step(&self, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        u.iter().map(|ui| self.apply_b(ui)).collect()
    }

    /// States `x_1 .. x_{T+1}` generated from `x_in` by the input sequence.
    pub fn rollout(&self, x_in: &[Vec<f64>], inputs: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x_in.to_vec());
        for u in inputs {
            states.push(self.step(u));
        }
        states
    }
}

/// Local costs of the receding-horizon game: `gamma * kp_cost^T x` at the end
/// of the horizon and `stage_weight * kp_tau^T x` at every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct RecedingCosts {
    pub gamma: f64,
    #[serde(default)]
    pub stage_weight: f64,
}

impl RecedingCosts {
    pub fn local_cost(&self) -> LocalCost {
        LocalCost::KnownPathTerminal {
            gamma: self.gamma,
            stage_weight: self.stage_weight,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Terminal part of the potential, `sum_i gamma * kp_cost_i^T x_i`.
pub fn terminal_potential(sys: &LiftedSystem, costs: &RecedingCosts, x: &[Vec<f64>]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, xi)| costs.gamma * dot(&sys.known_paths[i].cost_to_go, xi))
        .sum()
}

/// Stage part of the potential:
/// `(1/2N) (sum_i u_i^T C u_i + |sum_i u_i|_C^2) + sum_i (f_i(x_i) + tau^T u_i)`.
pub fn stage_potential(sys: &LiftedSystem, costs: &RecedingCosts, x: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let n = u.len() as f64;
    let e = sys.n_edges();
    let mut total = vec![0.0; e];
    let mut own = 0.0;
    let mut linear = 0.0;
    for ui in u {
        for j in 0..e {
            total[j] += ui[j];
            own += sys.k[j] * ui[j] * ui[j];
            linear += sys.tau[j] * ui[j];
        }
    }
    let shared: f64 = total.iter().zip(&sys.k).map(|(s, k)| k * s * s).sum();
    let local: f64 = if costs.stage_weight != 0.0 {
        x.iter()
            .enumerate()
            .map(|(i, xi)| costs.stage_weight * dot(&sys.known_paths[i].tau_kp, xi))
            .sum()
    } else {
        0.0
    };
    (own + shared) / (2.0 * n) + local + linear
}

/// Potential of the finite-horizon game started at `x_in`.
pub fn potential(sys: &LiftedSystem, costs: &RecedingCosts, x_in: &[Vec<f64>], inputs: &[Vec<Vec<f64>>]) -> f64 {
    let states = sys.rollout(x_in, inputs);
    let stage: f64 = inputs
        .iter()
        .zip(&states)
        .map(|(u, x)| stage_potential(sys, costs, x, u))
        .sum();
    stage + terminal_potential(sys, costs, &states[inputs.len()])
}

/// Smallest terminal gain that makes the known-path terminal cost a control
/// Lyapunov function: `1 + L_S + k_max (N + 1) / (2 N tau_min)`.
pub fn terminal_cost_gain(network: &RoadNetwork, n_agents: usize, stage_lipschitz: f64) -> Result<f64, RecedingError> {
    let tau_min = network.tau_min();
    if !(tau_min > 0.0) {
        return Err(RecedingError::ZeroMinTau);
    }
    let n = n_agents as f64;
    Ok(1.0 + stage_lipschitz + network.k_max() * (n + 1.0) / (2.0 * n * tau_min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnownPathMode {
    /// All mass at `a` takes the edge `(a, next_hop(a))`.
    #[default]
    Consistent,
    /// Input entry `x_a - [a == d]` on the known-path edge, as literally
    /// written in the original construction; generally outside `U_i`.
    Literal,
}

/// Input that moves all mass of one agent one edge along its known path.
pub fn known_path_input(sys: &LiftedSystem, agent: usize, x: &[f64], mode: KnownPathMode) -> Vec<f64> {
    let kp = &sys.known_paths[agent];
    let net = &sys.network;
    let mut u = vec![0.0; sys.n_edges()];
    for (a, &xa) in x.iter().enumerate() {
        let j = net.edge_index(a, kp.next_hop[a]).expect("known path follows edges");
        u[j] = match mode {
            KnownPathMode::Consistent => xa,
            KnownPathMode::Literal => xa - if a == kp.destination { 1.0 } else { 0.0 },
        };
    }
    u
}

pub fn known_path_inputs(sys: &LiftedSystem, x: &[Vec<f64>], mode: KnownPathMode) -> Vec<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(i, xi)| known_path_input(sys, i, xi, mode))
        .collect()
}

/// Slacks of the Lyapunov inequalities at a state; each is nonnegative when
/// the inequality holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovDiagnostics {
    /// `-gamma kp_tau^T x - (pF(x+) - pF(x))` under the known-path input.
    pub terminal_descent: f64,
    /// `pS(x, u_kp(x)) - tau_min |x| / (N n)`.
    pub stage_lower_bound: f64,
    /// `-pS(x, u_kp(x)) - (pF(x+) - pF(x))`.
    pub terminal_vs_stage: f64,
}

impl LyapunovDiagnostics {
    pub fn min_slack(&self) -> f64 {
        self.terminal_descent.min(self.stage_lower_bound).min(self.terminal_vs_stage)
    }
}

/// Euclidean norm of the collective state.
pub fn state_norm(x: &[Vec<f64>]) -> f64 {
    x.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `pS(x, u) - tau_min |x| / (N n)`.
pub fn stage_bound_slack(sys: &LiftedSystem, costs: &RecedingCosts, x: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let bound = sys.network.tau_min() * state_norm(x) / (x.len() * sys.n_nodes()) as f64;
    stage_potential(sys, costs, x, u) - bound
}

pub fn lyapunov_diagnostics(sys: &LiftedSystem, costs: &RecedingCosts, x: &[Vec<f64>]) -> LyapunovDiagnostics {
    let u = known_path_inputs(sys, x, KnownPathMode::Consistent);
    let next = sys.step(&u);
    let change = terminal_potential(sys, costs, &next) - terminal_potential(sys, costs, x);
    let kp_tau: f64 = x
        .iter()
        .enumerate()
        .map(|(i, xi)| dot(&sys.known_paths[i].tau_kp, xi))
        .sum();
    let stage = stage_potential(sys, costs, x, &u);
    LyapunovDiagnostics {
        terminal_descent: -costs.gamma * kp_tau - change,
        stage_lower_bound: stage_bound_slack(sys, costs, x, &u),
        terminal_vs_stage: -stage - change,
    }
}

/// Slacks of the structural relations of `Z_i` for one agent:
/// road inputs sum to minus the destination self-loop input (returned as
/// `-|difference|`), `x_d >= u_(d,d)`, and `-x_d >= max_a x_a`.
pub fn stage_relations(sys: &LiftedSystem, agent: usize, x: &[f64], u: &[f64]) -> [f64; 3] {
    let d = sys.destinations[agent];
    let dd = sys.network.self_loop(d);
    let roads: f64 = sys
        .network
        .edges()
        .iter()
        .zip(u)
        .filter(|(e, _)| !e.is_self_loop())
        .map(|(_, v)| v)
        .sum();
    let max_x = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [-(roads + u[dd]).abs(), x[d] - u[dd], -x[d] - max_x]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaOptions {
    pub horizon: usize,
    pub costs: RecedingCosts,
    pub forb: ForbOptions,
    pub recovery: RecoveryOptions,
    /// Use the best iterate when the solver hits its iteration limit.
    pub accept_unconverged: bool,
}

/// First step of a Nash equilibrium of the finite-horizon game.
#[derive(Debug, Clone)]
pub struct KappaOutput {
    /// Shifted first inputs `u_1^i`.
    pub inputs: Vec<Vec<f64>>,
    /// First-step occupancies `M_1^i`.
    pub masses: Vec<Vec<f64>>,
    /// First-step policies `Pi_1^i`.
    pub policies: Vec<Policy>,
    /// Full decision vectors, reusable as a warm start.
    pub omegas: Vec<Vec<f64>>,
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn at_destination(rho: &[f64], d: NodeId) -> bool {
    (rho[d] - 1.0).abs() <= 1e-12
}

/// The finite-horizon receding game at `rho` (no capacity coupling).
pub fn receding_game(
    network: Arc<RoadNetwork>,
    destinations: &[NodeId],
    rho: &[Vec<f64>],
    horizon: usize,
    costs: &RecedingCosts,
) -> Result<Game, RecedingError> {
    let agents = rho
        .iter()
        .zip(destinations)
        .map(|(r, &d)| AgentSpec {
            feasible: FeasibleSet::RecedingHorizon {
                initial: r.clone(),
                destination: d,
            },
            local_cost: costs.local_cost(),
        })
        .collect();
    Ok(Game::new(network, horizon, agents, 1.0)?)
}

/// Solves the finite-horizon game at `rho` and returns its first step. When
/// every agent already sits at its destination the answer is the self-loop.
pub fn kappa(
    sys: &LiftedSystem,
    rho: &[Vec<f64>],
    opts: &KappaOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<KappaOutput, RecedingError> {
    let n = sys.n_nodes();
    for (i, r) in rho.iter().enumerate() {
        let total: f64 = r.iter().sum();
        if r.len() != n || r.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(RecedingError::InvalidDistribution(i));
        }
    }
    let lay = Layout {
        n_nodes: n,
        n_edges: sys.n_edges(),
        horizon: opts.horizon,
    };
    if rho.iter().zip(&sys.destinations).all(|(r, &d)| at_destination(r, d)) {
        let masses: Vec<Vec<f64>> = (0..rho.len()).map(|i| sys.u_eq(i)).collect();
        let mut stay = Policy::zeros(n);
        for a in 0..n {
            stay.set(a, a, 1.0);
        }
        let policies = vec![stay; rho.len()];
        let omegas = masses
            .iter()
            .zip(rho)
            .map(|(m, r)| {
                let mut w = Vec::with_capacity(lay.dim());
                for _ in 0..lay.horizon {
                    w.extend_from_slice(m);
                }
                for _ in 0..=lay.horizon {
                    w.extend_from_slice(r);
                }
                w
            })
            .collect();
        return Ok(KappaOutput {
            inputs: vec![vec![0.0; sys.n_edges()]; rho.len()],
            masses,
            policies,
            omegas,
            kkt: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let game = receding_game(Arc::clone(&sys.network), &sys.destinations, rho, opts.horizon, &opts.costs)?;
    let init = Init {
        omegas: match warm {
            Some(w) => w.to_vec(),
            None => (0..rho.len()).map(|i| game.uniform_start(i)).collect::<Result<_, _>>()?,
        },
        lambda: Vec::new(),
    };
    let (result, converged) = match solve_ne_from(&game, &init, &opts.forb) {
        Ok(r) => (r, true),
        Err(ForbError::MaxIterExceeded(best)) if opts.accept_unconverged => {
            log::warn!(
                "receding game not solved to tolerance after {} iterations (KKT {:e})",
                best.iterations,
                best.kkt.residual()
            );
            (*best, false)
        }
        Err(e) => return Err(e.into()),
    };
    let mut inputs = Vec::with_capacity(rho.len());
    let mut masses = Vec::with_capacity(rho.len());
    let mut policies = Vec::with_capacity(rho.len());
    for (i, w) in result.omegas.iter().enumerate() {
        let m = lay.mass_block(w, 0).to_vec();
        inputs.push(sys.input_of(i, &m));
        masses.push(m);
        let mut pol = game.recover_policies(i, w, &opts.recovery)?;
        policies.push(pol.swap_remove(0));
    }
    Ok(KappaOutput {
        inputs,
        masses,
        policies,
        omegas: result.omegas,
        kkt: result.kkt.residual(),
        iterations: result.iterations,
        converged,
    })
}

/// Moves every block one step forward in time, repeating the last one; a
/// warm start for the next receding-horizon solve.
pub fn shift_decision(lay: &Layout, omega: &[f64]) -> Vec<f64> {
    let mut out = omega.to_vec();
    for t in 0..lay.horizon {
        let src = lay.mass_block(omega, (t + 1).min(lay.horizon - 1)).to_vec();
        let start = lay.mass(t, 0);
        out[start..start + lay.n_edges].copy_from_slice(&src);
    }
    for t in 0..=lay.horizon {
        let src = lay.rho_block(omega, (t + 1).min(lay.horizon)).to_vec();
        let start = lay.rho(t, 0);
        out[start..start + lay.n_nodes].copy_from_slice(&src);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Every vehicle samples its next node; the distribution is the empirical one.
    #[default]
    Sampled,
    /// The distribution is propagated exactly, `rho+ = Pi_1 rho`.
    Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub kappa: KappaOptions,
    pub steps: usize,
    /// Vehicles per agent.
    pub vehicles: usize,
    pub seed: u64,
    pub mode: UpdateMode,
    /// Warm-start each solve from the shifted previous equilibrium.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStep {
    pub step: usize,
    /// Distributions at the start of the step.
    pub rho: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub policies: Vec<Policy>,
    /// Node of every vehicle after the step (sampled mode only).
    pub vehicle_nodes: Option<Vec<Vec<NodeId>>>,
    pub rho_next: Vec<Vec<f64>>,
    /// Terminal potential of the state at the start of the step, per agent.
    pub terminal_potential: Vec<f64>,
    /// Potential stage cost of the applied inputs.
    pub stage_potential: f64,
    /// Travel cost each agent incurred during the step.
    pub realized_cost: Vec<f64>,
    pub mass_at_destination: Vec<f64>,
    pub kkt: f64,
    pub converged: bool,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub destinations: Vec<NodeId>,
    pub steps: Vec<ClosedLoopStep>,
    /// Distributions after the last step.
    pub final_rho: Vec<Vec<f64>>,
}

impl ClosedLoopTrace {
    /// Total realized travel cost per agent.
    pub fn total_cost(&self) -> Vec<f64> {
        let n = self.destinations.len();
        let mut total = vec![0.0; n];
        for s in &self.steps {
            for (t, c) in total.iter_mut().zip(&s.realized_cost) {
                *t += c;
            }
        }
        total
    }

    /// `|x|` at the start of every step followed by the final state.
    pub fn state_norms(&self) -> Vec<f64> {
        let norm = |rho: &[Vec<f64>]| -> f64 {
            rho.iter()
                .zip(&self.destinations)
                .flat_map(|(r, &d)| r.iter().enumerate().map(move |(a, p)| p - if a == d { 1.0 } else { 0.0 }))
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        self.steps
            .iter()
            .map(|s| norm(&s.rho))
            .chain(std::iter::once(norm(&self.final_rho)))
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct TraceCsvRow {
    step: usize,
    agent: usize,
    mass_at_destination: f64,
    #[serde(rename = "pF")]
    terminal_potential: f64,
    stage_cost: f64,
    wall_time_ms: f64,
}

/// One row per step and agent: mass at the destination at the start of the
/// step, that agent's terminal-potential term, its realized travel cost and
/// the solve time.
pub fn write_trace_csv<W: Write>(out: W, trace: &ClosedLoopTrace) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in &trace.steps {
        for agent in 0..trace.destinations.len() {
            w.serialize(TraceCsvRow {
                step: s.step,
                agent,
                mass_at_destination: s.mass_at_destination[agent],
                terminal_potential: s.terminal_potential[agent],
                stage_cost: s.realized_cost[agent],
                wall_time_ms: s.wall_time_ms,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Node counts from `V * rho` by largest remainders.
fn allocate_vehicles(rho: &[f64], vehicles: usize) -> Vec<NodeId> {
    let scaled: Vec<f64> = rho.iter().map(|p| p * vehicles as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor())).then(a.cmp(&b)));
    for &a in order.iter().take(vehicles.saturating_sub(assigned)) {
        counts[a] += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| std::iter::repeat_n(a, c))
        .take(vehicles)
        .collect()
}

/// Receding-horizon closed loop: at each step solve the finite-horizon game
/// at the current distributions, apply the first policies, and update the
/// distributions either from sampled vehicles or exactly.
pub fn closed_loop_run(
    network: Arc<RoadNetwork>,
    initial: &[Vec<f64>],
    destinations: &[NodeId],
    config: &ClosedLoopConfig,
) -> Result<ClosedLoopTrace, RecedingError> {
    if config.steps == 0 || config.vehicles == 0 {
        return Err(RecedingError::EmptyRun);
    }
    let sys = build_lifted_system(Arc::clone(&network), destinations)?;
    let n = sys.n_nodes();
    let n_agents = destinations.len();
    let v = config.vehicles;
    let lay = Layout {
        n_nodes: n,
        n_edges: sys.n_edges(),
        horizon: config.kappa.horizon,
    };

    let mut vehicles: Vec<Vec<NodeId>> = initial.iter().map(|r| allocate_vehicles(r, v)).collect();
    let empirical = |veh: &[Vec<NodeId>]| -> Vec<Vec<f64>> {
        veh.iter()
            .map(|nodes| {
                let mut r = vec![0.0; n];
                for &a in nodes {
                    r[a] += 1.0;
                }
                r.iter_mut().for_each(|p| *p /= v as f64);
                r
            })
            .collect()
    };
    let mut rho: Vec<Vec<f64>> = match config.mode {
        UpdateMode::Sampled => empirical(&vehicles),
        UpdateMode::Expected => initial.to_vec(),
    };

    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut steps = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let started = Instant::now();
        let out = kappa(&sys, &rho, &config.kappa, warm.as_deref())?;
        for (i, pol) in out.policies.iter().enumerate() {
            for a in (0..n).filter(|&a| rho[i][a] > 0.0) {
                let sum: f64 = pol.column(a).iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(RecedingError::NonStochasticColumn { step, agent: i, node: a, sum });
                }
            }
        }
        let x: Vec<Vec<f64>> = rho.iter().enumerate().map(|(i, r)| sys.state_of(i, r)).collect();
        let terminal: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, xi)| config.kappa.costs.gamma * dot(&sys.known_paths[i].cost_to_go, xi))
            .collect();
        let stage = stage_potential(&sys, &config.kappa.costs, &x, &out.inputs);

        // realized per-agent edge flows of this step
        let (flows, rho_next, vehicle_nodes) = match config.mode {
            UpdateMode::Expected => {
                let flows: Vec<Vec<f64>> = out
                    .policies
                    .iter()
                    .zip(&rho)
                    .map(|(pol, r)| {
                        network
                            .edges()
                            .iter()
                            .map(|e| pol.prob(e.source, e.target) * r[e.source])
                            .collect()
                    })
                    .collect();
                let next = out.policies.iter().zip(&rho).map(|(pol, r)| pol.apply(r)).collect();
                (flows, next, None)
            }
            UpdateMode::Sampled => {
                let next_nodes: Vec<Vec<NodeId>> = vehicles
                    .iter()
                    .enumerate()
                    .map(|(i, nodes)| {
                        nodes
                            .par_iter()
                            .enumerate()
                            .map(|(vehicle, &a)| {
                                let mut rng = seeded_rng(config.seed, &[step as u64, i as u64, vehicle as u64]);
                                out.policies[i].sample(a, rng.random::<f64>())
                            })
                            .collect()
                    })
                    .collect();
                let flows = vehicles
                    .iter()
                    .zip(&next_nodes)
                    .map(|(from, to)| {
                        let mut f = vec![0.0; sys.n_edges()];
                        for (&a, &b) in from.iter().zip(to) {
                            let j = network.edge_index(a, b).expect("policies follow edges");
                            f[j] += 1.0 / v as f64;
                        }
                        f
                    })
                    .collect();
                let next = empirical(&next_nodes);
                vehicles = next_nodes;
                (flows, next, Some(vehicles.clone()))
            }
        };
        let sigma: Vec<f64> = (0..sys.n_edges())
            .map(|j| flows.iter().map(|f| f[j]).sum::<f64>() / n_agents as f64)
            .collect();
        let realized_cost = flows
            .iter()
            .map(|f| {
                network
                    .edges()
                    .iter()
                    .enumerate()
                    .map(|(j, e)| f[j] * e.latency.value(sigma[j]))
                    .sum()
            })
            .collect();
        let mass_at_destination = rho.iter().zip(destinations).map(|(r, &d)| r[d]).collect();
        log::info!(
            "closed loop step {step}: |x| = {:.3e}, solver kkt {:.1e} after {} iterations",
            state_norm(&x),
            out.kkt,
            out.iterations
        );
        if config.warm_start {
            warm = Some(out.omegas.iter().map(|w| shift_decision(&lay, w)).collect());
        }
        steps.push(ClosedLoopStep {
            step,
            rho: std::mem::replace(&mut rho, rho_next.clone()),
            inputs: out.inputs,
            policies: out.policies,
            vehicle_nodes,
            rho_next,
            terminal_potential: terminal,
            stage_potential: stage,
            realized_cost,
            mass_at_destination,
            kkt: out.kkt,
            converged: out.converged,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(ClosedLoopTrace {
        destinations: destinations.to_vec(),
        steps,
        final_rho: rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::diamond;
    use crate::network::{build_network, EdgeSpec, LatencyParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(k: f64) -> Arc<RoadNetwork> {
        let mut specs = Vec::new();
        for a in 0..3 {
            specs.push(EdgeSpec {
                source: a,
                target: a,
                params: LatencyParams::Affine { tau: 0.0, k: 0.0 },
                capacity: 1.0,
            });
            specs.push(EdgeSpec {
                source: a,
                target: (a + 1) % 3,
                params: LatencyParams::Affine { tau: 1.0, k },
                capacity: 1.0,
            });
        }
        Arc::new(build_network(3, &specs).unwrap())
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    /// Random `(x, u)` in `Z_i`: a random distribution pushed through a random
    /// policy that never waits away from the destination.
    fn random_stage_pair(sys: &LiftedSystem, i: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let net = sys.network();
        let d = sys.destinations()[i];
        let rho = random_simplex(rng, sys.n_nodes());
        let mut m = vec![0.0; sys.n_edges()];
        for a in 0..sys.n_nodes() {
            let out: Vec<usize> = net
                .out_edges(a)
                .iter()
                .copied()
                .filter(|&j| !net.edge(j).is_self_loop() || a == d)
                .collect();
            let w = random_simplex(rng, out.len());
            for (j, p) in out.iter().zip(w) {
                m[*j] = rho[a] * p;
            }
        }
        (sys.state_of(i, &rho), sys.input_of(i, &m))
    }

    #[test]
    fn ring_incidence() {
        let sys = build_lifted_system(ring(1.0), &[2]).unwrap();
        let b = sys.b_matrix();
        let net = sys.network();
        let expected: Vec<f64> = (0..6)
            .map(|j| if [net.edge_index(1, 2).unwrap(), net.edge_index(2, 2).unwrap()].contains(&j) { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(b[2], expected);
        assert_eq!(sys.apply_b(&sys.u_eq(0)), sys.rho_eq(0));
        assert_eq!(sys.apply_p(&sys.u_eq(0)), sys.rho_eq(0));
        // P has more columns than rows, hence a null space
        assert!(sys.p_matrix()[0].len() > sys.p_matrix().len());
    }

    #[test]
    fn incidence_preserves_mass() {
        let sys = build_lifted_system(diamond(1.0), &[3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_simplex(&mut rng, sys.n_edges());
            let sb: f64 = sys.apply_b(&m).iter().sum();
            let sp: f64 = sys.apply_p(&m).iter().sum();
            assert!((sb - 1.0).abs() < 1e-12 && (sp - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_affine() {
        let specs = vec![
            EdgeSpec { source: 0, target: 0, params: LatencyParams::Affine { tau: 0.0, k: 0.0 }, capacity: 1.0 },
            EdgeSpec { source: 1, target: 1, params: LatencyParams::Affine { tau: 0.0, k: 0.0 }, capacity: 1.0 },
            EdgeSpec {
                source: 0,
                target: 1,
                params: LatencyParams::Bpt { tau: 1.0, c: 1.0, zeta: 0.0, xi: 3.0 },
                capacity: 1.0,
            },
            EdgeSpec { source: 1, target: 0, params: LatencyParams::Affine { tau: 1.0, k: 1.0 }, capacity: 1.0 },
        ];
        let net = Arc::new(build_network(2, &specs).unwrap());
        assert!(matches!(
            build_lifted_system(net, &[0]),
            Err(RecedingError::NonAffineLatency { .. })
        ));
    }

    #[test]
    fn gain_formula() {
        assert_eq!(terminal_cost_gain(&ring(0.0), 8, 0.0).unwrap(), 1.0);
        assert!((terminal_cost_gain(&ring(1.0), 8, 0.0).unwrap() - 1.5625).abs() < 1e-15);
    }

    #[test]
    fn known_path_input_on_ring() {
        let sys = build_lifted_system(ring(1.0), &[2]).unwrap();
        let x = sys.state_of(0, &[1.0, 0.0, 0.0]);
        let u = known_path_input(&sys, 0, &x, KnownPathMode::Consistent);
        let m: Vec<f64> = u.iter().zip(sys.u_eq(0)).map(|(a, b)| a + b).collect();
        let net = sys.network();
        for (j, e) in net.edges().iter().enumerate() {
            let want = if (e.source, e.target) == (0, 1) { 1.0 } else { 0.0 };
            assert_eq!(m[j], want, "edge {:?}", (e.source, e.target));
        }
        assert!(sys.contains_z(0, &x, &u, 1e-12));
        let literal = known_path_input(&sys, 0, &x, KnownPathMode::Literal);
        assert!(!sys.contains_u(0, &literal, 1e-9));
        assert!(known_path_input(&sys, 0, &vec![0.0; 3], KnownPathMode::Consistent)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn known_path_input_conserves_flow() {
        let sys = build_lifted_system(diamond(1.0), &[3, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..2 {
            for _ in 0..50 {
                let x = sys.state_of(i, &random_simplex(&mut rng, 4));
                let u = known_path_input(&sys, i, &x, KnownPathMode::Consistent);
                for (p, v) in sys.apply_p(&u).iter().zip(&x) {
                    assert!((p - v).abs() < 1e-12);
                }
                assert!(sys.contains_z(i, &x, &u, 1e-12));
            }
        }
    }

    #[test]
    fn slacks_vanish_at_equilibrium() {
        let net = diamond(2.0);
        let sys = build_lifted_system(Arc::clone(&net), &[3, 3]).unwrap();
        let costs = RecedingCosts { gamma: terminal_cost_gain(&net, 2, 0.0).unwrap(), stage_weight: 0.0 };
        let x = vec![vec![0.0; 4]; 2];
        let d = lyapunov_diagnostics(&sys, &costs, &x);
        assert_eq!((d.terminal_descent, d.stage_lower_bound, d.terminal_vs_stage), (0.0, 0.0, 0.0));
        let u = vec![vec![0.0; sys.n_edges()]; 2];
        assert_eq!(potential(&sys, &costs, &x, &[u.clone(), u]), 0.0);
    }

    #[test]
    fn random_states_satisfy_lyapunov_inequalities() {
        let net = diamond(2.0);
        let dests = [3, 1, 0];
        let sys = build_lifted_system(Arc::clone(&net), &dests).unwrap();
        let costs = RecedingCosts { gamma: terminal_cost_gain(&net, 3, 0.0).unwrap(), stage_weight: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<Vec<f64>> = (0..3).map(|i| sys.state_of(i, &random_simplex(&mut rng, 4))).collect();
            let diag = lyapunov_diagnostics(&sys, &costs, &x);
            assert!(diag.min_slack() >= -1e-9, "{diag:?}");
            let pairs: Vec<_> = (0..3).map(|i| random_stage_pair(&sys, i, &mut rng)).collect();
            for (i, (xi, ui)) in pairs.iter().enumerate() {
                assert!(sys.contains_z(i, xi, ui, 1e-12));
                assert!(stage_relations(&sys, i, xi, ui).iter().all(|&s| s >= -1e-9));
            }
            let (xs, us): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            assert!(stage_bound_slack(&sys, &costs, &xs, &us) >= -1e-9);
        }
    }

    /// Derivative of agent i's cost with respect to its shifted inputs, from
    /// the game gradient and the chain rule through `rho_{t+1} = B M_t`.
    fn chain_rule_gradient(game: &Game, sys: &LiftedSystem, omegas: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let lay = game.layout();
        let grads = game.pseudogradient(omegas);
        grads
            .iter()
            .map(|g| {
                (0..lay.horizon)
                    .map(|t| {
                        let next = lay.rho_block(g, t + 1);
                        let mass = lay.mass_block(g, t);
                        sys.network()
                            .edges()
                            .iter()
                            .enumerate()
                            .map(|(j, e)| mass[j] + next[e.target])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn potential_gradient_matches_game() {
        let net = diamond(1.5);
        let dests = [3, 2];
        let sys = build_lifted_system(Arc::clone(&net), &dests).unwrap();
        let costs = RecedingCosts { gamma: 2.0, stage_weight: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let horizon = 2;
        let rho: Vec<Vec<f64>> = (0..2).map(|_| random_simplex(&mut rng, 4)).collect();
        let game = receding_game(Arc::clone(&net), &dests, &rho, horizon, &costs).unwrap();
        let lay = game.layout();
        for _ in 0..5 {
            let omegas: Vec<Vec<f64>> = (0..2)
                .map(|i| {
                    let y: Vec<f64> = (0..lay.dim()).map(|_| rng.random::<f64>()).collect();
                    game.project(i, &y, &mut Default::default()).unwrap()
                })
                .collect();
            let x_in: Vec<Vec<f64>> = rho.iter().enumerate().map(|(i, r)| sys.state_of(i, r)).collect();
            let inputs: Vec<Vec<Vec<f64>>> = (0..horizon)
                .map(|t| omegas.iter().enumerate().map(|(i, w)| sys.input_of(i, lay.mass_block(w, t))).collect())
                .collect();
            // potential difference equals each agent's cost difference
            let sigma = game.aggregate(&omegas);
            let j0: f64 = game.cost(0, &omegas[0], &sigma);
            let p0 = potential(&sys, &costs, &x_in, &inputs);
            let expected = chain_rule_gradient(&game, &sys, &omegas);
            let h = 1e-6;
            for i in 0..2 {
                for t in 0..horizon {
                    for j in 0..sys.n_edges() {
                        let mut plus = inputs.clone();
                        plus[t][i][j] += h;
                        let mut minus = inputs.clone();
                        minus[t][i][j] -= h;
                        let fd = (potential(&sys, &costs, &x_in, &plus) - potential(&sys, &costs, &x_in, &minus)) / (2.0 * h);
                        let g = expected[i][t][j];
                        assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "agent {i} t {t} edge {j}: {fd} vs {g}");
                    }
                }
            }
            assert!(p0.is_finite() && j0.is_finite());
        }
    }

    #[test]
    fn single_agent_potential_is_cost() {
        let net = diamond(1.5);
        let sys = build_lifted_system(Arc::clone(&net), &[3]).unwrap();
        let costs = RecedingCosts { gamma: 1.7, stage_weight: 0.4 };
        let rho = vec![vec![0.4, 0.3, 0.2, 0.1]];
        let game = receding_game(Arc::clone(&net), &[3], &rho, 3, &costs).unwrap();
        let lay = game.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..lay.dim()).map(|_| rng.random::<f64>()).collect();
        let w = game.project(0, &y, &mut Default::default()).unwrap();
        let x_in = vec![sys.state_of(0, &rho[0])];
        let inputs: Vec<Vec<Vec<f64>>> = (0..3).map(|t| vec![sys.input_of(0, lay.mass_block(&w, t))]).collect();
        let sigma = game.aggregate(std::slice::from_ref(&w));
        let cost = game.cost(0, &w, &sigma);
        assert!((potential(&sys, &costs, &x_in, &inputs) - cost).abs() < 1e-10);
    }

    fn kappa_opts(horizon: usize, gamma: f64) -> KappaOptions {
        KappaOptions {
            horizon,
            costs: RecedingCosts { gamma, stage_weight: 0.0 },
            forb: ForbOptions { tol: 1e-8, max_iters: 200_000, ..Default::default() },
            recovery: RecoveryOptions::default(),
            accept_unconverged: false,
        }
    }

    #[test]
    fn kappa_at_destination_is_self_loop() {
        let sys = build_lifted_system(diamond(1.0), &[3]).unwrap();
        let out = kappa(&sys, &[sys.rho_eq(0)], &kappa_opts(2, 2.0), None).unwrap();
        assert_eq!(out.policies[0].prob(3, 3), 1.0);
        assert!(out.inputs[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kappa_without_congestion_follows_shortest_path() {
        let net = ring(0.0);
        let sys = build_lifted_system(Arc::clone(&net), &[2]).unwrap();
        let out = kappa(&sys, &[vec![1.0, 0.0, 0.0]], &kappa_opts(3, 1.0), None).unwrap();
        assert!(out.converged);
        assert!((out.policies[0].prob(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kappa_returns_equilibrium() {
        let net = diamond(2.0);
        let dests = [3, 3];
        let sys = build_lifted_system(Arc::clone(&net), &dests).unwrap();
        let gamma = terminal_cost_gain(&net, 2, 0.0).unwrap();
        let opts = kappa_opts(3, gamma);
        let rho = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.5, 0.0, 0.0]];
        let out = kappa(&sys, &rho, &opts, None).unwrap();
        let game = receding_game(Arc::clone(&net), &dests, &rho, 3, &opts.costs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..2 {
            let sigma = game.aggregate(&out.omegas);
            let base = game.cost(i, &out.omegas[i], &sigma);
            for _ in 0..50 {
                let y: Vec<f64> = out.omegas[i].iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)).collect();
                let dev = game.project(i, &y, &mut Default::default()).unwrap();
                let mut others = out.omegas.clone();
                others[i] = dev.clone();
                let c = game.cost(i, &dev, &game.aggregate(&others));
                assert!(c >= base - 1e-6, "agent {i}: {c} < {base}");
            }
        }
    }

    #[test]
    fn expected_closed_loop_reaches_destination() {
        let net = diamond(2.0);
        let gamma = terminal_cost_gain(&net, 2, 0.0).unwrap();
        let config = ClosedLoopConfig {
            kappa: kappa_opts(2, gamma),
            steps: 6,
            vehicles: 1,
            seed: 0,
            mode: UpdateMode::Expected,
            warm_start: true,
        };
        let initial = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let trace = closed_loop_run(net, &initial, &[3, 3], &config).unwrap();
        let norms = trace.state_norms();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{norms:?}");
        }
        assert!(*norms.last().unwrap() < 1e-6, "{norms:?}");
    }

    #[test]
    fn sampled_closed_loop_is_reproducible() {
        let net = diamond(2.0);
        let gamma = terminal_cost_gain(&net, 2, 0.0).unwrap();
        let config = ClosedLoopConfig {
            kappa: kappa_opts(2, gamma),
            steps: 3,
            vehicles: 200,
            seed: 9,
            mode: UpdateMode::Sampled,
            warm_start: false,
        };
        let initial = vec![vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]];
        let untimed = |mut t: ClosedLoopTrace| {
            t.steps.iter_mut().for_each(|s| s.wall_time_ms = 0.0);
            t
        };
        let a = untimed(closed_loop_run(Arc::clone(&net), &initial, &[3, 3], &config).unwrap());
        let b = untimed(closed_loop_run(net, &initial, &[3, 3], &config).unwrap());
        assert_eq!(a, b);
        for s in &a.steps {
            for (r, nodes) in s.rho_next.iter().zip(s.vehicle_nodes.as_ref().unwrap()) {
                assert_eq!(nodes.len(), 200);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,agent,mass_at_destination,pF,stage_cost,wall_time_ms"));
    }

    #[test]
    fn stationary_when_started_at_destination() {
        let net = diamond(2.0);
        let config = ClosedLoopConfig {
            kappa: kappa_opts(2, 2.0),
            steps: 3,
            vehicles: 10,
            seed: 1,
            mode: UpdateMode::Sampled,
            warm_start: false,
        };
        let initial = vec![vec![0.0, 0.0, 0.0, 1.0]];
        let trace = closed_loop_run(net, &initial, &[3], &config).unwrap();
        for s in &trace.steps {
            assert!(s.vehicle_nodes.as_ref().unwrap()[0].iter().all(|&a| a == 3));
            assert_eq!(s.realized_cost[0], 0.0);
        }
    }

    #[test]
    fn shifted_decision_moves_blocks() {
        let lay = Layout { n_nodes: 1, n_edges: 1, horizon: 3 };
        let w = vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 40.0];
        assert_eq!(shift_decision(&lay, &w), vec![2.0, 3.0, 3.0, 20.0, 30.0, 40.0, 40.0]);
    }

    #[test]
    fn vehicle_allocation_matches_distribution() {
        let nodes = allocate_vehicles(&[0.25, 0.5, 0.25], 10);
        assert_eq!(nodes.len(), 10);
        let count = |a| nodes.iter().filter(|&&n| n == a).count();
        assert_eq!(count(1), 5);
        assert_eq!(count(0) + count(2), 5);
    }
}
