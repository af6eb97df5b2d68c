//! Random benchmark instances and the experiment drivers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forb::{solve_gne, ForbError, ForbOptions};
use crate::game::{sample_index, AgentSpec, FeasibleSet, Game, GameError, Layout, LocalCost, RecoveryOptions};
use crate::network::{build_network, known_path, EdgeSpec, LatencyParams, NetworkError, NodeId, RoadNetwork};
use crate::receding::{
    closed_loop_run, terminal_cost_gain, ClosedLoopConfig, KappaOptions, RecedingCosts, RecedingError, UpdateMode,
};
use crate::rng::{derive_seed, seeded_rng};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Forb(#[from] ForbError),
    #[error(transparent)]
    Receding(#[from] RecedingError),
    #[error("could not draw {0} origin-destination pairs")]
    NoOdPairs(usize),
    #[error("no scenario was solved")]
    NoSolvedScenario,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parameters of the random strongly connected road graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_nodes: usize,
    /// Roads added on top of a random Hamiltonian cycle.
    pub n_chords: usize,
    pub road_latency: LatencyParams,
    pub self_loop_latency: LatencyParams,
    pub capacity: f64,
}

impl GeneratorConfig {
    /// 12 nodes, 27 roads, BPR latencies with `tau = 1, c = 0.1, xi = 3, zeta = 1/n_agents`
    /// on every edge including self-loops, capacity 0.2.
    pub fn congestion_benchmark(n_agents: usize) -> Self {
        let bpt = LatencyParams::Bpt {
            tau: 1.0,
            c: 0.1,
            zeta: 1.0 / n_agents as f64,
            xi: 3.0,
        };
        Self {
            n_nodes: 12,
            n_chords: 15,
            road_latency: bpt,
            self_loop_latency: bpt,
            capacity: 0.2,
        }
    }

    /// Same graph shape with affine latencies `tau = 1, k = slope` on roads
    /// and free self-loops.
    pub fn affine_benchmark(slope: f64) -> Self {
        Self {
            n_nodes: 12,
            n_chords: 15,
            road_latency: LatencyParams::Affine { tau: 1.0, k: slope },
            self_loop_latency: LatencyParams::Affine { tau: 0.0, k: 0.0 },
            capacity: 1.0,
        }
    }
}

pub fn random_network(cfg: &GeneratorConfig, seed: u64) -> Result<RoadNetwork, NetworkError> {
    let n = cfg.n_nodes;
    let mut rng = seeded_rng(seed, &[0x6e6574]);
    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut roads: Vec<(NodeId, NodeId)> = (0..n).map(|i| (order[i], order[(i + 1) % n])).collect();
    let max_roads = n * (n - 1);
    let target = (roads.len() + cfg.n_chords).min(max_roads);
    while roads.len() < target {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !roads.contains(&(a, b)) {
            roads.push((a, b));
        }
    }
    let mut specs: Vec<EdgeSpec> = (0..n)
        .map(|a| EdgeSpec {
            source: a,
            target: a,
            params: cfg.self_loop_latency,
            capacity: cfg.capacity,
        })
        .collect();
    specs.extend(roads.into_iter().map(|(a, b)| EdgeSpec {
        source: a,
        target: b,
        params: cfg.road_latency,
        capacity: cfg.capacity,
    }));
    build_network(n, &specs)
}

/// Origin-destination pairs with distinct origins, distinct destinations,
/// origin != destination and destination reachable within `horizon` hops.
pub fn sample_od_pairs(
    net: &RoadNetwork,
    n_agents: usize,
    horizon: usize,
    seed: u64,
) -> Option<Vec<(NodeId, NodeId)>> {
    let n = net.n_nodes();
    if n_agents > n {
        return None;
    }
    let mut rng = seeded_rng(seed, &[0x6f64]);
    for _ in 0..10_000 {
        let mut starts: Vec<NodeId> = (0..n).collect();
        let mut dests: Vec<NodeId> = (0..n).collect();
        starts.shuffle(&mut rng);
        dests.shuffle(&mut rng);
        let pairs: Vec<_> = starts[..n_agents].iter().copied().zip(dests[..n_agents].iter().copied()).collect();
        let ok = pairs
            .iter()
            .all(|&(b, d)| b != d && net.hop_distance(b, d).is_some_and(|h| h <= horizon));
        if ok {
            return Some(pairs);
        }
    }
    None
}

/// The same graph with affine latencies: free-flow time kept from `net`,
/// congestion slope `slope` on roads, free self-loops.
pub fn affine_variant(net: &RoadNetwork, slope: f64) -> Result<RoadNetwork, NetworkError> {
    let specs: Vec<EdgeSpec> = net
        .edges()
        .iter()
        .map(|e| EdgeSpec {
            source: e.source,
            target: e.target,
            params: if e.is_self_loop() {
                LatencyParams::Affine { tau: 0.0, k: 0.0 }
            } else {
                LatencyParams::Affine {
                    tau: e.latency.tau,
                    k: slope,
                }
            },
            capacity: e.capacity,
        })
        .collect();
    build_network(net.n_nodes(), &specs)
}

/// Deterministic routing along free-flow shortest paths.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRouting {
    pub omegas: Vec<Vec<f64>>,
    /// Average occupancy per (step, edge).
    pub sigma: Vec<f64>,
}

/// Every agent follows its free-flow shortest path and then waits on the
/// destination self-loop.
pub fn shortest_path_baseline(
    net: &RoadNetwork,
    pairs: &[(NodeId, NodeId)],
    horizon: usize,
) -> Result<BaselineRouting, GameError> {
    let lay = Layout {
        n_nodes: net.n_nodes(),
        n_edges: net.n_edges(),
        horizon,
    };
    let mut omegas = Vec::with_capacity(pairs.len());
    for (i, &(b, d)) in pairs.iter().enumerate() {
        if b >= lay.n_nodes || d >= lay.n_nodes {
            return Err(GameError::UnknownNode { agent: i, node: b.max(d) });
        }
        if net.hop_distance(b, d).is_none_or(|h| h > horizon) {
            return Err(GameError::DestinationUnreachable { agent: i, horizon });
        }
        let path = known_path(net, d).path_from(b);
        if path.len() > horizon + 1 {
            return Err(GameError::DestinationUnreachable { agent: i, horizon });
        }
        let node_at = |t: usize| path[t.min(path.len() - 1)];
        let mut w = vec![0.0; lay.dim()];
        for t in 0..horizon {
            let j = net.edge_index(node_at(t), node_at(t + 1)).expect("path follows edges");
            w[lay.mass(t, j)] = 1.0;
        }
        for t in 0..=horizon {
            w[lay.rho(t, node_at(t))] = 1.0;
        }
        omegas.push(w);
    }
    let len = lay.mass_len();
    let mut sigma = vec![0.0; len];
    for w in &omegas {
        for (s, m) in sigma.iter_mut().zip(&w[..len]) {
            *s += m;
        }
    }
    sigma.iter_mut().for_each(|s| *s /= pairs.len() as f64);
    Ok(BaselineRouting { omegas, sigma })
}

/// `max_t sigma_{t,e} / capacity_e` for every edge.
pub fn peak_load_ratio(net: &RoadNetwork, horizon: usize, sigma: &[f64]) -> Vec<f64> {
    let e = net.n_edges();
    (0..e)
        .map(|j| {
            let peak = (0..horizon).map(|t| sigma[t * e + j]).fold(0.0, f64::max);
            peak / net.edge(j).capacity
        })
        .collect()
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    pub n_nodes: usize,
    pub n_chords: usize,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self { n_nodes: 12, n_chords: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenLoopConfig {
    pub n_agents: usize,
    pub horizon: usize,
    pub epsilon: f64,
    /// Latency of roads in generated networks; `zeta` defaults to `1/n_agents`.
    pub road_latency: Option<LatencyParams>,
    pub self_loop_latency: Option<LatencyParams>,
    pub capacity: f64,
    pub capacity_scale: f64,
    pub scenarios: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Scenarios whose final KKT residual exceeds this are flagged.
    pub flag_kkt: f64,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            n_agents: 8,
            horizon: 6,
            epsilon: 0.05,
            road_latency: None,
            self_loop_latency: None,
            capacity: 0.2,
            capacity_scale: 1.0,
            scenarios: 20,
            tol: 1e-6,
            max_iters: 10_000,
            flag_kkt: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproxConfig {
    /// Vehicles per agent.
    pub vehicles: Vec<usize>,
    /// Independent realizations averaged per vehicle count.
    pub replicates: usize,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            vehicles: vec![1, 10, 100, 1000],
            replicates: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecedingBenchConfig {
    pub n_agents: usize,
    /// Congestion slope of the affine roads.
    pub slope: f64,
    pub horizons: Vec<usize>,
    /// Closed-loop steps per run.
    pub steps: usize,
    pub vehicles: usize,
    /// Lipschitz constant of the stage cost (zero without stage cost).
    pub stage_lipschitz: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for RecedingBenchConfig {
    fn default() -> Self {
        Self {
            n_agents: 8,
            slope: 2.0,
            horizons: (1..=10).collect(),
            steps: 10,
            vehicles: 1000,
            stage_lipschitz: 0.0,
            tol: 1e-6,
            max_iters: 20_000,
        }
    }
}

/// Everything `bench` needs; together with `seed` it fixes every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Network file; a random graph from `generator` when absent.
    pub network: Option<PathBuf>,
    pub generator: GeneratorSettings,
    pub open_loop: OpenLoopConfig,
    pub approximation: ApproxConfig,
    pub receding: RecedingBenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            network: None,
            generator: GeneratorSettings::default(),
            open_loop: OpenLoopConfig::default(),
            approximation: ApproxConfig::default(),
            receding: RecedingBenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Network of the open-loop study: the configured file or a seeded random graph.
    pub fn open_loop_network(&self) -> Result<RoadNetwork, ExperimentError> {
        if let Some(path) = &self.network {
            return Ok(RoadNetwork::load(path)?);
        }
        let mut gen = GeneratorConfig::congestion_benchmark(self.open_loop.n_agents);
        gen.n_nodes = self.generator.n_nodes;
        gen.n_chords = self.generator.n_chords;
        gen.capacity = self.open_loop.capacity;
        if let Some(l) = self.open_loop.road_latency {
            gen.road_latency = l;
        }
        if let Some(l) = self.open_loop.self_loop_latency {
            gen.self_loop_latency = l;
        }
        Ok(random_network(&gen, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: usize,
    pub seed: u64,
    pub pairs: Vec<(NodeId, NodeId)>,
    /// `converged`, `flagged` (budget exhausted above the flag threshold),
    /// `unconverged` (budget exhausted below it) or `failed: <reason>`.
    pub status: String,
    pub kkt: f64,
    pub iterations: usize,
    /// Largest violation of the capacity constraint.
    pub capacity_violation: f64,
    #[serde(skip)]
    pub gne_ratio: Vec<f64>,
    #[serde(skip)]
    pub baseline_ratio: Vec<f64>,
    #[serde(skip)]
    pub omegas: Vec<Vec<f64>>,
}

impl ScenarioOutcome {
    pub fn solved(&self) -> bool {
        !self.status.starts_with("failed")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionRow {
    pub source: NodeId,
    pub target: NodeId,
    pub gne_median: f64,
    pub gne_q025: f64,
    pub gne_q975: f64,
    pub baseline_median: f64,
    pub baseline_q025: f64,
    pub baseline_q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub scenarios: Vec<ScenarioOutcome>,
    pub rows: Vec<CongestionRow>,
    /// Largest per-edge median minus smallest, for the equilibrium.
    pub gne_spread: f64,
    pub baseline_spread: f64,
    /// Largest `max_t sigma / capacity` over solved scenarios and edges.
    pub gne_max_ratio: f64,
}

/// Solves the capacity-constrained equilibrium and the shortest-path
/// baseline on random origin-destination draws and summarizes the per-edge
/// peak load ratios.
pub fn run_open_loop_benchmark(net: Arc<RoadNetwork>, cfg: &OpenLoopConfig, seed: u64) -> OpenLoopReport {
    let opts = ForbOptions {
        tol: cfg.tol,
        max_iters: cfg.max_iters,
        ..Default::default()
    };
    let scenarios: Vec<ScenarioOutcome> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|s| {
            let sub = derive_seed(seed, &[0x6f6c, s as u64]);
            let outcome = solve_scenario(&net, cfg, &opts, sub);
            match outcome {
                Ok(mut o) => {
                    o.scenario = s;
                    log::info!("scenario {s}: {} (KKT {:.2e}, {} iterations)", o.status, o.kkt, o.iterations);
                    o
                }
                Err(e) => {
                    log::warn!("scenario {s} failed: {e}");
                    ScenarioOutcome {
                        scenario: s,
                        seed: sub,
                        pairs: Vec::new(),
                        status: format!("failed: {e}"),
                        kkt: f64::NAN,
                        iterations: 0,
                        capacity_violation: f64::NAN,
                        gne_ratio: Vec::new(),
                        baseline_ratio: Vec::new(),
                        omegas: Vec::new(),
                    }
                }
            }
        })
        .collect();

    let solved: Vec<&ScenarioOutcome> = scenarios.iter().filter(|o| o.solved()).collect();
    let rows: Vec<CongestionRow> = net
        .edges()
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let gne: Vec<f64> = solved.iter().map(|o| o.gne_ratio[j]).collect();
            let base: Vec<f64> = solved.iter().map(|o| o.baseline_ratio[j]).collect();
            CongestionRow {
                source: e.source,
                target: e.target,
                gne_median: quantile(&gne, 0.5),
                gne_q025: quantile(&gne, 0.025),
                gne_q975: quantile(&gne, 0.975),
                baseline_median: quantile(&base, 0.5),
                baseline_q025: quantile(&base, 0.025),
                baseline_q975: quantile(&base, 0.975),
            }
        })
        .collect();
    let spread = |f: fn(&CongestionRow) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let gne_max_ratio = solved
        .iter()
        .flat_map(|o| o.gne_ratio.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    OpenLoopReport {
        gne_spread: spread(|r| r.gne_median),
        baseline_spread: spread(|r| r.baseline_median),
        gne_max_ratio,
        scenarios,
        rows,
    }
}

fn solve_scenario(
    net: &Arc<RoadNetwork>,
    cfg: &OpenLoopConfig,
    opts: &ForbOptions,
    seed: u64,
) -> Result<ScenarioOutcome, ExperimentError> {
    let pairs = sample_od_pairs(net, cfg.n_agents, cfg.horizon, seed).ok_or(ExperimentError::NoOdPairs(cfg.n_agents))?;
    let agents = pairs
        .iter()
        .map(|&(start, destination)| AgentSpec {
            feasible: FeasibleSet::OpenLoop {
                start,
                destination,
                epsilon: cfg.epsilon,
            },
            local_cost: LocalCost::Zero,
        })
        .collect();
    let game = Game::new(Arc::clone(net), cfg.horizon, agents, cfg.capacity_scale)?;
    let (result, converged) = match solve_gne(&game, opts) {
        Ok(r) => (r, true),
        Err(ForbError::MaxIterExceeded(best)) => (*best, false),
        Err(e) => return Err(e.into()),
    };
    let kkt = result.kkt.residual();
    let status = if converged {
        "converged"
    } else if kkt > cfg.flag_kkt {
        "flagged"
    } else {
        "unconverged"
    };
    let sigma = game.aggregate(&result.omegas);
    let baseline = shortest_path_baseline(net, &pairs, cfg.horizon)?;
    Ok(ScenarioOutcome {
        scenario: 0,
        seed,
        pairs,
        status: status.into(),
        kkt,
        iterations: result.iterations,
        capacity_violation: game.coupling_violation(&result.omegas),
        gne_ratio: peak_load_ratio(net, cfg.horizon, &sigma),
        baseline_ratio: peak_load_ratio(net, cfg.horizon, &baseline.sigma),
        omegas: result.omegas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxVsVRow {
    pub vehicles: usize,
    /// Mean over active (step, edge) pairs and replicates of
    /// `|l(sigma_realized) - l(sigma_expected)|`.
    pub mean_abs_error: f64,
    pub rms_error: f64,
    pub median_abs_error: f64,
}

/// Realized travel times when every agent is split into `V` vehicles that
/// sample their moves from the recovered policies, compared with the latency
/// of the expected occupancy. Only (step, edge) pairs with positive expected
/// occupancy enter the statistics.
pub fn run_approximation_study(
    game: &Game,
    omegas: &[Vec<f64>],
    cfg: &ApproxConfig,
    seed: u64,
) -> Result<Vec<ApproxVsVRow>, GameError> {
    let lay = game.layout();
    let net = game.network();
    let n = game.n_agents();
    let policies = (0..n)
        .map(|i| game.recover_policies(i, &omegas[i], &RecoveryOptions::default()))
        .collect::<Result<Vec<_>, _>>()?;
    let sigma = game.aggregate(omegas);
    let active: Vec<usize> = (0..lay.mass_len()).filter(|&k| sigma[k] > 1e-12).collect();
    let mut rows = Vec::with_capacity(cfg.vehicles.len());
    for &v in &cfg.vehicles {
        let mut errors = Vec::with_capacity(active.len() * cfg.replicates);
        for r in 0..cfg.replicates {
            let counts: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut c = vec![0.0; lay.mass_len()];
                    let start = lay.rho_block(&omegas[i], 0);
                    for vehicle in 0..v {
                        let mut rng = seeded_rng(seed, &[v as u64, r as u64, i as u64, vehicle as u64]);
                        let mut node = sample_index(start, rng.random::<f64>()).expect("initial distribution has mass");
                        for (t, pol) in policies[i].iter().enumerate() {
                            let next = pol.sample(node, rng.random::<f64>());
                            let j = net.edge_index(node, next).expect("policies follow edges");
                            c[lay.mass(t, j)] += 1.0;
                            node = next;
                        }
                    }
                    c
                })
                .collect();
            for &k in &active {
                let realized = counts.iter().map(|c| c[k]).sum::<f64>() / (n * v) as f64;
                let lat = &net.edge(k % lay.n_edges).latency;
                errors.push((lat.value(realized) - lat.value(sigma[k])).abs());
            }
        }
        let count = errors.len().max(1) as f64;
        rows.push(ApproxVsVRow {
            vehicles: v,
            mean_abs_error: errors.iter().sum::<f64>() / count,
            rms_error: (errors.iter().map(|e| e * e).sum::<f64>() / count).sqrt(),
            median_abs_error: quantile(&errors, 0.5),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecedingRow {
    pub horizon: usize,
    /// Realized travel cost summed over agents and steps.
    pub receding_cost: f64,
    pub baseline_cost: f64,
    pub advantage: f64,
    pub relative_advantage: f64,
    /// Mass away from the destinations after the last step, summed over agents.
    pub remaining_mass: f64,
    pub max_kkt: f64,
}

/// Cost of moving every agent's vehicles along the free-flow shortest path
/// for `steps` steps, with the congestion all agents create.
pub fn shortest_path_closed_loop_cost(net: &RoadNetwork, pairs: &[(NodeId, NodeId)], steps: usize) -> Vec<f64> {
    let n = pairs.len();
    let paths: Vec<_> = pairs.iter().map(|&(_, d)| known_path(net, d)).collect();
    let mut nodes: Vec<NodeId> = pairs.iter().map(|p| p.0).collect();
    let mut cost = vec![0.0; n];
    for _ in 0..steps {
        let edges: Vec<usize> = nodes
            .iter()
            .zip(&paths)
            .map(|(&a, kp)| net.edge_index(a, kp.next_hop[a]).expect("known path follows edges"))
            .collect();
        let mut load = vec![0.0; net.n_edges()];
        for &j in &edges {
            load[j] += 1.0 / n as f64;
        }
        for (i, &j) in edges.iter().enumerate() {
            cost[i] += net.edge(j).latency.value(load[j]);
            nodes[i] = net.edge(j).target;
        }
    }
    cost
}

/// Closed-loop receding-horizon routing for each horizon against the
/// shortest-path baseline on the same origin-destination pairs.
pub fn run_receding_benchmark(
    net: Arc<RoadNetwork>,
    pairs: &[(NodeId, NodeId)],
    cfg: &RecedingBenchConfig,
    seed: u64,
) -> Result<Vec<RecedingRow>, ExperimentError> {
    let n = pairs.len();
    let gamma = terminal_cost_gain(&net, n, cfg.stage_lipschitz)?;
    let initial: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(b, _)| {
            let mut r = vec![0.0; net.n_nodes()];
            r[b] = 1.0;
            r
        })
        .collect();
    let dests: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
    let baseline_cost: f64 = shortest_path_closed_loop_cost(&net, pairs, cfg.steps).iter().sum();
    let mut rows = Vec::with_capacity(cfg.horizons.len());
    for &horizon in &cfg.horizons {
        let config = ClosedLoopConfig {
            kappa: KappaOptions {
                horizon,
                costs: RecedingCosts { gamma, stage_weight: 0.0 },
                forb: ForbOptions {
                    tol: cfg.tol,
                    max_iters: cfg.max_iters,
                    ..Default::default()
                },
                recovery: RecoveryOptions::default(),
                accept_unconverged: true,
            },
            steps: cfg.steps,
            vehicles: cfg.vehicles,
            seed: derive_seed(seed, &[0x7263, horizon as u64]),
            mode: UpdateMode::Sampled,
            warm_start: true,
        };
        let trace = closed_loop_run(Arc::clone(&net), &initial, &dests, &config)?;
        let receding_cost: f64 = trace.total_cost().iter().sum();
        let remaining_mass = trace
            .final_rho
            .iter()
            .zip(&dests)
            .map(|(r, &d)| 1.0 - r[d])
            .sum();
        let max_kkt = trace.steps.iter().map(|s| s.kkt).fold(0.0, f64::max);
        let advantage = baseline_cost - receding_cost;
        log::info!("horizon {horizon}: receding {receding_cost:.4}, baseline {baseline_cost:.4}");
        rows.push(RecedingRow {
            horizon,
            receding_cost,
            baseline_cost,
            advantage,
            relative_advantage: if baseline_cost > 0.0 { advantage / baseline_cost } else { 0.0 },
            remaining_mass,
            max_kkt,
        });
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Writes one CSV record per item.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Reproduction record written next to every output set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self, serde_json::Error> {
        Ok(Self {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        let path = dir.join("run_manifest.json");
        let mut f = create(&path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f).and_then(|_| f.flush()).map_err(|source| ExperimentError::Io { path, source })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub open_loop: OpenLoopReport,
    pub approximation: Vec<ApproxVsVRow>,
    pub receding: Vec<RecedingRow>,
}

/// Runs the three studies and writes `congestion.csv`, `congestion_scenarios.csv`,
/// `approx_vs_V.csv`, `receding_advantage.csv` and `run_manifest.json` into `dir`.
pub fn run_bench(config: &ExperimentConfig, dir: &Path) -> Result<BenchReport, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    let net = Arc::new(config.open_loop_network()?);
    let ol = &config.open_loop;
    let open_loop = run_open_loop_benchmark(Arc::clone(&net), ol, config.seed);

    // first solved scenario feeds the approximation study
    let first = open_loop
        .scenarios
        .iter()
        .find(|o| o.solved())
        .ok_or(ExperimentError::NoSolvedScenario)?;
    let agents = first
        .pairs
        .iter()
        .map(|&(start, destination)| AgentSpec {
            feasible: FeasibleSet::OpenLoop {
                start,
                destination,
                epsilon: ol.epsilon,
            },
            local_cost: LocalCost::Zero,
        })
        .collect();
    let game = Game::new(Arc::clone(&net), ol.horizon, agents, ol.capacity_scale)?;
    let approximation = run_approximation_study(
        &game,
        &first.omegas,
        &config.approximation,
        derive_seed(config.seed, &[0x6170]),
    )?;

    let rc = &config.receding;
    let affine = Arc::new(affine_variant(&net, rc.slope)?);
    let pairs = sample_od_pairs(&affine, rc.n_agents, affine.n_nodes(), derive_seed(config.seed, &[0x7270]))
        .ok_or(ExperimentError::NoOdPairs(rc.n_agents))?;
    let receding = run_receding_benchmark(affine, &pairs, rc, config.seed)?;

    write_csv(&dir.join("congestion.csv"), &open_loop.rows)?;
    write_csv(&dir.join("congestion_scenarios.csv"), &scenario_rows(&open_loop.scenarios))?;
    write_csv(&dir.join("approx_vs_V.csv"), &approximation)?;
    write_csv(&dir.join("receding_advantage.csv"), &receding)?;
    let mut manifest = RunManifest::new("bench", config.seed, config)?;
    manifest.outputs = ["congestion.csv", "congestion_scenarios.csv", "approx_vs_V.csv", "receding_advantage.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    manifest.summary = serde_json::json!({
        "gne_spread": open_loop.gne_spread,
        "baseline_spread": open_loop.baseline_spread,
        "gne_max_ratio": open_loop.gne_max_ratio,
        "flagged_scenarios": open_loop.scenarios.iter().filter(|o| o.status != "converged").count(),
        "scenario_seeds": open_loop.scenarios.iter().map(|o| o.seed).collect::<Vec<_>>(),
        "receding_pairs": pairs,
    });
    manifest.write(dir)?;
    Ok(BenchReport {
        open_loop,
        approximation,
        receding,
    })
}

#[derive(Debug, Serialize)]
struct ScenarioCsvRow {
    scenario: usize,
    seed: u64,
    status: String,
    kkt: f64,
    iterations: usize,
    capacity_violation: f64,
    gne_max_ratio: f64,
    baseline_max_ratio: f64,
}

fn scenario_rows(scenarios: &[ScenarioOutcome]) -> Vec<ScenarioCsvRow> {
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NAN, f64::max);
    scenarios
        .iter()
        .map(|o| ScenarioCsvRow {
            scenario: o.scenario,
            seed: o.seed,
            status: o.status.clone(),
            kkt: o.kkt,
            iterations: o.iterations,
            capacity_violation: o.capacity_violation,
            gne_max_ratio: max(&o.gne_ratio),
            baseline_max_ratio: max(&o.baseline_ratio),
        })
        .collect()
}
