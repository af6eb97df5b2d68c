//! The eleven acceptance checks. Each prints one PASS/FAIL line with the
//! measured value, its pinned tolerance and the runtime against its budget.
//! They run sequentially inside one test so the timings are not distorted by
//! sibling tests sharing the cores.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdp_routing::analysis::{
    bernoulli_approx_study, lipschitz_constants, loglog_slope, rank3_eigenvalues, sampled_lipschitz_ratio,
};
use mdp_routing::experiments::{
    random_network, run_approximation_study, run_open_loop_benchmark, sample_od_pairs, ApproxConfig,
    ExperimentConfig, GeneratorConfig,
};
use mdp_routing::forb::{solve_gne, ForbOptions};
use mdp_routing::game::{AgentSpec, FeasibleSet, Game, Layout, LocalCost, RecoveryOptions};
use mdp_routing::polytope::ProjectionState;
use mdp_routing::network::{build_network, EdgeSpec, LatencyParams, NodeId, RoadNetwork};
use mdp_routing::receding::{
    build_lifted_system, closed_loop_run, lyapunov_diagnostics, potential, receding_game, stage_bound_slack,
    stage_relations, terminal_cost_gain, ClosedLoopConfig, KappaOptions, LiftedSystem, RecedingCosts, UpdateMode,
};
use mdp_routing::rng::derive_seed;
use mdp_routing::scenario::ScenarioConfig;

// pinned tolerances
const KKT_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-5;
const REPLAY_TOL: f64 = 1e-9;
const EIGEN_TOL: f64 = 1e-9;
const TRACE_TOL: f64 = 1e-10;
const MONOTONE_TOL: f64 = 1e-9;
const POTENTIAL_REL_TOL: f64 = 1e-6;
const SLACK_TOL: f64 = 1e-9;
const NORM_TARGET: f64 = 1e-3;
const NORM_INCREASE_TOL: f64 = 1e-6;
const SLOPE_TARGET: f64 = -1.0;
const SLOPE_TOL: f64 = 0.2;
const CAPACITY_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

fn open_loop_agents(pairs: &[(NodeId, NodeId)], epsilon: f64) -> Vec<AgentSpec> {
    pairs
        .iter()
        .map(|&(start, destination)| AgentSpec {
            feasible: FeasibleSet::OpenLoop { start, destination, epsilon },
            local_cost: LocalCost::Zero,
        })
        .collect()
}

/// 12-node congestion benchmark game on the first benchmark draw.
fn benchmark_game() -> Game {
    let net = Arc::new(random_network(&GeneratorConfig::congestion_benchmark(8), 1).unwrap());
    let pairs = sample_od_pairs(&net, 8, 6, derive_seed(1, &[0x6f6c, 0])).unwrap();
    Game::new(net, 6, open_loop_agents(&pairs, 0.05), 1.0).unwrap()
}

fn affine_benchmark() -> Arc<RoadNetwork> {
    Arc::new(random_network(&GeneratorConfig::affine_benchmark(2.0), 1).unwrap())
}

// ---------------------------------------------------------------------------
// 1. KKT correctness against a bisection oracle

/// Two routes from 0 to 3: A = 0-1-3 (tau 1, k 2 per edge), B = 0-2-3
/// (tau 1.5, k 1 per edge); road 0-1 has capacity 0.3. Agent 0 also pays
/// `0.5 * w * x^2` on its route-A share.
fn two_route_game(w: f64) -> (Game, usize) {
    let mut specs: Vec<EdgeSpec> = (0..4)
        .map(|a| EdgeSpec { source: a, target: a, params: LatencyParams::Affine { tau: 0.0, k: 0.0 }, capacity: 10.0 })
        .collect();
    let road = |a, b, tau, k, capacity| EdgeSpec { source: a, target: b, params: LatencyParams::Affine { tau, k }, capacity };
    specs.push(road(0, 1, 1.0, 2.0, 0.3));
    specs.push(road(1, 3, 1.0, 2.0, 10.0));
    specs.push(road(0, 2, 1.5, 1.0, 10.0));
    specs.push(road(2, 3, 1.5, 1.0, 10.0));
    specs.push(road(3, 0, 1.0, 1.0, 10.0));
    let net = Arc::new(build_network(4, &specs).unwrap());
    let lay = Layout { n_nodes: 4, n_edges: net.n_edges(), horizon: 2 };
    let e01 = net.edge_index(0, 1).unwrap();
    let mut weights = vec![0.0; lay.dim()];
    weights[lay.mass(0, e01)] = w;
    let mut agents = open_loop_agents(&[(0, 3), (0, 3)], 0.0);
    agents[0].local_cost = LocalCost::Quadratic { weights };
    (Game::new(net, 2, agents, 1.0).unwrap(), lay.mass(0, e01))
}

/// Root of a nondecreasing function on `[lo, hi]`, clipped to the interval.
fn bisect(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if f(lo) >= 0.0 {
        return lo;
    }
    if f(hi) <= 0.0 {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m) > 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

/// Equilibrium route-A shares by nested bisection. With `s` the mean share,
/// agent i's marginal cost of moving mass to route A is
/// `A(s) + 2 x_i - B(1 - s) - (1 - x_i) + w_i x_i + lambda`, where
/// `A(s) = 2 + 4 s` and `B(s') = 3 + 2 s'` are the route latencies.
fn two_route_oracle(w: [f64; 2], capacity_sum: f64) -> [f64; 2] {
    let marginal = |i: usize, xi: f64, xj: f64, lambda: f64| {
        let s = 0.5 * (xi + xj);
        (2.0 + 4.0 * s) + 2.0 * xi - (3.0 + 2.0 * (1.0 - s)) - (1.0 - xi) + w[i] * xi + lambda
    };
    let equilibrium = |lambda: f64| {
        let best_1 = |x2: f64| bisect(|x1| marginal(0, x1, x2, lambda), 0.0, 1.0);
        let x2 = bisect(|x2| marginal(1, x2, best_1(x2), lambda), 0.0, 1.0);
        [best_1(x2), x2]
    };
    let free = equilibrium(0.0);
    if free[0] + free[1] <= capacity_sum {
        return free;
    }
    let lambda = bisect(
        |l| {
            let x = equilibrium(l);
            capacity_sum - x[0] - x[1]
        },
        0.0,
        20.0,
    );
    equilibrium(lambda)
}

fn criterion_1() -> Outcome {
    let (game, idx) = two_route_game(1.0);
    let r = solve_gne(&game, &ForbOptions { tol: KKT_TOL, max_iters: 100_000, ..Default::default() }).unwrap();
    let expect = two_route_oracle([1.0, 0.0], 2.0 * 0.3);
    let err = (0..2).map(|i| (r.omegas[i][idx] - expect[i]).abs()).fold(0.0, f64::max);
    let kkt = r.kkt.residual();
    check(
        kkt <= KKT_TOL && err <= ORACLE_TOL,
        format!("KKT {kkt:.2e} <= {KKT_TOL:.0e}, max |x - oracle| {err:.2e} <= {ORACLE_TOL:.0e} (oracle x = {:.6}, {:.6})", expect[0], expect[1]),
    )
}

// ---------------------------------------------------------------------------
// 2. Policy recovery replays the occupancy dynamics

fn criterion_2() -> Outcome {
    let net = Arc::new(random_network(&GeneratorConfig::congestion_benchmark(8), 1).unwrap());
    let horizon = 6;
    let lay = Layout { n_nodes: net.n_nodes(), n_edges: net.n_edges(), horizon };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut replay_err, mut simplex_err) = (0.0_f64, 0.0_f64);
    let n_samples = 1000;
    let mut games = Vec::new();
    for g in 0..10 {
        let pairs = sample_od_pairs(&net, 1, horizon, 100 + g).unwrap();
        games.push(Game::new(Arc::clone(&net), horizon, open_loop_agents(&pairs, 0.05), 1.0).unwrap());
    }
    for k in 0..n_samples {
        let game = &games[k % games.len()];
        let y: Vec<f64> = (0..lay.dim()).map(|_| rng.random_range(-0.5..1.5)).collect();
        let w = game.project(0, &y, &mut Default::default()).unwrap();
        let policies = game.recover_policies(0, &w, &RecoveryOptions::default()).unwrap();
        for (t, pol) in policies.iter().enumerate() {
            let rho = lay.rho_block(&w, t);
            let next = lay.rho_block(&w, t + 1);
            let mass = lay.mass_block(&w, t);
            for b in 0..lay.n_nodes {
                let pushed: f64 = (0..lay.n_nodes).map(|a| pol.prob(a, b) * rho[a]).sum();
                replay_err = replay_err.max((pushed - next[b]).abs());
            }
            for (j, e) in net.edges().iter().enumerate() {
                replay_err = replay_err.max((pol.prob(e.source, e.target) * rho[e.source] - mass[j]).abs());
            }
            for a in 0..lay.n_nodes {
                let col: Vec<f64> = (0..lay.n_nodes).map(|b| pol.prob(a, b)).collect();
                simplex_err = simplex_err.max((col.iter().sum::<f64>() - 1.0).abs());
                simplex_err = simplex_err.max(col.iter().fold(0.0, |m, &p| m.max(-p)));
            }
        }
    }
    check(
        replay_err <= REPLAY_TOL && simplex_err <= REPLAY_TOL,
        format!("{n_samples} random feasible points: replay error {replay_err:.2e}, simplex error {simplex_err:.2e}, both <= {REPLAY_TOL:.0e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Closed-form spectrum of the rank-3 matrix

fn criterion_3() -> Outcome {
    use nalgebra::{DMatrix, SymmetricEigen};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut eig_err, mut trace_err) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let nf = n as f64;
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let zeta = rng.random::<f64>();
        let xi = rng.random_range(0.5..5.0);
        let s = y.iter().sum::<f64>() / nf;
        // 2 (s + zeta) 1 1^T + (xi / N)(y 1^T + 1 y^T), scaled by N
        let a = DMatrix::from_fn(n, n, |i, j| 2.0 * (s + zeta) + xi / nf * (y[i] + y[j]));
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let mut nonzero: Vec<f64> = eig.iter().copied().filter(|v| v.abs() > 1e-7).collect();
        nonzero.sort_by(f64::total_cmp);
        let (lo, hi) = rank3_eigenvalues(&y, zeta, xi);
        let mut closed: Vec<f64> = [lo, hi].into_iter().filter(|v| v.abs() > 1e-7).collect();
        closed.sort_by(f64::total_cmp);
        if nonzero.len() != closed.len() {
            eig_err = f64::INFINITY;
            continue;
        }
        for (p, q) in nonzero.iter().zip(&closed) {
            eig_err = eig_err.max((p - q).abs());
        }
        trace_err = trace_err.max((lo + hi - a.trace()).abs());
    }
    check(
        eig_err <= EIGEN_TOL && trace_err <= TRACE_TOL,
        format!("100 random y: eigenvalue error {eig_err:.2e} <= {EIGEN_TOL:.0e}, trace error {trace_err:.2e} <= {TRACE_TOL:.0e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Monotone congestion operator at the offset threshold

fn criterion_4() -> Outcome {
    let (xi, n, zeta) = (3.0, 8usize, 1.0 / 16.0);
    let threshold = mdp_routing::analysis::monotonicity_check(xi, zeta, n).threshold;
    // l(s) = 1 + (s + zeta)^(xi + 1) / (xi + 1), l'(s) = (s + zeta)^xi
    let op = |y: &[f64]| -> Vec<f64> {
        let s = y.iter().sum::<f64>() / n as f64;
        let (v, d) = (1.0 + (s + zeta).powf(xi + 1.0) / (xi + 1.0), (s + zeta).powf(xi));
        y.iter().map(|yi| v + yi * d / n as f64).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = f64::INFINITY;
    for _ in 0..10_000 {
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (t1, t2) = (op(&y), op(&y2));
        let inner: f64 = (0..n).map(|i| (t1[i] - t2[i]) * (y[i] - y2[i])).sum();
        worst = worst.min(inner);
    }
    let lat = LatencyParams::Monomial { tau: 1.0, k: 1.0, zeta, xi }.normalize();
    let lib = mdp_routing::analysis::sampled_operator_monotonicity(&lat, n, 10_000, 4);
    check(
        worst >= -MONOTONE_TOL && lib.min_inner_product >= -MONOTONE_TOL && (threshold - zeta).abs() < 1e-15,
        format!(
            "zeta = threshold = {threshold}: min inner product {worst:.3e} (library {:.3e}) >= -{MONOTONE_TOL:.0e} over 10^4 pairs",
            lib.min_inner_product
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Lipschitz constant of the pseudogradient

fn criterion_5() -> Outcome {
    let game = benchmark_game();
    let bound = lipschitz_constants(&game).global;
    let n = game.n_agents();
    let dim = game.layout().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // a pool of feasible points; pairs are drawn from the pool and from small
    // perturbations of pool points (warm-started projections keep this cheap)
    let pool: Vec<(Vec<Vec<f64>>, Vec<ProjectionState>)> = (0..100)
        .map(|_| {
            let mut states: Vec<ProjectionState> = (0..n).map(|_| ProjectionState::default()).collect();
            let w = (0..n)
                .map(|i| {
                    let y: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
                    game.project(i, &y, &mut states[i]).unwrap()
                })
                .collect();
            (w, states)
        })
        .collect();
    let ratio = |w1: &[Vec<f64>], w2: &[Vec<f64>]| {
        let (f1, f2) = (game.pseudogradient(w1), game.pseudogradient(w2));
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for k in 0..dim {
                num += (f1[i][k] - f2[i][k]).powi(2);
                den += (w1[i][k] - w2[i][k]).powi(2);
            }
        }
        if den > 0.0 { (num / den).sqrt() } else { 0.0 }
    };
    let mut worst = 0.0_f64;
    let mut pairs = 0;
    for p in 0..1000 {
        let a = p % pool.len();
        if p < 700 {
            let b = (a + 1 + rng.random_range(0..pool.len() - 1)) % pool.len();
            worst = worst.max(ratio(&pool[a].0, &pool[b].0));
        } else {
            let (center, states) = &pool[a];
            let near: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let y: Vec<f64> = center[i].iter().map(|v| v + 0.01 * (rng.random::<f64>() - 0.5)).collect();
                    game.project(i, &y, &mut states[i].clone()).unwrap()
                })
                .collect();
            worst = worst.max(ratio(center, &near));
        }
        pairs += 1;
    }
    let lib = sampled_lipschitz_ratio(&game, 100, 5).unwrap();
    let worst = worst.max(lib);
    check(worst <= bound, format!("max sampled ratio {worst:.4} <= L = {bound:.4} over {} feasible pairs", pairs + 100))
}

// ---------------------------------------------------------------------------
// 6. Potential gradient of the receding-horizon game

fn criterion_6() -> Outcome {
    let net = affine_benchmark();
    let n = 8;
    let horizon = 2;
    let pairs = sample_od_pairs(&net, n, 12, 6).unwrap();
    let dests: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
    let sys = build_lifted_system(Arc::clone(&net), &dests).unwrap();
    let costs = RecedingCosts { gamma: terminal_cost_gain(&net, n, 0.0).unwrap(), stage_weight: 0.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0_f64;
    let h = 1e-6;
    for point in 0..100 {
        let rho: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, net.n_nodes())).collect();
        let game = receding_game(Arc::clone(&net), &dests, &rho, horizon, &costs).unwrap();
        let lay = game.layout();
        let omegas: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let y: Vec<f64> = (0..lay.dim()).map(|_| rng.random::<f64>()).collect();
                game.project(i, &y, &mut Default::default()).unwrap()
            })
            .collect();
        let x_in: Vec<Vec<f64>> = rho.iter().enumerate().map(|(i, r)| sys.state_of(i, r)).collect();
        let inputs: Vec<Vec<Vec<f64>>> = (0..horizon)
            .map(|t| omegas.iter().enumerate().map(|(i, w)| sys.input_of(i, lay.mass_block(w, t))).collect())
            .collect();
        // chain rule through rho_{t+1} = B M_t turns the game gradient into
        // a gradient with respect to the inputs
        let grads = game.pseudogradient(&omegas);
        // one agent and step per point keeps the finite differences affordable
        let i = point % n;
        let t = point % horizon;
        for (j, e) in net.edges().iter().enumerate() {
            let g = lay.mass_block(&grads[i], t)[j] + lay.rho_block(&grads[i], t + 1)[e.target];
            let mut plus = inputs.clone();
            plus[t][i][j] += h;
            let mut minus = inputs.clone();
            minus[t][i][j] -= h;
            let fd = (potential(&sys, &costs, &x_in, &plus) - potential(&sys, &costs, &x_in, &minus)) / (2.0 * h);
            worst = worst.max((fd - g).abs() / g.abs().max(1.0));
        }
    }
    check(
        worst <= POTENTIAL_REL_TOL,
        format!("100 random points: max relative error {worst:.2e} <= {POTENTIAL_REL_TOL:.0e}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Lyapunov and stage-cost inequalities

/// A random distribution pushed through a random policy that never waits
/// away from the destination gives a random pair in `Z_i`.
fn random_stage_pair(sys: &LiftedSystem, i: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let net = sys.network();
    let d = sys.destinations()[i];
    let rho = random_simplex(rng, sys.n_nodes());
    let mut m = vec![0.0; sys.n_edges()];
    for a in 0..sys.n_nodes() {
        let out: Vec<usize> =
            net.out_edges(a).iter().copied().filter(|&j| !net.edge(j).is_self_loop() || a == d).collect();
        let w = random_simplex(rng, out.len());
        for (j, p) in out.iter().zip(w) {
            m[*j] = rho[a] * p;
        }
    }
    (sys.state_of(i, &rho), sys.input_of(i, &m))
}

fn criterion_7() -> Outcome {
    let net = affine_benchmark();
    let n = 8;
    let pairs = sample_od_pairs(&net, n, 12, 7).unwrap();
    let dests: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
    let sys = build_lifted_system(Arc::clone(&net), &dests).unwrap();
    let costs = RecedingCosts { gamma: terminal_cost_gain(&net, n, 0.0).unwrap(), stage_weight: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::INFINITY;
    let mut outside_z = 0;
    for _ in 0..1000 {
        let x: Vec<Vec<f64>> = (0..n).map(|i| sys.state_of(i, &random_simplex(&mut rng, net.n_nodes()))).collect();
        worst = worst.min(lyapunov_diagnostics(&sys, &costs, &x).min_slack());
        let pairs: Vec<_> = (0..n).map(|i| random_stage_pair(&sys, i, &mut rng)).collect();
        for (i, (xi, ui)) in pairs.iter().enumerate() {
            if !sys.contains_z(i, xi, ui, 1e-12) {
                outside_z += 1;
            }
            worst = stage_relations(&sys, i, xi, ui).iter().fold(worst, |m, &s| m.min(s));
        }
        let (xs, us): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        worst = worst.min(stage_bound_slack(&sys, &costs, &xs, &us));
    }
    check(
        worst >= -SLACK_TOL && outside_z == 0,
        format!("10^3 random states, gamma = {:.4}: min slack {worst:.3e} >= -{SLACK_TOL:.0e}", costs.gamma),
    )
}

// ---------------------------------------------------------------------------
// 8. Closed-loop convergence in expected-update mode

fn criterion_8() -> Outcome {
    let net = affine_benchmark();
    let n = 8;
    let pairs = sample_od_pairs(&net, n, 12, 1).unwrap();
    let initial: Vec<Vec<f64>> = pairs.iter().map(|&(b, _)| one_hot(net.n_nodes(), b)).collect();
    let dests: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
    let gamma = terminal_cost_gain(&net, n, 0.0).unwrap();
    let cfg = ClosedLoopConfig {
        kappa: KappaOptions {
            horizon: 3,
            costs: RecedingCosts { gamma, stage_weight: 0.0 },
            forb: ForbOptions { tol: 1e-6, max_iters: 20_000, ..Default::default() },
            recovery: RecoveryOptions::default(),
            accept_unconverged: true,
        },
        steps: 50,
        vehicles: 1,
        seed: 8,
        mode: UpdateMode::Expected,
        warm_start: true,
    };
    let trace = closed_loop_run(net, &initial, &dests, &cfg).unwrap();
    let norms = trace.state_norms();
    let max_increase = norms.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let reached = norms.iter().position(|&v| v < NORM_TARGET);
    check(
        reached.is_some() && max_increase <= NORM_INCREASE_TOL,
        format!(
            "|x| {:.3} -> {:.2e}, below {NORM_TARGET:.0e} after {} steps, largest step increase {max_increase:.2e} <= {NORM_INCREASE_TOL:.0e}",
            norms[0],
            norms.last().unwrap(),
            reached.map_or("no".into(), |k| k.to_string())
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Sampling error shrinks with the number of vehicles

fn criterion_9() -> Outcome {
    let lat = LatencyParams::Affine { tau: 1.0, k: 2.0 }.normalize();
    let n_list = [100u64, 1_000, 10_000];
    let rows = bernoulli_approx_study(&lat, 0.3, &n_list, 10_000, 9);
    let slope = loglog_slope(&n_list.map(|v| v as f64), &rows.iter().map(|r| r.mse).collect::<Vec<_>>());

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diamond_scenario.json");
    let cfg = ScenarioConfig::load(&path).unwrap();
    let game = cfg.game(Arc::new(cfg.network().unwrap())).unwrap();
    let solved = solve_gne(&game, &ForbOptions::default()).unwrap();
    let study = ApproxConfig { vehicles: vec![1, 10, 100, 1000], replicates: 10 };
    let errors: Vec<f64> = run_approximation_study(&game, &solved.omegas, &study, 9)
        .unwrap()
        .iter()
        .map(|r| r.mean_abs_error)
        .collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    check(
        (slope - SLOPE_TARGET).abs() <= SLOPE_TOL && decreasing,
        format!(
            "MSE slope {slope:.3} within {SLOPE_TARGET} +- {SLOPE_TOL}; travel-time error for V = 1, 10, 100, 1000: {}",
            errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Congestion comparison on 20 scenarios

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig::default();
    let net = Arc::new(cfg.open_loop_network().unwrap());
    let report = run_open_loop_benchmark(net, &cfg.open_loop, cfg.seed);
    let solved = report.scenarios.iter().filter(|o| o.solved()).count();
    let flagged = report.scenarios.iter().filter(|o| o.status != "converged").count();
    let worst_kkt = report.scenarios.iter().map(|o| o.kkt).fold(0.0, f64::max);
    check(
        solved == 20 && report.gne_max_ratio <= 1.0 + CAPACITY_TOL && report.gne_spread < report.baseline_spread,
        format!(
            "{solved}/20 solved, max sigma/c {:.4} <= 1 + {CAPACITY_TOL:.0e}, median spread {:.4} < baseline {:.4}; {flagged} flagged above KKT 1e-5 (worst {worst_kkt:.2e} after {} iterations)",
            report.gne_max_ratio, report.gne_spread, report.baseline_spread, cfg.open_loop.max_iters
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Byte-identical bench outputs

fn criterion_11() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/bench_small.json");
    let run = |dir: &Path, threads: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_mdp-routing"))
            .args(["bench", "--config"])
            .arg(&config)
            .args(["--seed", "11", "--threads", threads, "--output-dir"])
            .arg(dir)
            .env_remove("MDPROUTE_OUTPUT_DIR")
            .status()
            .unwrap();
        assert!(status.success());
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), "1");
    run(b.path(), "2");
    let files = ["congestion.csv", "congestion_scenarios.csv", "approx_vs_V.csv", "receding_advantage.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    check(
        differing.is_empty(),
        format!("two bench runs (1 and 2 threads): {} CSVs compared, differing: {differing:?}", files.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(u8, &str, fn() -> Outcome, u64); 11] = [
        (1, "KKT correctness", criterion_1, 1),
        (2, "policy recovery round trip", criterion_2, 10),
        (3, "closed-form eigenvalues", criterion_3, 5),
        (4, "monotone congestion operator", criterion_4, 10),
        (5, "pseudogradient Lipschitz constant", criterion_5, 30),
        (6, "potential gradient", criterion_6, 30),
        (7, "Lyapunov inequalities", criterion_7, 30),
        (8, "closed-loop convergence", criterion_8, 300),
        (9, "sampling error trend", criterion_9, 120),
        (10, "congestion trend", criterion_10, 600),
        (11, "determinism", criterion_11, 600),
    ];
    let mut failed = Vec::new();
    for (id, name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = outcome.pass && in_time;
        // written to stdout directly so the harness does not capture it
        let mut out = std::io::stdout().lock();
        writeln!(
            out,
            "criterion {id:>2} [{}] {name}: {}; {:.2} s (budget {budget} s)",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        )
        .unwrap();
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
