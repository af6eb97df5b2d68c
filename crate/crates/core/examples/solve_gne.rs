//! Solves the capacity-coupled routing game of a scenario file with FoRB.
//!
//! cargo run --example solve_gne [scenario.json]

use std::path::PathBuf;
use std::sync::Arc;

use mdp_routing::forb::{solve_gne, ForbOptions};
use mdp_routing::scenario::ScenarioConfig;

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/diamond_scenario.json"));
    let cfg = ScenarioConfig::load(&path).unwrap();
    let game = cfg.game(Arc::new(cfg.network().unwrap())).unwrap();
    let res = solve_gne(&game, &ForbOptions::default()).expect("converged");
    println!(
        "converged in {} iterations, KKT {:.2e} (alpha {:.3e} to {:.3e}, beta {:.3e})",
        res.iterations,
        res.kkt.residual(),
        res.steps.alpha.iter().copied().fold(f64::INFINITY, f64::min),
        res.steps.alpha.iter().copied().fold(0.0, f64::max),
        res.steps.beta
    );
    let sigma = game.aggregate(&res.omegas);
    let net = game.network();
    let lay = game.layout();
    for (j, e) in net.edges().iter().enumerate().filter(|(_, e)| !e.is_self_loop()) {
        let peak = (0..lay.horizon).map(|t| sigma[lay.mass(t, j)]).fold(0.0, f64::max);
        println!("  {} -> {}: peak load {peak:.3} / capacity {:.3}, price {:.4}", e.source, e.target, e.capacity, res.lambda[j]);
    }
    for i in 0..game.n_agents() {
        println!("  agent {i} cost {:.4}", game.cost(i, &res.omegas[i], &sigma));
    }
}
