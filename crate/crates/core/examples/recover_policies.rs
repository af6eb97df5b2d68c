//! Turns an equilibrium occupancy measure back into time-varying policies
//! and replays them.

use std::sync::Arc;

use mdp_routing::forb::{solve_gne, ForbOptions};
use mdp_routing::game::RecoveryOptions;
use mdp_routing::scenario::ScenarioConfig;

fn main() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diamond_scenario.json");
    let cfg = ScenarioConfig::load(&path).unwrap();
    let game = cfg.game(Arc::new(cfg.network().unwrap())).unwrap();
    let res = solve_gne(&game, &ForbOptions::default()).unwrap();
    let lay = game.layout();
    let omega = &res.omegas[0];
    // nodes the agent never visits get a uniform column over all nodes;
    // `neighbor_fallback` restricts it to outgoing roads
    let policies = game.recover_policies(0, omega, &RecoveryOptions::default()).unwrap();

    let mut rho = lay.rho_block(omega, 0).to_vec();
    for (t, pol) in policies.iter().enumerate() {
        println!("step {t}");
        for a in 0..lay.n_nodes {
            let moves: Vec<String> = (0..lay.n_nodes)
                .filter(|&b| pol.prob(a, b) > 0.0)
                .map(|b| format!("{b}:{:.3}", pol.prob(a, b)))
                .collect();
            println!("  from {a}: {}", moves.join(" "));
        }
        rho = pol.apply(&rho);
        let gap = rho.iter().zip(lay.rho_block(omega, t + 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("  replayed distribution {rho:.4?} (gap {gap:.1e})");
    }
}
