//! Euclidean projection onto one agent's feasible polytope.

use std::sync::Arc;

use mdp_routing::game::{AgentSpec, FeasibleSet, Game, LocalCost};
use mdp_routing::network::RoadNetwork;

fn main() {
    let net = Arc::new(RoadNetwork::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diamond.json")).unwrap());
    let agent = AgentSpec {
        feasible: FeasibleSet::OpenLoop { start: 0, destination: 3, epsilon: 0.05 },
        local_cost: LocalCost::Zero,
    };
    let game = Game::new(net, 3, vec![agent], 1.0).unwrap();
    let lay = game.layout();

    // an arbitrary point, far from feasible
    let y: Vec<f64> = (0..lay.dim()).map(|k| ((k * 7) % 5) as f64 * 0.4 - 0.6).collect();
    let x = game.project(0, &y, &mut Default::default()).unwrap();
    let spec = game.projector(0).spec();
    let dist: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    println!("violation before {:.3}, after {:.2e}, distance moved {dist:.4}", spec.violation(&y), spec.violation(&x));
    for t in 0..=lay.horizon {
        println!("  rho_{t} = {:.4?}", lay.rho_block(&x, t));
    }
}
