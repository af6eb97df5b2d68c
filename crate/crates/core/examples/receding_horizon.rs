//! Closed-loop receding-horizon routing with sampled vehicles.

use std::sync::Arc;

use mdp_routing::experiments::{random_network, sample_od_pairs, GeneratorConfig};
use mdp_routing::forb::ForbOptions;
use mdp_routing::game::RecoveryOptions;
use mdp_routing::receding::{closed_loop_run, terminal_cost_gain, ClosedLoopConfig, KappaOptions, RecedingCosts, UpdateMode};

fn main() {
    let net = Arc::new(random_network(&GeneratorConfig::affine_benchmark(2.0), 1).unwrap());
    let n = 4;
    let pairs = sample_od_pairs(&net, n, net.n_nodes(), 3).unwrap();
    let initial: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(b, _)| (0..net.n_nodes()).map(|a| if a == b { 1.0 } else { 0.0 }).collect())
        .collect();
    let dests: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let gamma = terminal_cost_gain(&net, n, 0.0).unwrap();
    let cfg = ClosedLoopConfig {
        kappa: KappaOptions {
            horizon: 3,
            costs: RecedingCosts { gamma, stage_weight: 0.0 },
            forb: ForbOptions { max_iters: 20_000, ..Default::default() },
            recovery: RecoveryOptions::default(),
            accept_unconverged: true,
        },
        steps: 10,
        vehicles: 500,
        seed: 3,
        mode: UpdateMode::Sampled,
        warm_start: true,
    };
    println!("pairs {pairs:?}, terminal gain {gamma:.3}");
    let trace = closed_loop_run(net, &initial, &dests, &cfg).unwrap();
    for (s, norm) in trace.steps.iter().zip(trace.state_norms()) {
        println!(
            "step {:>2}: |x| {norm:.3}, at destination {:.2?}, KKT {:.1e}",
            s.step, s.mass_at_destination, s.kkt
        );
    }
    println!("total cost per agent {:.3?}", trace.total_cost());
}
