//! A reduced version of the open-loop congestion comparison: equilibrium
//! routing versus everyone on their shortest path.
//!
//! cargo run --release --example congestion_benchmark [scenarios]

use std::sync::Arc;

use mdp_routing::experiments::{run_open_loop_benchmark, ExperimentConfig, OpenLoopConfig};

fn main() {
    let scenarios = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = ExperimentConfig::default();
    let net = Arc::new(cfg.open_loop_network().unwrap());
    let ol = OpenLoopConfig { scenarios, max_iters: 1000, ..cfg.open_loop.clone() };
    let report = run_open_loop_benchmark(net, &ol, cfg.seed);
    for s in &report.scenarios {
        println!(
            "scenario seed {}: {} after {} iterations (KKT {:.1e}), peak load/capacity {:.3} vs baseline {:.3}",
            s.seed,
            s.status,
            s.iterations,
            s.kkt,
            s.gne_ratio.iter().fold(0.0, |m: f64, &r| m.max(r)),
            s.baseline_ratio.iter().fold(0.0, |m: f64, &r| m.max(r))
        );
    }
    println!(
        "median band width: equilibrium {:.3}, shortest path {:.3}",
        report.gne_spread, report.baseline_spread
    );
}
