//! How closely the continuum model predicts latencies seen by finitely many
//! vehicles.

use std::sync::Arc;

use mdp_routing::analysis::{bernoulli_approx_study, loglog_slope};
use mdp_routing::experiments::{run_approximation_study, ApproxConfig};
use mdp_routing::forb::{solve_gne, ForbOptions};
use mdp_routing::network::LatencyParams;
use mdp_routing::scenario::ScenarioConfig;

fn main() {
    let lat = LatencyParams::Affine { tau: 1.0, k: 2.0 }.normalize();
    let n_list = [100, 1000, 10_000];
    let rows = bernoulli_approx_study(&lat, 0.3, &n_list, 10_000, 1);
    for r in &rows {
        println!("n = {:>6}: MSE {:.3e}, bound {:.3e}", r.n, r.mse, r.bound);
    }
    let slope = loglog_slope(&n_list.map(|n| n as f64), &rows.iter().map(|r| r.mse).collect::<Vec<_>>());
    println!("log-log slope {slope:.3}");

    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diamond_scenario.json");
    let cfg = ScenarioConfig::load(&path).unwrap();
    let game = cfg.game(Arc::new(cfg.network().unwrap())).unwrap();
    let res = solve_gne(&game, &ForbOptions::default()).unwrap();
    let study = ApproxConfig { vehicles: vec![1, 10, 100, 1000], replicates: 10 };
    for r in run_approximation_study(&game, &res.omegas, &study, 1).unwrap() {
        println!("V = {:>4}: mean |error| {:.3e}, rms {:.3e}", r.vehicles, r.mean_abs_error, r.rms_error);
    }
}
