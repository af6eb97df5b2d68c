//! Checks the offset condition that makes a polynomial congestion operator
//! monotone, and probes the operator numerically on both sides of it.

use mdp_routing::analysis::{monotonicity_check, sampled_operator_monotonicity};
use mdp_routing::network::LatencyParams;

fn main() {
    let n = 8;
    for xi in [1.0, 2.0, 3.0, 4.0] {
        let entry = monotonicity_check(xi, 0.0, n);
        let zeta = entry.threshold.max(0.0);
        let at = LatencyParams::Monomial { tau: 1.0, k: 1.0, zeta, xi }.normalize();
        let below = LatencyParams::Monomial { tau: 1.0, k: 1.0, zeta: 0.0, xi }.normalize();
        let ok = sampled_operator_monotonicity(&at, n, 5000, 1);
        let raw = sampled_operator_monotonicity(&below, n, 5000, 1);
        println!(
            "xi = {xi}: threshold {:.4}; min Jacobian eigenvalue at threshold {:.2e}, without offset {:.2e}",
            entry.threshold, ok.min_eigenvalue, raw.min_eigenvalue
        );
    }
}
