use std::sync::Arc;

use proptest::prelude::*;

use mdp_routing::experiments::quantile;
use mdp_routing::game::{sample_index, AgentSpec, FeasibleSet, Game, LocalCost, RecoveryOptions};
use mdp_routing::network::{build_network, EdgeSpec, LatencyParams};

/// Diamond 0-1-3 / 0-2-3 with a return edge and free self-loops.
fn game(horizon: usize, epsilon: f64) -> Game {
    let mut specs: Vec<EdgeSpec> = (0..4)
        .map(|a| EdgeSpec { source: a, target: a, params: LatencyParams::Affine { tau: 0.0, k: 0.0 }, capacity: 1.0 })
        .collect();
    for (a, b, tau) in [(0, 1, 1.0), (1, 3, 1.0), (0, 2, 1.5), (2, 3, 1.0), (3, 0, 1.0)] {
        specs.push(EdgeSpec { source: a, target: b, params: LatencyParams::Affine { tau, k: 1.0 }, capacity: 0.6 });
    }
    let net = Arc::new(build_network(4, &specs).unwrap());
    let agents = vec![AgentSpec {
        feasible: FeasibleSet::OpenLoop { start: 0, destination: 3, epsilon },
        local_cost: LocalCost::Zero,
    }];
    Game::new(net, horizon, agents, 1.0).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_feasible_idempotent_and_nearest(
        horizon in 2usize..5,
        seed in prop::collection::vec(-2.0f64..2.0, 200),
        other in prop::collection::vec(-2.0f64..2.0, 200),
    ) {
        let g = game(horizon, 0.05);
        let dim = g.layout().dim();
        let spec = g.projector(0).spec();
        let x = g.project(0, &seed[..dim], &mut Default::default()).unwrap();
        prop_assert!(spec.violation(&x) <= 1e-9);
        let again = g.project(0, &x, &mut Default::default()).unwrap();
        prop_assert!(x.iter().zip(&again).all(|(a, b)| (a - b).abs() <= 1e-8));
        // variational inequality against another feasible point
        let z = g.project(0, &other[..dim], &mut Default::default()).unwrap();
        let r: Vec<f64> = seed[..dim].iter().zip(&x).map(|(y, p)| y - p).collect();
        let d: Vec<f64> = z.iter().zip(&x).map(|(z, p)| z - p).collect();
        prop_assert!(dot(&r, &d) <= 1e-7);
    }

    #[test]
    fn recovered_policies_are_stochastic(seed in prop::collection::vec(-1.0f64..2.0, 200)) {
        let g = game(4, 0.05);
        let dim = g.layout().dim();
        let x = g.project(0, &seed[..dim], &mut Default::default()).unwrap();
        let lay = g.layout();
        let neighbor = RecoveryOptions { neighbor_fallback: true, ..Default::default() };
        let literal = g.recover_policies(0, &x, &RecoveryOptions::default()).unwrap();
        let local = g.recover_policies(0, &x, &neighbor).unwrap();
        for (t, (pol, loc)) in literal.iter().zip(&local).enumerate() {
            for a in 0..4 {
                for col in [pol.column(a), loc.column(a)] {
                    prop_assert!(col.iter().all(|&p| p >= 0.0));
                    prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
                // with the neighbor fallback only existing roads carry probability
                for (b, &p) in loc.column(a).iter().enumerate() {
                    if p > 0.0 {
                        prop_assert!(g.network().edge_index(a, b).is_some());
                    }
                }
                // the two fallbacks differ only where the agent has no mass
                if lay.rho_block(&x, t)[a] > 1e-12 {
                    prop_assert_eq!(pol.column(a), loc.column(a));
                } else {
                    prop_assert!(pol.column(a).iter().all(|&p| (p - 0.25).abs() < 1e-15));
                }
            }
        }
    }

    #[test]
    fn sample_index_inverts_the_cdf(raw in prop::collection::vec(0.0f64..1.0, 1..10), u in 0.0f64..1.0) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let k = sample_index(&w, u).unwrap();
        prop_assert!(w[k] > 0.0);
        let below: f64 = w[..k].iter().sum();
        prop_assert!(below <= u + 1e-12);
        let last_positive = w.iter().rposition(|&p| p > 0.0).unwrap();
        prop_assert!(k == last_positive || u < below + w[k]);
    }

    #[test]
    fn quantile_is_monotone_and_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..30), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (a, b) = (quantile(&v, lo), quantile(&v, hi));
        prop_assert!(a <= b + 1e-12);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= min && b <= max);
        prop_assert_eq!(quantile(&v, 0.0), min);
        prop_assert_eq!(quantile(&v, 1.0), max);
    }
}

#[test]
fn sample_index_of_zero_weights_is_none() {
    assert_eq!(sample_index(&[0.0, 0.0], 0.3), None);
}
