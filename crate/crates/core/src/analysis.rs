//! Numerical checks of the structural properties of the congestion operator:
//! the monotonicity condition on `zeta`, the closed-form spectrum of the
//! symmetrized Jacobian, Lipschitz constants, and the Bernoulli
//! approximation-error study.

use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::forb::edge_lipschitz;
use crate::game::{Game, GameError};
use crate::network::Latency;
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityEntry {
    pub xi: f64,
    pub zeta: f64,
    pub n_agents: usize,
    pub threshold: f64,
    pub satisfied: bool,
    /// `zeta - threshold`.
    pub margin: f64,
}

/// Sufficient condition `zeta >= max((xi^2 - 8) / 8N, (xi - 2) / 2N)` for the
/// congestion operator to be monotone on `[0, 1]^N`.
pub fn monotonicity_check(xi: f64, zeta: f64, n_agents: usize) -> MonotonicityEntry {
    let n = n_agents as f64;
    let threshold = ((xi * xi - 8.0) / (8.0 * n)).max((xi - 2.0) / (2.0 * n));
    MonotonicityEntry {
        xi,
        zeta,
        n_agents,
        threshold,
        satisfied: zeta >= threshold,
        margin: zeta - threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeMonotonicity {
    pub source: usize,
    pub target: usize,
    #[serde(flatten)]
    pub entry: MonotonicityEntry,
}

/// Per-edge monotonicity report of a network for `n_agents` agents.
pub fn network_monotonicity(game: &Game) -> Vec<EdgeMonotonicity> {
    game.network()
        .edges()
        .iter()
        .map(|e| EdgeMonotonicity {
            source: e.source,
            target: e.target,
            entry: monotonicity_check(e.latency.xi, e.latency.zeta, game.n_agents()),
        })
        .collect()
}

pub fn write_monotonicity_csv<W: Write>(out: W, rows: &[EdgeMonotonicity]) -> Result<(), csv::Error> {
    // csv cannot serialize flattened structs, so write the header by hand
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "target", "xi", "zeta", "n_agents", "threshold", "satisfied", "margin"])?;
    for r in rows {
        let e = &r.entry;
        w.serialize((r.source, r.target, e.xi, e.zeta, e.n_agents, e.threshold, e.satisfied, e.margin))?;
    }
    w.flush()?;
    Ok(())
}

/// The two eigenvalues of `A(y) = 2 (s + zeta) 1 1^T + (xi / N)(y 1^T + 1 y^T)`
/// (with `s` the mean of `y`) that can be nonzero; returned as `(lower, upper)`.
pub fn rank3_eigenvalues(y: &[f64], zeta: f64, xi: f64) -> (f64, f64) {
    let n = y.len() as f64;
    let s = y.iter().sum::<f64>() / n;
    let sq: f64 = y.iter().map(|v| v * v).sum();
    let base = n * (s + zeta);
    let disc = (base * base + 2.0 * n * xi * (s + zeta) * s + xi * xi * sq / n).sqrt();
    (xi * s + base - disc, xi * s + base + disc)
}

/// `T(y)_i = l(mean y) + y_i l'(mean y) / N`.
pub fn congestion_operator(latency: &Latency, y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let s = y.iter().sum::<f64>() / n;
    let (v, d) = (latency.value(s), latency.d1(s));
    y.iter().map(|yi| v + yi * d / n).collect()
}

/// Smallest eigenvalue of `DT(y) + DT(y)^T` from the closed-form spectrum.
pub fn symmetric_jacobian_min_eigenvalue(latency: &Latency, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let s = y.iter().sum::<f64>() / n;
    let Latency { k, zeta, xi, .. } = *latency;
    let base = s + zeta;
    if xi == 0.0 {
        // constant Jacobian (2k/N)(I + 1 1^T)
        return 2.0 * k / n;
    }
    if base == 0.0 {
        return 0.0;
    }
    let (lo, hi) = rank3_eigenvalues(y, zeta, xi);
    // for N >= 3 the remaining eigenvalues of A(y) are zero
    let spectrum_min = match y.len() {
        1 => hi,
        2 => lo,
        _ => lo.min(0.0),
    };
    2.0 * k / n * base.powf(xi) + k / n * base.powf(xi - 1.0) * spectrum_min
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorMonotonicity {
    /// Smallest `<T(y) - T(y'), y - y'>` over the sampled pairs.
    pub min_inner_product: f64,
    /// Smallest eigenvalue of the symmetrized Jacobian over the sampled points.
    pub min_eigenvalue: f64,
}

/// Samples `samples` pairs `y, y'` uniformly in `[0, 1]^N`.
pub fn sampled_operator_monotonicity(latency: &Latency, n_agents: usize, samples: usize, seed: u64) -> OperatorMonotonicity {
    let results: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeded_rng(seed, &[s as u64]);
            let y: Vec<f64> = (0..n_agents).map(|_| rng.random::<f64>()).collect();
            let y2: Vec<f64> = (0..n_agents).map(|_| rng.random::<f64>()).collect();
            let t1 = congestion_operator(latency, &y);
            let t2 = congestion_operator(latency, &y2);
            let inner: f64 = (0..n_agents).map(|i| (t1[i] - t2[i]) * (y[i] - y2[i])).sum();
            (inner, symmetric_jacobian_min_eigenvalue(latency, &y))
        })
        .collect();
    OperatorMonotonicity {
        min_inner_product: results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        min_eigenvalue: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzConstants {
    pub per_edge: Vec<f64>,
    pub local: f64,
    /// `max_i L_i^f + max_e L_e`.
    pub global: f64,
}

pub fn lipschitz_constants(game: &Game) -> LipschitzConstants {
    let n = game.n_agents();
    let per_edge: Vec<f64> = game
        .network()
        .edges()
        .iter()
        .map(|e| edge_lipschitz(&e.latency, n))
        .collect();
    let local = (0..n).map(|i| game.local_lipschitz(i)).fold(0.0, f64::max);
    let global = local + per_edge.iter().copied().fold(0.0, f64::max);
    LipschitzConstants { per_edge, local, global }
}

/// Largest `||F(w) - F(w')|| / ||w - w'||` over random feasible pairs. Half of
/// the pairs are independent points, the other half small perturbations.
pub fn sampled_lipschitz_ratio(game: &Game, pairs: usize, seed: u64) -> Result<f64, GameError> {
    let n = game.n_agents();
    let dim = game.layout().dim();
    let random_point = |rng: &mut rand_chacha::ChaCha8Rng, center: Option<&Vec<Vec<f64>>>| -> Result<Vec<Vec<f64>>, GameError> {
        (0..n)
            .map(|i| {
                let y: Vec<f64> = match center {
                    None => (0..dim).map(|_| rng.random::<f64>()).collect(),
                    Some(c) => c[i].iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)).collect(),
                };
                game.project(i, &y, &mut Default::default())
            })
            .collect()
    };
    let ratios: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map(|p| -> Result<f64, GameError> {
            let mut rng = seeded_rng(seed, &[p as u64]);
            let w1 = random_point(&mut rng, None)?;
            let w2 = if p % 2 == 0 { random_point(&mut rng, None)? } else { random_point(&mut rng, Some(&w1))? };
            let f1 = game.pseudogradient(&w1);
            let f2 = game.pseudogradient(&w2);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for k in 0..dim {
                    num += (f1[i][k] - f2[i][k]).powi(2);
                    den += (w1[i][k] - w2[i][k]).powi(2);
                }
            }
            Ok(if den > 0.0 { (num / den).sqrt() } else { 0.0 })
        })
        .collect::<Result<_, _>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxRow {
    pub n: u64,
    pub mse: f64,
    pub bound: f64,
    pub ratio: f64,
}

/// Mean squared error of `l(sigma_n)` around `l(mean)` where `sigma_n` is the
/// average of `n` Bernoulli(`mean`) variables, against the bound `l'(mean)^2 / 4n`.
pub fn bernoulli_approx_study(latency: &Latency, mean: f64, n_list: &[u64], trials: usize, seed: u64) -> Vec<ApproxRow> {
    let target = latency.value(mean);
    n_list
        .iter()
        .map(|&n| {
            let dist = Binomial::new(n, mean).expect("mean lies in [0, 1]");
            let errors: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = seeded_rng(seed, &[n, trial as u64]);
                    let sigma = dist.sample(&mut rng) as f64 / n as f64;
                    (latency.value(sigma) - target).powi(2)
                })
                .collect();
            let mse = errors.iter().sum::<f64>() / trials as f64;
            let bound = latency.d1(mean).powi(2) / (4.0 * n as f64);
            ApproxRow {
                n,
                mse,
                bound,
                ratio: if bound > 0.0 { mse / bound } else { 0.0 },
            }
        })
        .collect()
}

pub fn write_approx_csv<W: Write>(out: W, rows: &[ApproxRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
