//! Forward-reflected-backward iterations for the generalized Nash equilibrium
//! of a [`Game`], and the uncoupled variant for plain Nash equilibria.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::game::{Game, GameError, KktReport};
use crate::network::Latency;
use crate::polytope::ProjectionState;

#[derive(Debug, Error)]
pub enum ForbError {
    #[error("inertia parameter {0} is outside [0, 1/3)")]
    ThetaOutOfRange(f64),
    #[error("no convergence after {} iterations (KKT residual {:e})", .0.iterations, .0.kkt.residual())]
    MaxIterExceeded(Box<ForbResult>),
    #[error("non-finite iterate at iteration {0}")]
    NonFiniteIterate(usize),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForbOptions {
    /// Inertia, in `[0, 1/3)`.
    pub theta: f64,
    /// Target KKT residual.
    pub tol: f64,
    pub max_iters: usize,
    /// The KKT residual is evaluated (and a trace row recorded) every this many iterations.
    pub check_every: usize,
}

impl Default for ForbOptions {
    fn default() -> Self {
        Self {
            theta: 0.2,
            tol: 1e-6,
            max_iters: 100_000,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    /// Lipschitz constant of the pseudogradient used to derive the steps.
    pub lipschitz: f64,
    pub delta: f64,
    /// Primal step of each agent.
    pub alpha: Vec<f64>,
    /// Dual step.
    pub beta: f64,
}

/// Lipschitz bound of the congestion part of the pseudogradient on one edge,
/// valid for occupancies in `[0, 1]`.
pub fn edge_lipschitz(latency: &Latency, n_agents: usize) -> f64 {
    let n = n_agents as f64;
    let Latency { k, zeta, xi, .. } = *latency;
    let curvature = if xi == 0.0 { 0.0 } else { xi * (1.0 + zeta).powf(xi - 1.0) };
    2.0 * k / n * ((1.0 + n) * (1.0 + zeta).powf(xi) + curvature)
}

/// Step sizes from the convergence condition, with `delta` taken 1% above
/// its lower bound `2L / (1 - 3 theta)`. For congestion-free games (`L = 0`)
/// any step is admissible; `delta` is then floored at [`MIN_DELTA`] to keep
/// the projected points at a sane magnitude.
pub const MIN_DELTA: f64 = 1e-2;

pub fn step_sizes(game: &Game, theta: f64, coupled: bool) -> Result<StepSizes, ForbError> {
    if !(0.0..1.0 / 3.0).contains(&theta) {
        return Err(ForbError::ThetaOutOfRange(theta));
    }
    let n = game.n_agents();
    let l_local = (0..n).map(|i| game.local_lipschitz(i)).fold(0.0, f64::max);
    let l_edge = game
        .network()
        .edges()
        .iter()
        .map(|e| edge_lipschitz(&e.latency, n))
        .fold(0.0, f64::max);
    let lipschitz = l_local + l_edge;
    let delta = (2.0 * lipschitz / (1.0 - 3.0 * theta) * 1.01).max(MIN_DELTA);
    let norm_a = if coupled { game.coupling_norm() } else { 0.0 };
    Ok(StepSizes {
        lipschitz,
        delta,
        alpha: vec![1.0 / (norm_a + delta); n],
        beta: n as f64 / (n as f64 * norm_a + delta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub kkt_residual: f64,
    pub primal_violation: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ForbResult {
    pub omegas: Vec<Vec<f64>>,
    /// Multipliers of the coupling constraint (all zero for [`solve_ne`]).
    pub lambda: Vec<f64>,
    pub kkt: KktReport,
    /// Iteration at which the returned point was produced.
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub steps: StepSizes,
}

/// Writes `iter,kkt_residual,primal_violation,wall_time_ms` rows.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Starting point of the iteration; primal parts are projected onto the feasible sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Init {
    pub omegas: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

/// Generalized Nash equilibrium with the shared capacity constraint, started
/// from the projection of the uniform vector.
pub fn solve_gne(game: &Game, opts: &ForbOptions) -> Result<ForbResult, ForbError> {
    run(game, None, opts, true)
}

pub fn solve_gne_from(game: &Game, init: &Init, opts: &ForbOptions) -> Result<ForbResult, ForbError> {
    run(game, Some(init), opts, true)
}

/// Nash equilibrium ignoring the capacity constraint.
pub fn solve_ne(game: &Game, opts: &ForbOptions) -> Result<ForbResult, ForbError> {
    run(game, None, opts, false)
}

pub fn solve_ne_from(game: &Game, init: &Init, opts: &ForbOptions) -> Result<ForbResult, ForbError> {
    run(game, Some(init), opts, false)
}

fn run(game: &Game, init: Option<&Init>, opts: &ForbOptions, coupled: bool) -> Result<ForbResult, ForbError> {
    let steps = step_sizes(game, opts.theta, coupled)?;
    let theta = opts.theta;
    let n = game.n_agents();
    let len = game.layout().mass_len();
    let share: Vec<f64> = game.capacity().iter().map(|b| b / n as f64).collect();
    let check_every = opts.check_every.max(1);
    let started = Instant::now();

    let mut states: Vec<ProjectionState> = vec![ProjectionState::default(); n];
    let (mut omega, mut lambda) = match init {
        None => (
            (0..n).map(|i| game.uniform_start(i)).collect::<Result<Vec<_>, _>>()?,
            vec![0.0; len],
        ),
        Some(init) => {
            if init.omegas.len() != n {
                return Err(GameError::DimensionMismatch { expected: n, got: init.omegas.len() }.into());
            }
            let omegas = init
                .omegas
                .iter()
                .zip(states.iter_mut())
                .enumerate()
                .map(|(i, (w, state))| game.project(i, w, state))
                .collect::<Result<Vec<_>, _>>()?;
            let lambda = if coupled {
                if init.lambda.len() != len {
                    return Err(GameError::DimensionMismatch { expected: len, got: init.lambda.len() }.into());
                }
                init.lambda.iter().map(|l| l.max(0.0)).collect()
            } else {
                vec![0.0; len]
            };
            (omegas, lambda)
        }
    };
    let mut omega_bar = omega.clone();
    let mut lambda_bar = lambda.clone();
    let mut grad_prev = game.pseudogradient(&omega);
    let mut trace = Vec::new();
    let mut kkt = game.kkt_residual(&omega, &lambda, coupled)?;
    trace.push(TraceRow {
        iter: 0,
        kkt_residual: kkt.residual(),
        primal_violation: kkt.primal_violation,
        wall_time_ms: 0.0,
    });
    let finish = |omega, lambda, kkt, iterations, trace| ForbResult {
        omegas: omega,
        lambda,
        kkt,
        iterations,
        trace,
        steps: steps.clone(),
    };
    if kkt.residual() <= opts.tol {
        return Ok(finish(omega, lambda, kkt, 0, trace));
    }
    let mut best = (omega.clone(), lambda.clone(), kkt, 0);

    for iter in 1..=opts.max_iters {
        let grad = game.pseudogradient(&omega);
        let next: Vec<Vec<f64>> = omega_bar
            .par_iter()
            .zip(states.par_iter_mut())
            .enumerate()
            .map(|(i, (bar, state))| {
                let a = steps.alpha[i];
                let mut y: Vec<f64> = bar
                    .iter()
                    .zip(grad[i].iter().zip(&grad_prev[i]))
                    .map(|(x, (g, gp))| x - a * (2.0 * g - gp))
                    .collect();
                if coupled {
                    for (yk, l) in y[..len].iter_mut().zip(&lambda) {
                        *yk -= a * l;
                    }
                }
                game.project(i, &y, state)
            })
            .collect::<Result<_, _>>()?;
        if next.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ForbError::NonFiniteIterate(iter));
        }

        if coupled {
            let mut lambda_next = vec![0.0; len];
            for k in 0..len {
                let mut d = 0.0;
                for i in 0..n {
                    d += 2.0 * next[i][k] - omega[i][k] - share[k];
                }
                lambda_next[k] = (lambda_bar[k] + steps.beta * d / n as f64).max(0.0);
            }
            for k in 0..len {
                lambda_bar[k] = lambda_next[k] + theta * (lambda_next[k] - lambda[k]);
            }
            lambda = lambda_next;
        }
        for i in 0..n {
            for (b, (x1, x0)) in omega_bar[i].iter_mut().zip(next[i].iter().zip(&omega[i])) {
                *b = x1 + theta * (x1 - x0);
            }
        }
        omega = next;
        grad_prev = grad;

        if iter % check_every == 0 || iter == opts.max_iters {
            kkt = game.kkt_residual(&omega, &lambda, coupled)?;
            if !kkt.residual().is_finite() {
                return Err(ForbError::NonFiniteIterate(iter));
            }
            trace.push(TraceRow {
                iter,
                kkt_residual: kkt.residual(),
                primal_violation: kkt.primal_violation,
                wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            log::debug!("forb iter {iter}: kkt {:e}", kkt.residual());
            if kkt.residual() <= opts.tol {
                return Ok(finish(omega, lambda, kkt, iter, trace));
            }
            if kkt.residual() < best.2.residual() {
                best = (omega.clone(), lambda.clone(), kkt, iter);
            }
        }
    }
    let (omega, lambda, kkt, iterations) = best;
    Err(ForbError::MaxIterExceeded(Box::new(finish(omega, lambda, kkt, iterations, trace))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::{diamond, open_loop_agents};
    use std::sync::Arc;

    #[test]
    fn edge_lipschitz_example() {
        assert_eq!(edge_lipschitz(&Latency::affine(1.0, 1.0), 1), 4.0);
    }

    #[test]
    fn step_size_formulas() {
        let game = Game::new(diamond(1.0), 2, open_loop_agents(8, 0.0), 1.0).unwrap();
        let s = step_sizes(&game, 0.2, true).unwrap();
        assert!((s.lipschitz - 2.0 / 8.0 * 9.0).abs() < 1e-12);
        assert!((s.delta - 2.0 * s.lipschitz / 0.4 * 1.01).abs() < 1e-12);
        assert!((s.alpha[0] - 1.0 / (1.0 + s.delta)).abs() < 1e-15);
        assert!((s.beta - 8.0 / (8.0 + s.delta)).abs() < 1e-15);
        assert!(matches!(step_sizes(&game, 0.34, true), Err(ForbError::ThetaOutOfRange(_))));
        assert!(matches!(step_sizes(&game, -0.1, true), Err(ForbError::ThetaOutOfRange(_))));
    }

    #[test]
    fn symmetric_agents_split_evenly() {
        let game = Game::new(diamond(1.0), 2, open_loop_agents(2, 0.0), 1.0).unwrap();
        let res = solve_gne(&game, &ForbOptions::default()).unwrap();
        assert!(res.kkt.residual() <= 1e-6);
        let net = game.network();
        let lay = game.layout();
        let upper = res.omegas[0][lay.mass(0, net.edge_index(0, 1).unwrap())];
        assert!((upper - 0.5).abs() < 1e-5);
    }

    #[test]
    fn tight_capacity_is_respected() {
        // average occupancy capped at 0.6 on every edge
        let net = diamond(0.1);
        let game = Game::new(Arc::clone(&net), 2, open_loop_agents(2, 0.0), 0.06).unwrap();
        let res = solve_gne(&game, &ForbOptions::default()).unwrap();
        assert!(res.kkt.primal_violation <= 1e-6);
        assert!(res.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        let rows = [TraceRow { iter: 3, kkt_residual: 0.5, primal_violation: 0.0, wall_time_ms: 1.0 }];
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,kkt_residual,primal_violation,wall_time_ms\n3,0.5,0.0,1.0"));
    }
}
