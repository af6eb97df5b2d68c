//! Euclidean projection onto polytopes `{x : E x = e, G x <= h, lo <= x <= hi}`.
//!
//! Equalities and box bounds are handled by a semismooth Newton method on the
//! dual of the projection problem, `x(lambda) = clip(y - E^T lambda, lo, hi)`.
//! The Newton systems `E D E^T + reg I` are banded when the rows are ordered so
//! that rows sharing a variable are close together, which is the case for the
//! time-expanded flow constraints built in [`crate::game`]. Inequalities that
//! involve more than one variable go through an outer active-set loop.

use thiserror::Error;

pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("polytope is empty")]
    InfeasibleSpec,
    #[error("projection did not converge within {0} iterations (residual {1:e})")]
    MaxIterExceeded(usize, f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Constraint description of a polytope in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeSpec {
    pub dim: usize,
    pub eq_rows: Vec<SparseRow>,
    pub eq_rhs: Vec<f64>,
    pub le_rows: Vec<SparseRow>,
    pub le_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PolytopeSpec {
    /// Unconstrained `R^dim`.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            le_rows: Vec::new(),
            le_rhs: Vec::new(),
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn add_eq(&mut self, row: SparseRow, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn add_le(&mut self, row: SparseRow, rhs: f64) {
        self.le_rows.push(row);
        self.le_rhs.push(rhs);
    }

    /// Intersects the current bounds of coordinate `i` with `[lo, hi]`.
    pub fn bound(&mut self, i: usize, lo: f64, hi: f64) {
        self.lower[i] = self.lower[i].max(lo);
        self.upper[i] = self.upper[i].min(hi);
    }

    pub fn fix(&mut self, i: usize, value: f64) {
        self.bound(i, value, value);
    }

    /// Largest constraint violation of `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, &rhs) in self.eq_rows.iter().zip(&self.eq_rhs) {
            worst = worst.max((dot(row, x) - rhs).abs());
        }
        for (row, &rhs) in self.le_rows.iter().zip(&self.le_rhs) {
            worst = worst.max(dot(row, x) - rhs);
        }
        for ((&v, &lo), &hi) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(lo - v).max(v - hi);
        }
        worst
    }
}

fn dot(row: &[(usize, f64)], x: &[f64]) -> f64 {
    row.iter().map(|&(c, a)| a * x[c]).sum()
}

/// Warm-start data carried between projections onto the same polytope.
#[derive(Debug, Clone, Default)]
pub struct ProjectionState {
    lambda: Vec<f64>,
    working: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionOptions {
    /// Relative tolerance on `||E x - e||_inf`.
    pub tol: f64,
    pub max_newton_iters: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_newton_iters: 200,
        }
    }
}

/// Projector onto a fixed polytope, with the sparsity structure cached.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: PolytopeSpec,
    lower: Vec<f64>,
    upper: Vec<f64>,
    general_le: Vec<usize>,
    base: EqSystem,
    options: ProjectionOptions,
}

impl Projector {
    pub fn new(spec: PolytopeSpec) -> Result<Self, ProjectionError> {
        Self::with_options(spec, ProjectionOptions::default())
    }

    /// Builds the projector and certifies that the polytope is nonempty by
    /// projecting the origin.
    pub fn with_options(
        spec: PolytopeSpec,
        options: ProjectionOptions,
    ) -> Result<Self, ProjectionError> {
        let n = spec.dim;
        for len in [spec.lower.len(), spec.upper.len()] {
            if len != n {
                return Err(ProjectionError::DimensionMismatch { expected: n, got: len });
            }
        }
        for row in spec.eq_rows.iter().chain(&spec.le_rows) {
            if let Some(&(c, _)) = row.iter().find(|&&(c, _)| c >= n) {
                return Err(ProjectionError::DimensionMismatch { expected: n, got: c + 1 });
            }
        }
        let mut lower = spec.lower.clone();
        let mut upper = spec.upper.clone();
        let mut general_le = Vec::new();
        for (i, (row, &rhs)) in spec.le_rows.iter().zip(&spec.le_rhs).enumerate() {
            let nz: Vec<_> = row.iter().filter(|&&(_, a)| a != 0.0).collect();
            match nz.as_slice() {
                [] if rhs < 0.0 => return Err(ProjectionError::InfeasibleSpec),
                [] => {}
                [&(c, a)] if a > 0.0 => upper[c] = upper[c].min(rhs / a),
                [&(c, a)] => lower[c] = lower[c].max(rhs / a),
                _ => general_le.push(i),
            }
        }
        if lower.iter().zip(&upper).any(|(lo, hi)| lo > hi || lo.is_nan() || hi.is_nan()) {
            return Err(ProjectionError::InfeasibleSpec);
        }
        let base = EqSystem::new(n, spec.eq_rows.clone(), spec.eq_rhs.clone());
        let proj = Self {
            spec,
            lower,
            upper,
            general_le,
            base,
            options,
        };
        let mut state = ProjectionState::default();
        match proj.project_warm(&vec![0.0; n], &mut state) {
            Ok(_) => Ok(proj),
            Err(ProjectionError::MaxIterExceeded(..)) => Err(ProjectionError::InfeasibleSpec),
            Err(e) => Err(e),
        }
    }

    pub fn spec(&self) -> &PolytopeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        self.project_warm(y, &mut ProjectionState::default())
    }

    /// Projects `y`, starting from and updating the multipliers in `state`.
    pub fn project_warm(
        &self,
        y: &[f64],
        state: &mut ProjectionState,
    ) -> Result<Vec<f64>, ProjectionError> {
        let n = self.spec.dim;
        if y.len() != n {
            return Err(ProjectionError::DimensionMismatch { expected: n, got: y.len() });
        }
        if self.general_le.is_empty() {
            return self.base.solve(y, &self.lower, &self.upper, &mut state.lambda, &self.options);
        }
        self.project_active_set(y, state)
    }

    fn project_active_set(
        &self,
        y: &[f64],
        state: &mut ProjectionState,
    ) -> Result<Vec<f64>, ProjectionError> {
        let m_eq = self.spec.eq_rows.len();
        let mut working: Vec<usize> = state
            .working
            .iter()
            .copied()
            .filter(|i| self.general_le.contains(i))
            .collect();
        let max_outer = 4 * self.general_le.len() + 10;
        for _ in 0..max_outer {
            let mut rows = self.spec.eq_rows.clone();
            let mut rhs = self.spec.eq_rhs.clone();
            for &i in &working {
                rows.push(self.spec.le_rows[i].clone());
                rhs.push(self.spec.le_rhs[i]);
            }
            let system = EqSystem::new(self.spec.dim, rows, rhs);
            if state.lambda.len() != m_eq + working.len() {
                state.lambda.resize(m_eq + working.len(), 0.0);
            }
            let x = system.solve(y, &self.lower, &self.upper, &mut state.lambda, &self.options)?;

            // drop the working row with the most negative multiplier
            let worst_mult = working
                .iter()
                .enumerate()
                .map(|(w, _)| (w, state.lambda[m_eq + w]))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((w, mult)) = worst_mult {
                if mult < -1e-12 {
                    working.remove(w);
                    state.lambda.remove(m_eq + w);
                    continue;
                }
            }
            // add the most violated inactive row
            let tol = self.options.tol * self.scale();
            let violated = self
                .general_le
                .iter()
                .filter(|i| !working.contains(i))
                .map(|&i| (i, dot(&self.spec.le_rows[i], &x) - self.spec.le_rhs[i]))
                .filter(|&(_, v)| v > tol)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match violated {
                Some((i, _)) => {
                    working.push(i);
                    state.lambda.push(0.0);
                }
                None => {
                    state.working = working;
                    return Ok(x);
                }
            }
        }
        Err(ProjectionError::MaxIterExceeded(max_outer, f64::NAN))
    }

    fn scale(&self) -> f64 {
        self.spec
            .eq_rhs
            .iter()
            .chain(&self.spec.le_rhs)
            .fold(1.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Equality rows with column-compressed copy and band structure.
#[derive(Debug, Clone)]
struct EqSystem {
    dim: usize,
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
    cols: Vec<SparseRow>,
    bandwidth: usize,
    /// Per column, the band offsets and products `a_i a_j` it adds to `E D E^T`.
    gram: Vec<Vec<(usize, f64)>>,
    /// Upper bound on `||E||_2^2`.
    dual_lipschitz: f64,
}

impl EqSystem {
    fn new(dim: usize, rows: Vec<SparseRow>, rhs: Vec<f64>) -> Self {
        let mut cols: Vec<SparseRow> = vec![Vec::new(); dim];
        for (r, row) in rows.iter().enumerate() {
            for &(c, a) in row {
                if a != 0.0 {
                    cols[c].push((r, a));
                }
            }
        }
        let bandwidth = cols
            .iter()
            .filter(|col| !col.is_empty())
            .map(|col| {
                let lo = col.iter().map(|&(r, _)| r).min().unwrap_or(0);
                let hi = col.iter().map(|&(r, _)| r).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0);
        let abs_sum = |v: &SparseRow| v.iter().map(|(_, a)| a.abs()).sum::<f64>();
        let max_row = rows.iter().map(abs_sum).fold(0.0, f64::max);
        let max_col = cols.iter().map(abs_sum).fold(0.0, f64::max);
        let bw = bandwidth.min(rows.len().saturating_sub(1));
        let gram = cols
            .iter()
            .map(|col| {
                let mut out = Vec::with_capacity(col.len() * (col.len() + 1) / 2);
                for (p, &(ri, ai)) in col.iter().enumerate() {
                    for &(rj, aj) in &col[..=p] {
                        let (hi, lo) = (ri.max(rj), ri.min(rj));
                        out.push((hi * (bw + 1) + (hi - lo), ai * aj));
                    }
                }
                out
            })
            .collect();
        Self {
            dim,
            rows,
            rhs,
            cols,
            bandwidth,
            gram,
            dual_lipschitz: max_row * max_col,
        }
    }

    /// `x(lambda)`; also returns which coordinates are strictly inside their bounds.
    fn primal(&self, y: &[f64], lo: &[f64], hi: &[f64], lambda: &[f64], x: &mut [f64], free: &mut [bool]) {
        for c in 0..self.dim {
            let mut v = y[c];
            for &(r, a) in &self.cols[c] {
                v -= a * lambda[r];
            }
            free[c] = v > lo[c] && v < hi[c];
            x[c] = v.clamp(lo[c], hi[c]);
        }
    }

    fn residual(&self, x: &[f64], r: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            r[i] = dot(row, x) - self.rhs[i];
        }
    }

    /// Maximizer `s >= 0` of the dual along `lambda + s d`. The derivative
    /// `d^T (E x(s) - b)` is piecewise linear and nonincreasing, so a sweep over
    /// its breakpoints finds the root. `None` if the dual is unbounded or flat.
    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &self,
        y: &[f64],
        lo: &[f64],
        hi: &[f64],
        lambda: &[f64],
        d: &[f64],
        g: &mut [f64],
        events: &mut Vec<(f64, f64, f64)>,
    ) -> Option<f64> {
        // along the ray, x_c(s) = clamp(v_c - s g_c) with g = E^T d
        events.clear();
        let mut a0 = -self.rhs.iter().zip(d).map(|(b, di)| b * di).sum::<f64>();
        let mut b0 = 0.0;
        for c in 0..self.dim {
            let mut v = y[c];
            let mut gc = 0.0;
            for &(r, a) in &self.cols[c] {
                v -= a * lambda[r];
                gc += a * d[r];
            }
            g[c] = gc;
            if gc == 0.0 {
                continue;
            }
            // times at which v - s g hits each bound
            let t_lo = (v - lo[c]) / gc;
            let t_hi = (v - hi[c]) / gc;
            let (first, second, first_bound, second_bound) =
                if gc > 0.0 { (t_hi, t_lo, hi[c], lo[c]) } else { (t_lo, t_hi, lo[c], hi[c]) };
            // pieces: constant first_bound before `first`, linear between, constant second_bound after
            let lin = (gc * v, -gc * gc);
            let start = if first > 0.0 {
                (gc * first_bound, 0.0)
            } else if second > 0.0 {
                lin
            } else {
                (gc * second_bound, 0.0)
            };
            a0 += start.0;
            b0 += start.1;
            if first > 0.0 && first.is_finite() {
                events.push((first, lin.0 - gc * first_bound, lin.1));
            }
            if second > 0.0 && second.is_finite() {
                events.push((second, gc * second_bound - lin.0, -lin.1));
            }
        }
        if a0 <= 0.0 {
            return None;
        }
        events.sort_unstable_by(|p, q| p.0.total_cmp(&q.0));
        let (mut a, mut b) = (a0, b0);
        for &(t, da, db) in events.iter() {
            if a + b * t <= 0.0 {
                return (b < 0.0).then(|| -a / b);
            }
            a += da;
            b += db;
        }
        (b < 0.0).then(|| -a / b)
    }

    fn solve(
        &self,
        y: &[f64],
        lo: &[f64],
        hi: &[f64],
        lambda: &mut Vec<f64>,
        opts: &ProjectionOptions,
    ) -> Result<Vec<f64>, ProjectionError> {
        let m = self.rows.len();
        let n = self.dim;
        if lambda.len() != m || lambda.iter().any(|v| !v.is_finite()) {
            *lambda = vec![0.0; m];
        }
        let mut x = vec![0.0; n];
        let mut free = vec![false; n];
        let mut r = vec![0.0; m];
        if m == 0 {
            self.primal(y, lo, hi, lambda, &mut x, &mut free);
            return Ok(x);
        }
        let scale = self.rhs.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        let tol = opts.tol * scale;
        let dual_value = |x: &[f64], r: &[f64], lambda: &[f64]| -> f64 {
            let half_dist: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
            half_dist + lambda.iter().zip(r).map(|(l, v)| l * v).sum::<f64>()
        };

        let mut band = BandMatrix::new(m, self.bandwidth);
        let mut gram = BandMatrix::new(m, self.bandwidth);
        let mut trial = vec![0.0; m];
        let mut x_trial = vec![0.0; n];
        let mut free_trial = vec![false; n];
        let mut r_trial = vec![0.0; m];
        let mut dir_x = vec![0.0; n];
        let mut events: Vec<(f64, f64, f64)> = Vec::with_capacity(2 * n);

        self.primal(y, lo, hi, lambda, &mut x, &mut free);
        self.residual(&x, &mut r);
        let mut rnorm = inf_norm(&r);
        let mut q = dual_value(&x, &r, lambda);
        // Levenberg-Marquardt damping; any damping above the Lipschitz constant
        // of the dual gradient gives a guaranteed ascent step
        let mut damping = 1e-10;
        for _ in 0..opts.max_newton_iters {
            if rnorm <= tol {
                return Ok(x);
            }
            gram.data.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..n {
                if free[c] {
                    for &(off, v) in &self.gram[c] {
                        gram.data[off] += v;
                    }
                }
            }
            loop {
                let reg = damping + rnorm.min(1e-4);
                band.data.copy_from_slice(&gram.data);
                for i in 0..m {
                    band.data[i * (band.bw + 1)] += reg;
                }
                let step = band.cholesky_solve(&r).ok_or(ProjectionError::MaxIterExceeded(0, rnorm))?;
                // exact maximization of the concave dual along the step
                let len = self
                    .line_search(y, lo, hi, lambda, &step, &mut dir_x, &mut events)
                    .unwrap_or(1.0);
                let slope: f64 = step.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() * len;
                for i in 0..m {
                    trial[i] = lambda[i] + len * step[i];
                }
                self.primal(y, lo, hi, &trial, &mut x_trial, &mut free_trial);
                self.residual(&x_trial, &mut r_trial);
                let q_trial = dual_value(&x_trial, &r_trial, &trial);
                let r_trial_norm = inf_norm(&r_trial);
                let roundoff = 1e-13 * q.abs().max(q_trial.abs());
                let ascent = q_trial >= q + 1e-4 * slope && slope > 0.0;
                let contraction = r_trial_norm <= 0.5 * rnorm && q_trial >= q - roundoff;
                if ascent || contraction || damping >= self.dual_lipschitz {
                    lambda.copy_from_slice(&trial);
                    std::mem::swap(&mut x, &mut x_trial);
                    std::mem::swap(&mut free, &mut free_trial);
                    std::mem::swap(&mut r, &mut r_trial);
                    rnorm = r_trial_norm;
                    q = q_trial;
                    damping = (damping * 0.01).max(1e-10);
                    break;
                }
                damping *= 10.0;
            }
        }
        if rnorm <= tol {
            return Ok(x);
        }
        Err(ProjectionError::MaxIterExceeded(opts.max_newton_iters, rnorm))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Symmetric banded matrix, lower band stored row by row.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    m: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub(crate) fn new(m: usize, bw: usize) -> Self {
        let bw = bw.min(m.saturating_sub(1));
        Self {
            m,
            bw,
            data: vec![0.0; m * (bw + 1)],
        }
    }

    /// Adds to entry `(i, j)` with `i >= j`, `i - j <= bw`.
    #[cfg(test)]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw);
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + (i - j)]
    }

    /// Factors in place and solves `A x = b`; `None` if `A` is not positive definite.
    pub(crate) fn cholesky_solve(&mut self, b: &[f64]) -> Option<Vec<f64>> {
        let (m, bw) = (self.m, self.bw);
        let w = bw + 1;
        // row i stores columns i - bw ..= i at offsets 0 ..= bw (reversed index i - j)
        for i in 0..m {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let p0 = j.saturating_sub(bw).max(j0);
                let (head, tail) = self.data.split_at_mut(i * w);
                let row_i = &tail[..w];
                let row_j: &[f64] = if j == i { row_i } else { &head[j * w..j * w + w] };
                let mut s = row_i[i - j];
                for p in p0..j {
                    s -= row_i[i - p] * row_j[j - p];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    tail[0] = s.sqrt();
                } else {
                    let d = head[j * w];
                    tail[i - j] = s / d;
                }
            }
        }
        let mut z = b.to_vec();
        for i in 0..m {
            let mut s = z[i];
            for p in i.saturating_sub(bw)..i {
                s -= self.get(i, p) * z[p];
            }
            z[i] = s / self.get(i, i);
        }
        for i in (0..m).rev() {
            let mut s = z[i];
            for q in i + 1..m.min(i + bw + 1) {
                s -= self.get(q, i) * z[q];
            }
            z[i] = s / self.get(i, i);
        }
        Some(z)
    }
}
