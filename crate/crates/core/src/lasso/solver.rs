//! Coordinate-descent solvers for `P_n L(X beta) + lambda * sum_j pen_j |beta_j|`.
//!
//! Both solvers cycle over the full coordinate set once, then iterate on the
//! active set until the largest coefficient change falls below the tolerance,
//! and repeat until a full sweep changes nothing beyond the tolerance.

use std::borrow::Cow;

use crate::basis::DesignMatrix;
use crate::data::Dataset;
use crate::error::{HalError, Result};
use nalgebra::{DMatrix, DVector};

use crate::loss::{expit, observation_weights, Family, LossKind};

/// Tunables shared by every fit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    /// Upper bound on coordinate sweeps per fit.
    pub max_sweeps: usize,
    /// Apply the L1 penalty to the intercept column as well.
    pub penalize_intercept: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_sweeps: 100_000,
            penalize_intercept: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SolveStats {
    pub sweeps: usize,
    pub descent_violations: usize,
}

/// Active-set sweeps between Newton polishing steps.
const POLISH_EVERY: usize = 8;
/// The quadratic models of the binomial solver change every outer step, so
/// they are polished more eagerly.
const POLISH_EVERY_IRLS: usize = 2;

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Exact minimizer on the current sign pattern, clipped at the first sign
/// change. `hess` is the active-set curvature, `grad` the objective gradient
/// at `beta_a` without the penalty. Returns the step to add to `beta_a`, or
/// `None` when the system is singular.
fn sign_pattern_step(hess: DMatrix<f64>, grad: &[f64], beta_a: &[f64], penalty: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let rhs: Vec<f64> = grad
        .iter()
        .zip(beta_a)
        .zip(penalty)
        .map(|((g, b), p)| -(g + lambda * p * b.signum()))
        .collect();
    // Columns that coincide on the fitted rows make `hess` singular; a tiny
    // ridge then picks the minimum-norm split among them.
    let chol = match hess.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = 1e-9 * hess.diagonal().max().max(1e-300);
            let n = hess.nrows();
            (hess + DMatrix::identity(n, n) * ridge).cholesky()?
        }
    };
    let step = chol.solve(&DVector::from_vec(rhs));
    if step.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Shrink to the first coordinate that would cross zero, landing on it.
    let mut t = 1.0f64;
    let mut hit = None;
    for (k, (&b, &d)) in beta_a.iter().zip(step.iter()).enumerate() {
        if b * (b + d) < 0.0 || (b + d == 0.0 && d != 0.0) {
            let tk = -b / d;
            if tk < t {
                t = tk;
                hit = Some(k);
            }
        }
    }
    let mut out: Vec<f64> = step.iter().map(|d| t * d).collect();
    if let Some(k) = hit {
        out[k] = -beta_a[k];
    }
    Some(out)
}

/// Rows with positive weight and their normalized weights `f_i a_i / sum f`.
pub(crate) struct Problem<'a> {
    pub design: &'a DesignMatrix,
    pub rows: Vec<usize>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub loss: LossKind,
    pub penalty: Vec<f64>,
    /// Total frequency mass normalizing `w`.
    pub total: f64,
}

impl<'a> Problem<'a> {
    pub fn new(design: &'a DesignMatrix, data: &Dataset, loss: &LossKind, opts: &SolverOptions) -> Result<Self> {
        if design.n_rows() != data.n() {
            return Err(HalError::Dimension(format!(
                "design has {} rows, data has {}",
                design.n_rows(),
                data.n()
            )));
        }
        let a = observation_weights(data, loss)?;
        let total = data.total_weight();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for i in 0..data.n() {
            let wi = data.weight(i) * a[i];
            if wi > 0.0 {
                let yi = data.y()[i];
                if loss.family == Family::BinomialLoglik && !(0.0..=1.0).contains(&yi) {
                    return Err(HalError::InvalidInput(format!(
                        "binomial outcome {yi} at row {i} is outside [0, 1]"
                    )));
                }
                rows.push(i);
                y.push(yi);
                w.push(wi / total);
            }
        }
        if rows.is_empty() {
            return Err(HalError::InvalidInput("no rows with positive weight".into()));
        }
        let mut penalty = vec![1.0; design.n_cols()];
        if let (Some(j0), false) = (design.intercept(), opts.penalize_intercept) {
            penalty[j0] = 0.0;
        }
        Ok(Self {
            design,
            rows,
            y,
            w,
            loss: *loss,
            penalty,
            total,
        })
    }

    pub fn p(&self) -> usize {
        self.design.n_cols()
    }

    /// Column `j` restricted to the kept rows.
    pub fn column(&self, j: usize) -> Cow<'_, [f64]> {
        let col = self.design.column(j);
        if self.rows.len() == self.design.n_rows() {
            Cow::Borrowed(col)
        } else {
            Cow::Owned(self.rows.iter().map(|&i| col[i]).collect())
        }
    }

    fn centered_intercept(&self) -> Option<usize> {
        self.design.intercept().filter(|&j| self.penalty[j] == 0.0)
    }

    /// Null-model coefficients: intercept at the weighted mean (on the link
    /// scale) when unpenalized, zero otherwise.
    pub fn null_beta(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.p()];
        if let Some(j0) = self.centered_intercept() {
            let sw: f64 = self.w.iter().sum();
            let ybar = self.y.iter().zip(&self.w).map(|(y, w)| y * w).sum::<f64>() / sw;
            beta[j0] = match self.loss.family {
                Family::SquaredError => ybar,
                Family::BinomialLoglik => {
                    let p = ybar.clamp(1e-12, 1.0 - 1e-12);
                    (p / (1.0 - p)).ln()
                }
            };
        }
        beta
    }

    /// Smallest penalty at which the null model is optimal.
    pub fn lambda_max(&self) -> f64 {
        let beta = self.null_beta();
        let eta: Vec<f64> = {
            let q = self.design.intercept().map_or(0.0, |j0| beta[j0]);
            vec![q; self.rows.len()]
        };
        let r: Vec<f64> = eta
            .iter()
            .zip(&self.y)
            .zip(&self.w)
            .map(|((&q, &y), &w)| w * (self.loss.mean(q) - y))
            .collect();
        (0..self.p())
            .filter(|&j| self.penalty[j] > 0.0)
            .map(|j| {
                let col = self.column(j);
                col.iter().zip(&r).map(|(x, r)| x * r).sum::<f64>().abs() / self.penalty[j]
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) enum Solver {
    Gram(GramSolver),
    Irls(IrlsSolver),
}

impl Solver {
    /// Squared-error solver from precomputed moments of the same weighting.
    pub fn with_moments(problem: &Problem<'_>, moments: &GramMoments, opts: &SolverOptions) -> Result<Self> {
        if problem.loss.family != Family::SquaredError || moments.p != problem.p() {
            return Err(HalError::InvalidInput("moments only apply to squared-error problems of the same design".into()));
        }
        Ok(Solver::Gram(GramSolver::from_moments(moments, problem, opts)))
    }

    pub fn new(problem: &Problem<'_>, opts: &SolverOptions) -> Self {
        match problem.loss.family {
            Family::SquaredError => Solver::Gram(GramSolver::new(problem, opts)),
            Family::BinomialLoglik => Solver::Irls(IrlsSolver::new(problem, opts)),
        }
    }

    /// Minimizes at `lambda` starting from (and overwriting) `beta`.
    pub fn solve(&mut self, lambda: f64, beta: &mut [f64]) -> Result<SolveStats> {
        match self {
            Solver::Gram(s) => s.solve(lambda, beta),
            Solver::Irls(s) => s.solve(lambda, beta),
        }
    }
}

/// Raw weighted cross products of a design, `sum_i f_i a_i x_i x_i'` and
/// friends, over the rows of one weighting. Moments are additive over
/// disjoint row weightings, which lets fold fits reuse one pass over the data.
#[derive(Debug, Clone)]
pub struct GramMoments {
    p: usize,
    xx: Vec<f64>,
    x: Vec<f64>,
    xy: Vec<f64>,
    y: f64,
    w: f64,
}

impl GramMoments {
    fn from_problem(problem: &Problem<'_>) -> Self {
        let raw: Vec<f64> = problem.w.iter().map(|w| w * problem.total).collect();
        Self::from_rows(problem.design, &problem.rows, &raw, &problem.y)
    }

    fn from_rows(design: &DesignMatrix, rows: &[usize], raw_w: &[f64], y: &[f64]) -> Self {
        let p = design.n_cols();
        let n = rows.len();
        let mut x = DMatrix::<f64>::zeros(n, p);
        for j in 0..p {
            let col = design.column(j);
            for (r, &i) in rows.iter().enumerate() {
                x[(r, j)] = col[i];
            }
        }
        let mut wx = x.clone();
        for j in 0..p {
            for (r, w) in raw_w.iter().enumerate() {
                wx[(r, j)] *= w;
            }
        }
        // `tr_mul` runs column dots; the product of an explicit transpose is blocked.
        let xx = wx.transpose() * &x;
        let yv = DVector::from_column_slice(y);
        Self {
            p,
            x: wx.row_sum().iter().copied().collect(),
            xy: wx.tr_mul(&yv).iter().copied().collect(),
            y: raw_w.iter().zip(y).map(|(w, y)| w * y).sum(),
            w: raw_w.iter().sum(),
            xx: xx.as_slice().to_vec(),
        }
    }

    /// Moments of the squared-error problem on `data`.
    pub fn compute(design: &DesignMatrix, data: &Dataset, loss: &LossKind) -> Result<Self> {
        let problem = Problem::new(design, data, loss, &SolverOptions::default())?;
        Ok(Self::from_problem(&problem))
    }

    pub fn minus(&self, other: &Self) -> Self {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
        Self {
            p: self.p,
            xx: sub(&self.xx, &other.xx),
            x: sub(&self.x, &other.x),
            xy: sub(&self.xy, &other.xy),
            y: self.y - other.y,
            w: self.w - other.w,
        }
    }
}

/// Squared error via the weighted Gram matrix of the (centered) design.
pub(crate) struct GramSolver {
    p: usize,
    gram: Vec<f64>,
    c: Vec<f64>,
    coords: Vec<usize>,
    penalty: Vec<f64>,
    centering: Option<(usize, Vec<f64>, f64)>,
    opts: SolverOptions,
}

impl GramSolver {
    fn new(problem: &Problem<'_>, opts: &SolverOptions) -> Self {
        let moments = GramMoments::from_problem(problem);
        Self::from_moments(&moments, problem, opts)
    }

    fn from_moments(m: &GramMoments, problem: &Problem<'_>, opts: &SolverOptions) -> Self {
        let p = m.p;
        let scale = 1.0 / problem.total;
        let centered = problem.centered_intercept();
        let sw = m.w * scale;
        let sx: Vec<f64> = m.x.iter().map(|v| v * scale).collect();
        let sy = m.y * scale;
        let mut gram: Vec<f64> = m.xx.iter().map(|v| v * scale).collect();
        let mut c: Vec<f64> = m.xy.iter().map(|v| v * scale).collect();
        let (xbar, ybar) = if centered.is_some() && sw > 0.0 {
            let xbar: Vec<f64> = sx.iter().map(|v| v / sw).collect();
            for j in 0..p {
                for k in 0..p {
                    gram[j * p + k] -= sx[j] * xbar[k];
                }
                c[j] -= sx[j] * sy / sw;
            }
            (xbar, sy / sw)
        } else {
            (vec![0.0; p], 0.0)
        };
        let scale = (0..p).map(|j| gram[j * p + j]).fold(0.0, f64::max).max(1e-300);
        let coords = (0..p)
            .filter(|&j| Some(j) != centered && gram[j * p + j] > 1e-14 * scale)
            .collect();
        Self {
            p,
            gram,
            c,
            coords,
            penalty: problem.penalty.clone(),
            centering: centered.map(|j0| (j0, xbar, ybar)),
            opts: *opts,
        }
    }

    fn objective(&self, beta: &[f64], g: &[f64], lambda: f64) -> f64 {
        // ½ b'Gb - c'b with g = Gb - c.
        let mut quad = 0.0;
        let mut pen = 0.0;
        for &j in &self.coords {
            quad += 0.5 * beta[j] * (g[j] - self.c[j]);
            pen += self.penalty[j] * beta[j].abs();
        }
        quad + lambda * pen
    }

    fn sweep(&self, idx: &[usize], lambda: f64, beta: &mut [f64], g: &mut [f64]) -> f64 {
        let p = self.p;
        let mut max_change: f64 = 0.0;
        for &j in idx {
            let gjj = self.gram[j * p + j];
            let old = beta[j];
            let new = soft_threshold(gjj * old - g[j], lambda * self.penalty[j]) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                let row = &self.gram[j * p..(j + 1) * p];
                for (gk, gjk) in g.iter_mut().zip(row) {
                    *gk += delta * gjk;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Newton step on the active sign pattern; returns false when it could
    /// not be taken or did not decrease the objective.
    fn polish(&self, lambda: f64, beta: &mut [f64], g: &mut [f64]) -> bool {
        let p = self.p;
        let active: Vec<usize> = self.coords.iter().copied().filter(|&j| beta[j] != 0.0).collect();
        if active.is_empty() {
            return false;
        }
        let na = active.len();
        let hess = DMatrix::from_fn(na, na, |a, b| self.gram[active[a] * p + active[b]]);
        let grad: Vec<f64> = active.iter().map(|&j| g[j]).collect();
        let beta_a: Vec<f64> = active.iter().map(|&j| beta[j]).collect();
        let pen: Vec<f64> = active.iter().map(|&j| self.penalty[j]).collect();
        let Some(step) = sign_pattern_step(hess, &grad, &beta_a, &pen, lambda) else {
            return false;
        };
        let before = self.objective(beta, g, lambda);
        let saved_g = g.to_vec();
        for (&j, &d) in active.iter().zip(&step) {
            if d != 0.0 {
                let row = &self.gram[j * p..(j + 1) * p];
                for (gk, gjk) in g.iter_mut().zip(row) {
                    *gk += d * gjk;
                }
                beta[j] += d;
            }
        }
        // Exact zeros where the step was clipped.
        for (k, &j) in active.iter().enumerate() {
            if (beta_a[k] + step[k]).abs() <= 1e-15 * beta_a[k].abs() {
                beta[j] = 0.0;
            }
        }
        if self.objective(beta, g, lambda) > before + 1e-13 * before.abs().max(1e-300) {
            for (k, &j) in active.iter().enumerate() {
                beta[j] = beta_a[k];
            }
            g.copy_from_slice(&saved_g);
            return false;
        }
        true
    }

    fn solve(&mut self, lambda: f64, beta: &mut [f64]) -> Result<SolveStats> {
        let p = self.p;
        if let Some((j0, _, _)) = &self.centering {
            beta[*j0] = 0.0;
        }
        for j in 0..p {
            if !self.coords.contains(&j) && self.centering.as_ref().map_or(true, |c| c.0 != j) {
                beta[j] = 0.0;
            }
        }
        let mut g: Vec<f64> = self.c.iter().map(|c| -c).collect();
        for j in 0..p {
            if beta[j] != 0.0 {
                let row = &self.gram[j * p..(j + 1) * p];
                for (gk, gjk) in g.iter_mut().zip(row) {
                    *gk += beta[j] * gjk;
                }
            }
        }
        let mut stats = SolveStats::default();
        let mut obj = self.objective(beta, &g, lambda);
        let mut trace = Vec::new();
        let coords = self.coords.clone();
        let mut check = |stats: &mut SolveStats, beta: &[f64], g: &[f64], change: f64, trace: &mut Vec<f64>| -> Result<()> {
            stats.sweeps += 1;
            let new_obj = self.objective(beta, g, lambda);
            if new_obj > obj + 1e-12 * obj.abs().max(1.0) {
                stats.descent_violations += 1;
            }
            obj = new_obj;
            trace.push(change);
            if trace.len() > 16 {
                trace.remove(0);
            }
            if stats.sweeps >= self.opts.max_sweeps {
                return Err(HalError::NonConvergence {
                    sweeps: stats.sweeps,
                    last_change: change,
                    trace: trace.clone(),
                });
            }
            Ok(())
        };
        loop {
            let change = self.sweep(&coords, lambda, beta, &mut g);
            check(&mut stats, beta, &g, change, &mut trace)?;
            if change < self.opts.tol {
                break;
            }
            let mut inner = 0;
            loop {
                let active: Vec<usize> = coords.iter().copied().filter(|&j| beta[j] != 0.0).collect();
                let change = self.sweep(&active, lambda, beta, &mut g);
                check(&mut stats, beta, &g, change, &mut trace)?;
                if change < self.opts.tol {
                    break;
                }
                inner += 1;
                // Slow linear convergence on correlated columns: jump to the
                // solution on the current sign pattern.
                if inner % POLISH_EVERY == 0 {
                    self.polish(lambda, beta, &mut g);
                }
            }
        }
        if let Some((j0, xbar, ybar)) = &self.centering {
            let shift: f64 = (0..p).filter(|&j| j != *j0).map(|j| xbar[j] * beta[j]).sum();
            beta[*j0] = ybar - shift;
        }
        Ok(stats)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Binomial log-likelihood by proximal Newton: each outer step solves the
/// penalized weighted least squares model by coordinate descent, then
/// backtracks on the true objective so it never increases.
pub(crate) struct IrlsSolver {
    n: usize,
    p: usize,
    cols: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    penalty: Vec<f64>,
    nonzero_cols: Vec<usize>,
    opts: SolverOptions,
}

impl IrlsSolver {
    fn new(problem: &Problem<'_>, opts: &SolverOptions) -> Self {
        let p = problem.p();
        let n = problem.rows.len();
        let mut cols = Vec::with_capacity(n * p);
        let mut nonzero_cols = Vec::new();
        for j in 0..p {
            let col = problem.column(j);
            if col.iter().any(|&x| x != 0.0) {
                nonzero_cols.push(j);
            }
            cols.extend_from_slice(&col);
        }
        Self {
            n,
            p,
            cols,
            y: problem.y.clone(),
            w: problem.w.clone(),
            penalty: problem.penalty.clone(),
            nonzero_cols,
            opts: *opts,
        }
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(self.col(j)) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    fn objective(&self, eta: &[f64], beta: &[f64], lambda: f64) -> f64 {
        let loss = LossKind::binomial();
        let data: f64 = eta
            .iter()
            .zip(&self.y)
            .zip(&self.w)
            .map(|((&q, &y), &w)| w * loss.pointwise(y, q))
            .sum();
        let pen: f64 = beta.iter().zip(&self.penalty).map(|(b, p)| p * b.abs()).sum();
        data + lambda * pen
    }

    fn solve(&mut self, lambda: f64, beta: &mut [f64]) -> Result<SolveStats> {
        let mut stats = SolveStats::default();
        let mut trace = Vec::new();
        let mut eta = self.eta(beta);
        let mut obj = self.objective(&eta, beta, lambda);
        let mut v = vec![0.0; self.n];
        let mut e = vec![0.0; self.n];
        let mut d = vec![0.0; self.n];
        let mut h = vec![0.0; self.p];
        let mut fresh = vec![false; self.p];
        loop {
            for i in 0..self.n {
                let mu = expit(eta[i]);
                v[i] = (self.w[i] * mu * (1.0 - mu)).max(self.w[i] * 1e-12);
                e[i] = self.w[i] * (self.y[i] - mu);
                d[i] = 0.0;
            }
            fresh.iter_mut().for_each(|f| *f = false);
            let start = beta.to_vec();
            // Inner coordinate descent on the quadratic model, tracked through
            // the model residual `e` and the predictor increment `d`.
            let all = self.nonzero_cols.clone();
            loop {
                let change = self.inner_sweep(&all, lambda, beta, &mut e, &mut d, &v, &mut h, &mut fresh);
                stats.sweeps += 1;
                push_trace(&mut trace, change);
                self.budget(&stats, change, &trace)?;
                if change < self.opts.tol {
                    break;
                }
                let mut inner = 0;
                loop {
                    let active: Vec<usize> = all.iter().copied().filter(|&j| beta[j] != 0.0).collect();
                    let change = self.inner_sweep(&active, lambda, beta, &mut e, &mut d, &v, &mut h, &mut fresh);
                    stats.sweeps += 1;
                    push_trace(&mut trace, change);
                    self.budget(&stats, change, &trace)?;
                    if change < self.opts.tol {
                        break;
                    }
                    inner += 1;
                    if inner % POLISH_EVERY_IRLS == 0 {
                        self.polish(&active, lambda, beta, &mut e, &mut d, &v);
                    }
                }
            }
            let step: Vec<f64> = beta.iter().zip(&start).map(|(b, s)| b - s).collect();
            let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            if max_step < self.opts.tol {
                beta.copy_from_slice(&start);
                break;
            }
            // Backtracking on the true objective.
            let mut t = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = start.iter().zip(&step).map(|(s, d)| s + t * d).collect();
                let cand_eta: Vec<f64> = eta.iter().zip(&d).map(|(e, d)| e + t * d).collect();
                let cand_obj = self.objective(&cand_eta, &cand, lambda);
                if cand_obj <= obj + 1e-14 * obj.abs().max(1.0) {
                    break Some((cand, cand_eta, cand_obj));
                }
                t *= 0.5;
                if t < 1e-10 {
                    break None;
                }
            };
            match accepted {
                Some((cand, cand_eta, cand_obj)) => {
                    if cand_obj > obj {
                        stats.descent_violations += 1;
                    }
                    beta.copy_from_slice(&cand);
                    eta = cand_eta;
                    obj = cand_obj;
                    if t * max_step < self.opts.tol {
                        break;
                    }
                }
                None => {
                    // No descent along the Newton direction: the start point is
                    // optimal to working precision.
                    beta.copy_from_slice(&start);
                    break;
                }
            }
        }
        Ok(stats)
    }

    fn budget(&self, stats: &SolveStats, change: f64, trace: &[f64]) -> Result<()> {
        if stats.sweeps >= self.opts.max_sweeps {
            return Err(HalError::NonConvergence {
                sweeps: stats.sweeps,
                last_change: change,
                trace: trace.to_vec(),
            });
        }
        Ok(())
    }

    /// Newton step of the quadratic model on the active sign pattern.
    fn polish(&self, active: &[usize], lambda: f64, beta: &mut [f64], e: &mut [f64], d: &mut [f64], v: &[f64]) -> bool {
        if active.is_empty() {
            return false;
        }
        let na = active.len();
        let xa = DMatrix::from_fn(self.n, na, |i, k| self.col(active[k])[i]);
        let vv = DVector::from_column_slice(v);
        let mut vxa = xa.clone();
        for mut col in vxa.column_iter_mut() {
            col.component_mul_assign(&vv);
        }
        let hess = vxa.transpose() * &xa;
        let grad: Vec<f64> = active.iter().map(|&j| -dot(self.col(j), e)).collect();
        let beta_a: Vec<f64> = active.iter().map(|&j| beta[j]).collect();
        let pen: Vec<f64> = active.iter().map(|&j| self.penalty[j]).collect();
        let Some(step) = sign_pattern_step(hess.clone(), &grad, &beta_a, &pen, lambda) else {
            return false;
        };
        // Change of the model objective along the step.
        let sv = DVector::from_column_slice(&step);
        let quad = 0.5 * (sv.transpose() * &hess * &sv)[(0, 0)];
        let lin: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        let pen_change: f64 = (0..na)
            .map(|k| pen[k] * ((beta_a[k] + step[k]).abs() - beta_a[k].abs()))
            .sum();
        if quad + lin + lambda * pen_change > 0.0 {
            return false;
        }
        for (k, &j) in active.iter().enumerate() {
            let delta = step[k];
            if delta == 0.0 {
                continue;
            }
            for ((ei, di), (xi, vi)) in e.iter_mut().zip(d.iter_mut()).zip(self.col(j).iter().zip(v)) {
                *ei -= vi * xi * delta;
                *di += xi * delta;
            }
            beta[j] = if (beta_a[k] + delta).abs() <= 1e-15 * beta_a[k].abs() { 0.0 } else { beta_a[k] + delta };
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn inner_sweep(
        &self,
        idx: &[usize],
        lambda: f64,
        beta: &mut [f64],
        e: &mut [f64],
        d: &mut [f64],
        v: &[f64],
        h: &mut [f64],
        fresh: &mut [bool],
    ) -> f64 {
        let mut max_change: f64 = 0.0;
        for &j in idx {
            let x = self.col(j);
            let mut grad = 0.0;
            if fresh[j] {
                for (xi, ei) in x.iter().zip(e.iter()) {
                    grad += xi * ei;
                }
            } else {
                let mut hj = 0.0;
                for ((xi, ei), vi) in x.iter().zip(e.iter()).zip(v) {
                    grad += xi * ei;
                    hj += vi * xi * xi;
                }
                h[j] = hj;
                fresh[j] = true;
            }
            let hj = h[j];
            if hj <= 0.0 {
                continue;
            }
            let old = beta[j];
            let new = soft_threshold(hj * old + grad, lambda * self.penalty[j]) / hj;
            let delta = new - old;
            if delta != 0.0 {
                for ((ei, di), (xi, vi)) in e.iter_mut().zip(d.iter_mut()).zip(x.iter().zip(v)) {
                    *ei -= vi * xi * delta;
                    *di += xi * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }
}

fn push_trace(trace: &mut Vec<f64>, change: f64) {
    trace.push(change);
    if trace.len() > 16 {
        trace.remove(0);
    }
}
