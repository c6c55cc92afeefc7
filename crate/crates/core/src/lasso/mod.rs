//! L1-constrained empirical risk minimization over a HAL design.
//!
//! The constrained problem `min P_n L(X beta) s.t. ||beta||_1 <= C` is solved
//! through its penalized form: a warm-started coordinate-descent path in
//! `lambda` plus a bisection that maps a target bound `C` to the `lambda`
//! whose solution realizes it.

mod solver;

use serde::{Deserialize, Serialize};

use crate::basis::{sectional_variation_norm, DesignMatrix};
use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::loss::{empirical_mean, pointwise_score, LossKind};

pub use solver::{GramMoments, SolverOptions};
use solver::{Problem, Solver};

/// A fitted coefficient vector over the columns of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalFit {
    pub beta: Vec<f64>,
    /// Column index of the constant basis function, if the design has one.
    pub intercept: Option<usize>,
    pub intercept_penalized: bool,
    pub loss: LossKind,
    pub lambda: Option<f64>,
    /// Realized L1 norm of the penalized coefficients.
    #[serde(rename = "C")]
    pub l1_norm: f64,
    pub active_set: Vec<usize>,
    /// The constraint was not binding: this is the unconstrained optimum.
    #[serde(default)]
    pub slack: bool,
    #[serde(default)]
    pub sweeps: usize,
    #[serde(default)]
    pub descent_violations: usize,
}

impl HalFit {
    fn from_beta(beta: Vec<f64>, design: &DesignMatrix, loss: &LossKind, opts: &SolverOptions, lambda: Option<f64>) -> Self {
        let intercept = design.intercept();
        let exclude = !opts.penalize_intercept;
        let l1_norm = sectional_variation_norm(&beta, intercept, exclude);
        let active_set = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            beta,
            intercept,
            intercept_penalized: opts.penalize_intercept,
            loss: *loss,
            lambda,
            l1_norm,
            active_set,
            slack: false,
            sweeps: 0,
            descent_violations: 0,
        }
    }

    /// Linear predictor on every design row.
    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<f64>> {
        design.predict(&self.beta)
    }

    /// Sum of absolute coefficients, including the intercept unless it was
    /// left unpenalized.
    pub fn sectional_variation_norm(&self) -> f64 {
        sectional_variation_norm(&self.beta, self.intercept, !self.intercept_penalized)
    }

    /// Active coefficients other than the intercept.
    pub fn active_non_intercept(&self) -> impl Iterator<Item = usize> + '_ {
        self.active_set.iter().copied().filter(move |&j| Some(j) != self.intercept)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Penalty level at which only unpenalized coefficients are nonzero.
pub fn lambda_max(design: &DesignMatrix, data: &Dataset, loss: &LossKind, opts: &SolverOptions) -> Result<f64> {
    Ok(Problem::new(design, data, loss, opts)?.lambda_max())
}

/// `count` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn default_lambda_grid(lambda_max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 || lambda_max <= 0.0 {
        return vec![lambda_max.max(0.0)];
    }
    let step = ratio.ln() / (count - 1) as f64;
    (0..count).map(|t| lambda_max * (step * t as f64).exp()).collect()
}

/// Fits at a single penalty level, optionally warm-started.
pub fn fit_penalized(
    design: &DesignMatrix,
    data: &Dataset,
    loss: &LossKind,
    lambda: f64,
    warm_start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<HalFit> {
    if !(lambda >= 0.0) {
        return Err(HalError::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
    }
    let problem = Problem::new(design, data, loss, opts)?;
    let mut solver = Solver::new(&problem, opts);
    let mut beta = start(&problem, warm_start)?;
    let stats = solver.solve(lambda, &mut beta)?;
    let mut fit = HalFit::from_beta(beta, design, loss, opts, Some(lambda));
    fit.sweeps = stats.sweeps;
    fit.descent_violations = stats.descent_violations;
    Ok(fit)
}

fn start(problem: &Problem<'_>, warm: Option<&[f64]>) -> Result<Vec<f64>> {
    match warm {
        Some(w) if w.len() != problem.p() => Err(HalError::Dimension(format!(
            "warm start has length {}, design has {} columns",
            w.len(),
            problem.p()
        ))),
        Some(w) => Ok(w.to_vec()),
        None => Ok(problem.null_beta()),
    }
}

/// One point of a regularization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub fit: HalFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub lambda_max: f64,
    pub points: Vec<PathPoint>,
    /// Grid steps at which the realized norm decreased by more than 1e-8.
    pub monotonicity_violations: usize,
}

impl PathResult {
    pub fn norms(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.fit.l1_norm).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Warm-started fits along `lambda_grid` (which must be strictly decreasing);
/// `None` uses 100 log-spaced values from `lambda_max` to `1e-4 lambda_max`.
pub fn lasso_path(
    design: &DesignMatrix,
    data: &Dataset,
    loss: &LossKind,
    lambda_grid: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<PathResult> {
    lasso_path_until(design, data, loss, lambda_grid, opts, |_| Ok(false))
}

/// As [`lasso_path`], but stops after the first fit for which `stop` returns true.
pub fn lasso_path_until<F>(
    design: &DesignMatrix,
    data: &Dataset,
    loss: &LossKind,
    lambda_grid: Option<&[f64]>,
    opts: &SolverOptions,
    mut stop: F,
) -> Result<PathResult>
where
    F: FnMut(&HalFit) -> Result<bool>,
{
    let mut walker = PathSolver::new(design, data, loss, opts)?;
    let lmax = walker.lambda_max();
    let grid = match lambda_grid {
        Some(g) => {
            check_grid(g)?;
            g.to_vec()
        }
        None => default_lambda_grid(lmax, 100, 1e-4),
    };
    let mut points: Vec<PathPoint> = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let fit = walker.fit_next(lambda)?;
        let done = stop(&fit)?;
        points.push(PathPoint { lambda, fit });
        if done {
            break;
        }
    }
    Ok(PathResult {
        lambda_max: lmax,
        points,
        monotonicity_violations: walker.monotonicity_violations(),
    })
}

pub fn check_grid(g: &[f64]) -> Result<()> {
    if g.is_empty() || g.windows(2).any(|w| w[1] >= w[0]) || g.iter().any(|&l| !(l >= 0.0)) {
        return Err(HalError::InvalidInput(
            "lambda grid must be nonempty, nonnegative and strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Incremental warm-started path: each call continues from the previous
/// solution. Callers are expected to pass decreasing penalties.
pub struct PathSolver<'a> {
    problem: Problem<'a>,
    solver: Solver,
    beta: Vec<f64>,
    opts: SolverOptions,
    last_norm: Option<f64>,
    violations: usize,
}

impl<'a> PathSolver<'a> {
    pub fn new(design: &'a DesignMatrix, data: &Dataset, loss: &LossKind, opts: &SolverOptions) -> Result<Self> {
        let problem = Problem::new(design, data, loss, opts)?;
        let solver = Solver::new(&problem, opts);
        let beta = problem.null_beta();
        Ok(Self {
            problem,
            solver,
            beta,
            opts: *opts,
            last_norm: None,
            violations: 0,
        })
    }

    /// Squared-error walker whose Gram matrix comes from `moments`, which
    /// must describe the same weighting of `data`.
    pub fn with_moments(
        design: &'a DesignMatrix,
        data: &Dataset,
        loss: &LossKind,
        opts: &SolverOptions,
        moments: &GramMoments,
    ) -> Result<Self> {
        let problem = Problem::new(design, data, loss, opts)?;
        let solver = Solver::with_moments(&problem, moments, opts)?;
        let beta = problem.null_beta();
        Ok(Self {
            problem,
            solver,
            beta,
            opts: *opts,
            last_norm: None,
            violations: 0,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.problem.lambda_max()
    }

    pub fn fit_next(&mut self, lambda: f64) -> Result<HalFit> {
        let stats = self.solver.solve(lambda, &mut self.beta)?;
        let mut fit = HalFit::from_beta(self.beta.clone(), self.problem.design, &self.problem.loss, &self.opts, Some(lambda));
        fit.sweeps = stats.sweeps;
        fit.descent_violations = stats.descent_violations;
        if let Some(prev) = self.last_norm {
            if fit.l1_norm < prev - 1e-8 {
                self.violations += 1;
                log::debug!("realized norm decreased along the path: {prev} -> {} at lambda {lambda}", fit.l1_norm);
            }
        }
        self.last_norm = Some(fit.l1_norm);
        Ok(fit)
    }

    /// Grid steps so far at which the realized norm decreased by more than 1e-8.
    pub fn monotonicity_violations(&self) -> usize {
        self.violations
    }
}

/// Solves the L1-constrained problem with bound `c_bound` by bisection on the
/// penalty. A non-binding bound returns the unconstrained fit with `slack` set.
pub fn fit_constrained(
    design: &DesignMatrix,
    data: &Dataset,
    loss: &LossKind,
    c_bound: f64,
    opts: &SolverOptions,
) -> Result<HalFit> {
    if !(c_bound >= 0.0) {
        return Err(HalError::InvalidInput(format!("bound must be nonnegative, got {c_bound}")));
    }
    const MAX_STEPS: usize = 200;
    let problem = Problem::new(design, data, loss, opts)?;
    let mut solver = Solver::new(&problem, opts);
    let tol = (1e-4 * c_bound).max(1e-6);
    let lmax = problem.lambda_max();

    let mut solve_at = |lambda: f64, warm: &[f64]| -> Result<HalFit> {
        let mut beta = warm.to_vec();
        let stats = solver.solve(lambda, &mut beta)?;
        let mut fit = HalFit::from_beta(beta, design, loss, opts, Some(lambda));
        fit.sweeps = stats.sweeps;
        fit.descent_violations = stats.descent_violations;
        Ok(fit)
    };

    let null = solve_at(lmax, &problem.null_beta())?;
    if c_bound <= tol || lmax == 0.0 {
        return Ok(null);
    }

    // Bracket: hi has realized norm <= C, lo has norm >= C.
    let mut hi = null;
    let mut lo: Option<HalFit> = None;
    let mut steps = 0;
    let mut lambda = lmax;
    while lo.is_none() {
        lambda /= 10.0;
        steps += 1;
        let candidate = if lambda < 1e-10 * lmax { 0.0 } else { lambda };
        let fit = solve_at(candidate, &hi.beta)?;
        if fit.l1_norm >= c_bound {
            lo = Some(fit);
        } else if candidate == 0.0 {
            let mut fit = fit;
            fit.slack = true;
            return Ok(fit);
        } else {
            hi = fit;
        }
    }
    let mut lo = lo.unwrap();
    let mut best = if (lo.l1_norm - c_bound).abs() < (hi.l1_norm - c_bound).abs() {
        lo.clone()
    } else {
        hi.clone()
    };
    let linear = loss.family == crate::loss::Family::SquaredError;
    while (best.l1_norm - c_bound).abs() > tol || (linear && !same_signs(&lo, &hi)) {
        if (best.l1_norm - c_bound).abs() <= 1e-12 * c_bound.max(1.0) {
            return Ok(best);
        }
        steps += 1;
        if steps > MAX_STEPS {
            if (best.l1_norm - c_bound).abs() <= tol {
                return Ok(best);
            }
            return Err(HalError::Bisection {
                steps,
                target: c_bound,
                realized: best.l1_norm,
            });
        }
        let (l_lo, l_hi) = (lo.lambda.unwrap(), hi.lambda.unwrap());
        let mid = if l_lo > 0.0 { (l_lo * l_hi).sqrt() } else { 0.5 * l_hi };
        let fit = solve_at(mid, &hi.beta)?;
        if fit.l1_norm >= c_bound {
            lo = fit.clone();
        } else {
            hi = fit.clone();
        }
        if (fit.l1_norm - c_bound).abs() < (best.l1_norm - c_bound).abs() {
            best = fit;
        }
    }
    // Between two solutions with identical sign patterns the squared-error
    // path is linear in lambda, so interpolation lands exactly on the bound.
    if linear && lo.l1_norm > hi.l1_norm {
        let t = (c_bound - hi.l1_norm) / (lo.l1_norm - hi.l1_norm);
        let beta: Vec<f64> = hi.beta.iter().zip(&lo.beta).map(|(h, l)| h + t * (l - h)).collect();
        let lambda = hi.lambda.unwrap() + t * (lo.lambda.unwrap() - hi.lambda.unwrap());
        let mut fit = HalFit::from_beta(beta, design, loss, opts, Some(lambda));
        fit.sweeps = best.sweeps;
        return Ok(fit);
    }
    Ok(best)
}

fn same_signs(a: &HalFit, b: &HalFit) -> bool {
    a.beta
        .iter()
        .zip(&b.beta)
        .enumerate()
        .filter(|(j, _)| Some(*j) != a.intercept || a.intercept_penalized)
        .all(|(_, (x, y))| x.signum() * (*x != 0.0) as i32 as f64 == y.signum() * (*y != 0.0) as i32 as f64)
}

/// Empirical basis scores `P_n d/dQ L(Q)(phi_j)` for every column.
pub fn basis_scores(fit: &HalFit, design: &DesignMatrix, data: &Dataset) -> Result<Vec<f64>> {
    let q = fit.predict(design)?;
    let r = pointwise_score(&q, data, &fit.loss)?;
    Ok((0..design.n_cols())
        .map(|j| {
            let prod: Vec<f64> = r.iter().zip(design.column(j)).map(|(a, b)| a * b).collect();
            empirical_mean(data, &prod)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStatus {
    pub id: usize,
    pub active: bool,
    pub penalized: bool,
    pub score: f64,
    pub violation: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub lambda: f64,
    pub max_violation: f64,
    pub coefficients: Vec<CoefficientStatus>,
}

/// Checks stationarity: `score_j = -lambda sign(beta_j)` on the active set,
/// `|score_j| <= lambda` elsewhere, and zero score for unpenalized columns.
pub fn kkt_check(fit: &HalFit, design: &DesignMatrix, data: &Dataset, tol: f64) -> Result<KktReport> {
    let lambda = fit.lambda.unwrap_or(0.0);
    let scores = basis_scores(fit, design, data)?;
    let mut max_violation: f64 = 0.0;
    let coefficients = scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let penalized = Some(j) != fit.intercept || fit.intercept_penalized;
            let b = fit.beta[j];
            let violation = if !penalized {
                s.abs()
            } else if b != 0.0 {
                (s + lambda * b.signum()).abs()
            } else {
                (s.abs() - lambda).max(0.0)
            };
            max_violation = max_violation.max(violation);
            CoefficientStatus {
                id: j,
                active: b != 0.0,
                penalized,
                score: s,
                violation,
                ok: violation <= tol,
            }
        })
        .collect();
    Ok(KktReport {
        lambda,
        max_violation,
        coefficients,
    })
}
