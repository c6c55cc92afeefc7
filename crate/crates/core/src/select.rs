//! Cross-validated and undersmoothed choices of the L1 bound.
//!
//! Grids are specified in `lambda` and reported in realized `C`. Every
//! selector walks one warm-started full-data path; the undersmoothing rules
//! start at the CV choice and move toward larger `C` until their criterion
//! holds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, enumerate_basis, BasisCaps, DesignMatrix};
use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::lasso::{basis_scores, check_grid, default_lambda_grid, GramMoments, HalFit, PathSolver, SolverOptions};
use crate::loss::{empirical_mean, pointwise_score, risk, Family, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Cv,
    Global,
    Sparse,
    Targeted,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Cv => "cv",
            Rule::Global => "global",
            Rule::Sparse => "sparse",
            Rule::Targeted => "targeted",
        })
    }
}

impl FromStr for Rule {
    type Err = HalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(Rule::Cv),
            "global" | "global_score" => Ok(Rule::Global),
            "sparse" | "sparse_support" => Ok(Rule::Sparse),
            "targeted" | "targeted_eic" => Ok(Rule::Targeted),
            other => Err(HalError::InvalidInput(format!("unknown selection rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    /// Number of log-spaced penalties when `lambda_grid` is absent.
    pub grid_size: usize,
    /// Smallest grid penalty as a fraction of `lambda_max`.
    pub lambda_ratio: f64,
    pub lambda_grid: Option<Vec<f64>>,
    pub m_grid: Vec<usize>,
    pub seed: u64,
    /// Stop the CV sweep after this many grid points without a new minimum;
    /// unevaluated points are reported as missing.
    pub patience: Option<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            grid_size: 100,
            lambda_ratio: 1e-4,
            lambda_grid: None,
            m_grid: vec![0, 1],
            seed: 1,
            patience: None,
        }
    }
}

impl CvConfig {
    fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(HalError::InvalidInput("at least two folds are required".into()));
        }
        if self.lambda_grid.is_none() && self.grid_size == 0 {
            return Err(HalError::InvalidInput("grid size must be positive".into()));
        }
        if !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return Err(HalError::InvalidInput("lambda ratio must lie in (0, 1)".into()));
        }
        if let Some(g) = &self.lambda_grid {
            check_grid(g)?;
        }
        Ok(())
    }

    fn grid(&self, lambda_max: f64) -> Vec<f64> {
        match &self.lambda_grid {
            Some(g) => g.clone(),
            None => default_lambda_grid(lambda_max, self.grid_size, self.lambda_ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UndersmoothConfig {
    pub rule: Rule,
    /// Global rule constant; `None` uses the root mean square of the
    /// pointwise score at the CV fit.
    pub a: Option<f64>,
    /// Sparse rule constant.
    pub c: f64,
    /// Sparse rule exponent; `None` uses `1 / (2 (k1 + 2))`.
    pub alpha: Option<f64>,
    /// Dimension entering the default exponent; `None` uses the covariate count.
    pub k1: Option<usize>,
}

impl Default for UndersmoothConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Targeted,
            a: None,
            c: 1.0,
            alpha: None,
            k1: None,
        }
    }
}

impl UndersmoothConfig {
    pub fn cv() -> Self {
        Self {
            rule: Rule::Cv,
            ..Self::default()
        }
    }

    pub fn with_rule(rule: Rule) -> Self {
        Self {
            rule,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0;
        if self.a.is_some_and(|a| !positive(a)) || !positive(self.c) || self.alpha.is_some_and(|a| !positive(a)) {
            return Err(HalError::InvalidInput("undersmoothing constants must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha(k) = 1 / (2 (k + 2))`.
pub fn sparsity_exponent(k1: usize) -> f64 {
    1.0 / (2.0 * (k1 as f64 + 2.0))
}

/// One row of the criterion trace; missing diagnostics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub lambda: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub cv_risk: Option<f64>,
    pub min_active_score: Option<f64>,
    pub min_active_pn_phi: Option<f64>,
    pub pn_dstar: Option<f64>,
    pub pn_dstar_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub rule: Rule,
    pub m_selected: usize,
    pub lambda_cv: f64,
    #[serde(rename = "C_cv")]
    pub c_cv: f64,
    pub cv_index: usize,
    pub lambda_selected: f64,
    #[serde(rename = "C_selected")]
    pub c_selected: f64,
    pub selected_index: usize,
    /// Threshold of the undersmoothing criterion at the selected fit.
    pub threshold: Option<f64>,
    /// The criterion never held on the grid; the largest path `C` was taken.
    pub not_met: bool,
    pub cv_risk_curve: Vec<CvPoint>,
    pub criterion_trace: Vec<TraceRow>,
    /// Path points at which the sparse-rule trace increased with `C`.
    pub trace_monotonicity_violations: usize,
}

impl SelectorReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the criterion trace with the fixed column set.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "lambda",
            "C",
            "cv_risk",
            "min_active_score",
            "min_active_Pn_phi",
            "Pn_Dstar",
            "Pn_Dstar_sq",
        ])?;
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
        for r in &self.criterion_trace {
            w.write_record([
                format!("{:e}", r.lambda),
                format!("{:e}", r.c),
                cell(r.cv_risk),
                cell(r.min_active_score),
                cell(r.min_active_pn_phi),
                cell(r.pn_dstar),
                cell(r.pn_dstar_sq),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fold label of each row: a seeded shuffle, then round-robin over `v` folds.
pub fn vfold_split(n: usize, v: usize, seed: u64) -> Result<Vec<usize>> {
    if v < 2 {
        return Err(HalError::InvalidInput("at least two folds are required".into()));
    }
    if n < v {
        return Err(HalError::InvalidInput(format!("{n} rows cannot fill {v} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % v;
    }
    Ok(fold)
}

/// Training and validation views of one fold, both over the full row set.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub valid: Dataset,
    /// Training and validation weights add up to the full-data weights with
    /// identical outcomes, so squared-error moments can be split.
    pub complementary: bool,
}

/// Folds obtained by zeroing frequency weights.
pub fn weight_folds(data: &Dataset, labels: &[usize], v: usize) -> Result<Vec<Fold>> {
    (0..v)
        .map(|f| {
            let train: Vec<f64> = (0..data.n())
                .map(|i| if labels[i] == f { 0.0 } else { data.weight(i) })
                .collect();
            let valid: Vec<f64> = (0..data.n())
                .map(|i| if labels[i] == f { data.weight(i) } else { 0.0 })
                .collect();
            Ok(Fold {
                train: data.clone().with_weights(train)?,
                valid: data.clone().with_weights(valid)?,
                complementary: true,
            })
        })
        .collect()
}

/// Pooled validation risk along a penalty grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCurve {
    pub lambda_grid: Vec<f64>,
    pub risks: Vec<Option<f64>>,
    pub best_index: usize,
}

impl CvCurve {
    pub fn points(&self) -> Vec<CvPoint> {
        self.lambda_grid
            .iter()
            .zip(&self.risks)
            .map(|(&lambda, &risk)| CvPoint { lambda, risk })
            .collect()
    }

    pub fn best_risk(&self) -> f64 {
        self.risks[self.best_index].unwrap_or(f64::INFINITY)
    }
}

/// Validation risk of fold-trained fits on `grid`, pooled over folds by
/// validation mass. A grid point at which any fold fails is dropped with a
/// warning; ties go to the larger penalty (smaller `C`).
pub fn cv_curve(
    design: &DesignMatrix,
    folds: &[Fold],
    loss: &LossKind,
    grid: &[f64],
    patience: Option<usize>,
    full_moments: Option<&GramMoments>,
    opts: &SolverOptions,
) -> Result<CvCurve> {
    check_grid(grid)?;
    let mut solvers: Vec<PathSolver<'_>> = folds
        .par_iter()
        .map(|f| match full_moments {
            Some(m) if f.complementary && loss.family == Family::SquaredError => {
                let train = m.minus(&GramMoments::compute(design, &f.valid, loss)?);
                PathSolver::with_moments(design, &f.train, loss, opts, &train)
            }
            _ => PathSolver::new(design, &f.train, loss, opts),
        })
        .collect::<Result<_>>()?;
    let masses: Vec<f64> = folds.iter().map(|f| f.valid.total_weight()).collect();
    let total_mass: f64 = masses.iter().sum();
    let mut risks = vec![None; grid.len()];
    let mut best: Option<(usize, f64)> = None;
    for (t, &lambda) in grid.iter().enumerate() {
        let fold_risks: Vec<Result<f64>> = solvers
            .par_iter_mut()
            .zip(folds.par_iter())
            .map(|(solver, fold)| {
                let fit = solver.fit_next(lambda)?;
                risk(&fit.predict(design)?, &fold.valid, loss)
            })
            .collect();
        match fold_risks.into_iter().collect::<Result<Vec<f64>>>() {
            Ok(r) => {
                let pooled = r.iter().zip(&masses).map(|(r, m)| r * m).sum::<f64>() / total_mass;
                risks[t] = Some(pooled);
                if best.map_or(true, |(_, b)| pooled < b) {
                    best = Some((t, pooled));
                }
            }
            Err(e) => log::warn!("cross-validation dropped lambda {lambda}: {e}"),
        }
        if let (Some(p), Some((b, _))) = (patience, best) {
            if t >= b + p {
                break;
            }
        }
    }
    let best_index = best
        .ok_or_else(|| HalError::Selector("every cross-validation grid point failed".into()))?
        .0;
    Ok(CvCurve {
        lambda_grid: grid.to_vec(),
        risks,
        best_index,
    })
}

/// Evaluates `D*` over the estimation sample for a candidate fit.
pub type EicEvaluator<'e> = dyn Fn(&HalFit) -> Result<Vec<f64>> + Sync + 'e;

/// Everything the selectors need about the fitting problem.
pub struct SelectionProblem<'a> {
    pub design: &'a DesignMatrix,
    pub data: &'a Dataset,
    pub loss: LossKind,
    /// Sample size entering the thresholds; defaults to the total frequency mass.
    pub sample_size: Option<f64>,
    pub eic: Option<&'a EicEvaluator<'a>>,
    pub m: usize,
}

impl<'a> SelectionProblem<'a> {
    pub fn new(design: &'a DesignMatrix, data: &'a Dataset, loss: LossKind) -> Self {
        Self {
            design,
            data,
            loss,
            sample_size: None,
            eic: None,
            m: 0,
        }
    }

    fn n(&self) -> f64 {
        self.sample_size.unwrap_or_else(|| self.data.total_weight())
    }

    /// `sqrt(n) log(n)`, the shared rate factor of the thresholds.
    fn rate(&self) -> f64 {
        let n = self.n();
        n.sqrt() * n.ln()
    }
}

/// Diagnostics of one fit; the rule-independent part of every trace row.
pub fn trace_row(problem: &SelectionProblem<'_>, fit: &HalFit, cv_risk: Option<f64>) -> Result<TraceRow> {
    let scores = basis_scores(fit, problem.design, problem.data)?;
    let mut min_score: Option<f64> = None;
    let mut min_phi: Option<f64> = None;
    for j in fit.active_non_intercept() {
        let s = scores[j].abs();
        let phi = empirical_mean(problem.data, problem.design.column(j));
        min_score = Some(min_score.map_or(s, |m| m.min(s)));
        min_phi = Some(min_phi.map_or(phi, |m| m.min(phi)));
    }
    let (pn_dstar, pn_dstar_sq) = match problem.eic {
        Some(eval) => {
            let d = eval(fit)?;
            if d.is_empty() {
                return Err(HalError::DegenerateEic("empty canonical gradient".into()));
            }
            let n = d.len() as f64;
            (
                Some(d.iter().sum::<f64>() / n),
                Some(d.iter().map(|x| x * x).sum::<f64>() / n),
            )
        }
        None => (None, None),
    };
    Ok(TraceRow {
        lambda: fit.lambda.unwrap_or(0.0),
        c: fit.l1_norm,
        cv_risk,
        min_active_score: min_score,
        min_active_pn_phi: min_phi,
        pn_dstar,
        pn_dstar_sq,
    })
}

/// Threshold and verdict of `rule` on one trace row. `global_a` is the
/// resolved constant of the global rule.
fn criterion(
    rule: Rule,
    cfg: &UndersmoothConfig,
    problem: &SelectionProblem<'_>,
    global_a: f64,
    row: &TraceRow,
) -> Result<(Option<f64>, bool)> {
    match rule {
        Rule::Cv => Ok((None, true)),
        Rule::Global => {
            let thr = global_a / problem.rate();
            Ok((Some(thr), row.min_active_score.is_some_and(|s| s <= thr)))
        }
        Rule::Sparse => {
            let k1 = cfg.k1.unwrap_or(problem.data.k());
            let alpha = cfg.alpha.unwrap_or_else(|| sparsity_exponent(k1));
            let thr = cfg.c * problem.n().powf(-0.5 + alpha);
            Ok((Some(thr), row.min_active_pn_phi.is_some_and(|s| s <= thr)))
        }
        Rule::Targeted => {
            let (Some(mean), Some(sq)) = (row.pn_dstar, row.pn_dstar_sq) else {
                return Err(HalError::Selector("targeted rule needs a canonical gradient evaluator".into()));
            };
            let thr = sq / problem.rate();
            Ok((Some(thr), mean.abs() < thr))
        }
    }
}

/// Outcome of a selector: the report, the selected fit and the CV fit it
/// started from.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub report: SelectorReport,
    pub fit: HalFit,
    pub cv_fit: HalFit,
}

/// Cross-validates the penalty and then walks the full-data path from the
/// CV choice toward larger `C` until the configured rule holds. When the
/// rule never holds the last path point is returned with `not_met` set.
pub fn select_c(
    problem: &SelectionProblem<'_>,
    folds: &[Fold],
    cv: &CvConfig,
    us: &UndersmoothConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    cv.validate()?;
    us.validate()?;
    if us.rule == Rule::Targeted && problem.eic.is_none() {
        return Err(HalError::Selector("targeted rule needs a canonical gradient evaluator".into()));
    }
    let moments = if problem.loss.family == Family::SquaredError {
        Some(GramMoments::compute(problem.design, problem.data, &problem.loss)?)
    } else {
        None
    };
    let mut walker = match &moments {
        Some(m) => PathSolver::with_moments(problem.design, problem.data, &problem.loss, opts, m)?,
        None => PathSolver::new(problem.design, problem.data, &problem.loss, opts)?,
    };
    let grid = cv.grid(walker.lambda_max());
    let curve = cv_curve(problem.design, folds, &problem.loss, &grid, cv.patience, moments.as_ref(), opts)?;
    walk_path(problem, &mut walker, &curve, us)
}

/// Walks the full-data path for a precomputed CV curve.
fn walk_path(
    problem: &SelectionProblem<'_>,
    walker: &mut PathSolver<'_>,
    curve: &CvCurve,
    us: &UndersmoothConfig,
) -> Result<Selection> {
    let grid = &curve.lambda_grid;
    let cv_index = curve.best_index;
    let mut trace = Vec::new();
    let mut global_a = us.a.unwrap_or(f64::NAN);
    let mut chosen: Option<(usize, HalFit, Option<f64>)> = None;
    let mut last: Option<(usize, HalFit, Option<f64>)> = None;
    let mut cv_fit: Option<HalFit> = None;
    let mut sparse_violations = 0;
    let mut any_active = false;
    for (t, &lambda) in grid.iter().enumerate() {
        let fit = walker.fit_next(lambda)?;
        let row = trace_row(problem, &fit, curve.risks[t])?;
        any_active |= row.min_active_score.is_some();
        if let (Some(prev), Some(cur)) = (trace.last().and_then(|r: &TraceRow| r.min_active_pn_phi), row.min_active_pn_phi) {
            if cur > prev + 1e-12 {
                sparse_violations += 1;
            }
        }
        if t == cv_index {
            if us.a.is_none() {
                let q = fit.predict(problem.design)?;
                let r = pointwise_score(&q, problem.data, &problem.loss)?;
                let r2: Vec<f64> = r.iter().map(|x| x * x).collect();
                global_a = empirical_mean(problem.data, &r2).sqrt();
            }
            cv_fit = Some(fit.clone());
        }
        if t >= cv_index {
            let (thr, ok) = criterion(us.rule, us, problem, global_a, &row)?;
            trace.push(row);
            if ok {
                chosen = Some((t, fit, thr));
                break;
            }
            last = Some((t, fit, thr));
        } else {
            trace.push(row);
        }
    }
    if sparse_violations > 0 {
        log::debug!("minimum active P_n phi increased with C at {sparse_violations} path points");
    }
    let not_met = chosen.is_none();
    if not_met && matches!(us.rule, Rule::Global | Rule::Sparse) && !any_active {
        return Err(HalError::Selector("no basis function enters the fit anywhere on the path".into()));
    }
    let (selected_index, fit, threshold) = chosen.or(last).expect("path reaches the CV index");
    let cv_fit = cv_fit.expect("path reaches the CV index");
    let report = SelectorReport {
        rule: us.rule,
        m_selected: problem.m,
        lambda_cv: grid[cv_index],
        c_cv: cv_fit.l1_norm,
        cv_index,
        lambda_selected: grid[selected_index],
        c_selected: fit.l1_norm,
        selected_index,
        threshold,
        not_met,
        cv_risk_curve: curve.points(),
        criterion_trace: trace,
        trace_monotonicity_violations: sparse_violations,
    };
    Ok(Selection { report, fit, cv_fit })
}

/// Plain cross-validated choice of `C` on frequency-weight folds.
pub fn cv_select_c(
    design: &DesignMatrix,
    data: &Dataset,
    loss: &LossKind,
    cv: &CvConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    cv.validate()?;
    let labels = vfold_split(data.n(), cv.folds, cv.seed)?;
    let folds = weight_folds(data, &labels, cv.folds)?;
    let problem = SelectionProblem::new(design, data, *loss);
    select_c(&problem, &folds, cv, &UndersmoothConfig::cv(), opts)
}

/// Runs `select_c` for an already-built full-data walker and CV curve.
pub fn undersmooth(
    problem: &SelectionProblem<'_>,
    curve: &CvCurve,
    us: &UndersmoothConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    us.validate()?;
    let mut walker = PathSolver::new(problem.design, problem.data, &problem.loss, opts)?;
    walk_path(problem, &mut walker, curve, us)
}

/// Smallest `C >= C_cv` whose fit has `min |score_j| <= a / (sqrt(n) log n)`
/// over active non-intercept columns.
pub fn undersmooth_global(
    problem: &SelectionProblem<'_>,
    curve: &CvCurve,
    us: &UndersmoothConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    let cfg = UndersmoothConfig {
        rule: Rule::Global,
        ..us.clone()
    };
    undersmooth(problem, curve, &cfg, opts)
}

/// Smallest `C >= C_cv` whose fit has `min P_n phi_j <= c n^{-1/2 + alpha}`
/// over active non-intercept columns.
pub fn undersmooth_sparsity(
    problem: &SelectionProblem<'_>,
    curve: &CvCurve,
    us: &UndersmoothConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    let cfg = UndersmoothConfig {
        rule: Rule::Sparse,
        ..us.clone()
    };
    undersmooth(problem, curve, &cfg, opts)
}

/// Smallest `C >= C_cv` with `|P_n D*| < P_n D*^2 / (sqrt(n) log n)`.
pub fn undersmooth_targeted(
    problem: &SelectionProblem<'_>,
    curve: &CvCurve,
    us: &UndersmoothConfig,
    opts: &SolverOptions,
) -> Result<Selection> {
    let cfg = UndersmoothConfig {
        rule: Rule::Targeted,
        ..us.clone()
    };
    undersmooth(problem, curve, &cfg, opts)
}

/// Per-order outcome of [`cv_select_m`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub m: usize,
    pub basis_size: usize,
    pub cv_risk: f64,
    pub report: SelectorReport,
}

/// Cross-validates the spline order jointly with `C`; ties go to the smaller order.
pub fn cv_select_m(
    data: &Dataset,
    loss: &LossKind,
    caps: &BasisCaps,
    cv: &CvConfig,
    opts: &SolverOptions,
) -> Result<(usize, Vec<OrderReport>)> {
    cv.validate()?;
    if cv.m_grid.is_empty() {
        return Err(HalError::InvalidInput("order grid is empty".into()));
    }
    let labels = vfold_split(data.n(), cv.folds, cv.seed)?;
    let folds = weight_folds(data, &labels, cv.folds)?;
    let reports = cv
        .m_grid
        .par_iter()
        .map(|&m| {
            let dict = enumerate_basis(data, m, caps)?;
            let design = design_matrix(data, &dict)?;
            let mut problem = SelectionProblem::new(&design, data, *loss);
            problem.m = m;
            let report = select_c(&problem, &folds, cv, &UndersmoothConfig::cv(), opts)?.report;
            let cv_risk = report.cv_risk_curve[report.cv_index].risk.unwrap_or(f64::INFINITY);
            Ok(OrderReport {
                m,
                basis_size: dict.len(),
                cv_risk,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = reports
        .iter()
        .min_by(|a, b| a.cv_risk.total_cmp(&b.cv_risk).then(a.m.cmp(&b.m)))
        .map(|r| r.m)
        .expect("order grid is nonempty");
    Ok((best, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisCaps;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_step(n: usize, seed: u64, signal: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y = x
            .iter()
            .map(|&v| signal * (v > 0.5) as u8 as f64 + rng.gen_range(-1.0..1.0))
            .collect();
        Dataset::from_columns(vec![x], y, None).unwrap()
    }

    fn small_cv() -> CvConfig {
        CvConfig {
            grid_size: 30,
            lambda_ratio: 1e-3,
            ..CvConfig::default()
        }
    }

    #[test]
    fn fold_assignment() {
        let loo = vfold_split(10, 10, 3).unwrap();
        let mut sorted = loo.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(vfold_split(50, 5, 9).unwrap(), vfold_split(50, 5, 9).unwrap());
        assert_ne!(vfold_split(50, 5, 9).unwrap(), vfold_split(50, 5, 10).unwrap());
        let labels = vfold_split(103, 10, 1).unwrap();
        let mut sizes = vec![0; 10];
        labels.iter().for_each(|&f| sizes[f] += 1);
        sizes.sort();
        assert_eq!(sizes, [vec![10; 7], vec![11; 3]].concat());
        assert!(vfold_split(5, 10, 1).is_err());
        assert!(vfold_split(5, 1, 1).is_err());
    }

    #[test]
    fn single_point_grid_selects_it() {
        let d = noisy_step(60, 1, 1.0);
        let dict = enumerate_basis(&d, 0, &BasisCaps::default()).unwrap();
        let x = design_matrix(&d, &dict).unwrap();
        let cv = CvConfig {
            lambda_grid: Some(vec![0.05]),
            ..CvConfig::default()
        };
        let Selection { report, fit, .. } = cv_select_c(&x, &d, &LossKind::squared_error(), &cv, &SolverOptions::default()).unwrap();
        assert_eq!(report.cv_risk_curve.len(), 1);
        assert_eq!(report.lambda_cv, 0.05);
        assert_eq!(fit.lambda, Some(0.05));
        assert_eq!(report.c_selected, report.c_cv);
    }

    #[test]
    fn noise_selects_small_bound_signal_does_not() {
        let caps = BasisCaps::default();
        let opts = SolverOptions::default();
        let mut noise_c = Vec::new();
        for seed in 0..5 {
            let d = noisy_step(120, seed, 0.0);
            let dict = enumerate_basis(&d, 0, &caps).unwrap();
            let x = design_matrix(&d, &dict).unwrap();
            let report = cv_select_c(&x, &d, &LossKind::squared_error(), &small_cv(), &opts).unwrap().report;
            assert_eq!(report.cv_risk_curve.len(), 30);
            noise_c.push(report.c_cv);
        }
        noise_c.sort_by(f64::total_cmp);
        assert!(noise_c[2] < 0.2, "median C_cv under noise {noise_c:?}");
        let d = noisy_step(120, 7, 2.0);
        let dict = enumerate_basis(&d, 0, &caps).unwrap();
        let x = design_matrix(&d, &dict).unwrap();
        let report = cv_select_c(&x, &d, &LossKind::squared_error(), &small_cv(), &opts).unwrap().report;
        assert!(report.c_cv > 1.0);
    }

    #[test]
    fn cv_risk_at_truth_matches_its_risk() {
        // Truth y = 2 I(x >= 0.5) + noise lies in the model with C* = 2; its
        // fold-average risk should be close to the noise risk (1/6 for U(-1,1)
        // under the half-squared loss) to within a few standard errors.
        let d = noisy_step(400, 11, 2.0);
        let labels = vfold_split(400, 10, 2).unwrap();
        let q: Vec<f64> = d.column(0).iter().map(|&v| 2.0 * (v > 0.5) as u8 as f64).collect();
        let folds = weight_folds(&d, &labels, 10).unwrap();
        let avg: f64 = folds
            .iter()
            .map(|f| risk(&q, &f.valid, &LossKind::squared_error()).unwrap() * f.valid.total_weight())
            .sum::<f64>()
            / 400.0;
        let losses: Vec<f64> = d.y().iter().zip(&q).map(|(y, q)| 0.5 * (y - q).powi(2)).collect();
        let mean = losses.iter().sum::<f64>() / 400.0;
        let sd = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        assert!((avg - 1.0 / 6.0).abs() <= 2.0 * sd / 20.0 + 1e-12);
    }

    #[test]
    fn patience_leaves_unevaluated_points() {
        let d = noisy_step(100, 3, 1.5);
        let dict = enumerate_basis(&d, 0, &BasisCaps::default()).unwrap();
        let x = design_matrix(&d, &dict).unwrap();
        let cv = CvConfig {
            patience: Some(3),
            ..small_cv()
        };
        let report = cv_select_c(&x, &d, &LossKind::squared_error(), &cv, &SolverOptions::default()).unwrap().report;
        let evaluated = report.cv_risk_curve.iter().filter(|p| p.risk.is_some()).count();
        assert!(evaluated <= report.cv_index + 4);
        let full = cv_select_c(&x, &d, &LossKind::squared_error(), &small_cv(), &SolverOptions::default()).unwrap().report;
        if full.cv_index + 3 < 30 {
            assert!(report.cv_index <= full.cv_index);
        }
    }

    fn problem_setup(seed: u64) -> (Dataset, DesignMatrix, Vec<Fold>) {
        let d = noisy_step(150, seed, 1.0);
        let dict = enumerate_basis(&d, 0, &BasisCaps::default()).unwrap();
        let x = design_matrix(&d, &dict).unwrap();
        let labels = vfold_split(150, 10, seed).unwrap();
        let folds = weight_folds(&d, &labels, 10).unwrap();
        (d, x, folds)
    }

    #[test]
    fn global_rule_extremes() {
        let (d, x, folds) = problem_setup(4);
        let opts = SolverOptions::default();
        let problem = SelectionProblem::new(&x, &d, LossKind::squared_error());
        let inf = UndersmoothConfig {
            rule: Rule::Global,
            a: Some(f64::INFINITY),
            ..UndersmoothConfig::default()
        };
        let r = select_c(&problem, &folds, &small_cv(), &inf, &opts).unwrap().report;
        assert_eq!(r.selected_index, r.cv_index);
        assert_eq!(r.c_selected, r.c_cv);
        assert!(!r.not_met);
        let zero = UndersmoothConfig {
            rule: Rule::Global,
            a: Some(1e-300),
            ..UndersmoothConfig::default()
        };
        let r = select_c(&problem, &folds, &small_cv(), &zero, &opts).unwrap().report;
        assert!(r.not_met);
        assert_eq!(r.selected_index, 29);
        assert_eq!(r.criterion_trace.len(), 30);
        assert!(r.c_selected >= r.c_cv);
    }

    #[test]
    fn sparse_rule_extremes_and_exponent() {
        assert!((sparsity_exponent(3) - 0.1).abs() < 1e-15);
        let (d, x, folds) = problem_setup(5);
        let opts = SolverOptions::default();
        let problem = SelectionProblem::new(&x, &d, LossKind::squared_error());
        let inf = UndersmoothConfig {
            rule: Rule::Sparse,
            c: f64::INFINITY,
            ..UndersmoothConfig::default()
        };
        let r = select_c(&problem, &folds, &small_cv(), &inf, &opts).unwrap().report;
        assert_eq!(r.c_selected, r.c_cv);
        let r = select_c(&problem, &folds, &small_cv(), &UndersmoothConfig::with_rule(Rule::Sparse), &opts).unwrap().report;
        assert!(r.c_selected >= r.c_cv);
        let row = &r.criterion_trace[r.selected_index];
        if !r.not_met {
            assert!(row.min_active_pn_phi.unwrap() <= r.threshold.unwrap());
        }
    }

    #[test]
    fn targeted_rule_uses_eic() {
        let (d, x, folds) = problem_setup(6);
        let opts = SolverOptions::default();
        // D* = y - Q: the residual, with mean driven to 0 as C grows.
        let xr = &x;
        let dr = &d;
        let eval = move |fit: &HalFit| -> Result<Vec<f64>> {
            let q = fit.predict(xr)?;
            Ok(dr.y().iter().zip(&q).map(|(y, q)| y - q + 0.01).collect())
        };
        let mut problem = SelectionProblem::new(&x, &d, LossKind::squared_error());
        problem.eic = Some(&eval);
        let us = UndersmoothConfig::default();
        let Selection { report: r1, fit: f1, .. } = select_c(&problem, &folds, &small_cv(), &us, &opts).unwrap();
        let Selection { report: r2, fit: f2, .. } = select_c(&problem, &folds, &small_cv(), &us, &opts).unwrap();
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
        assert_eq!(f1, f2);
        assert!(r1.selected_index >= r1.cv_index);
        // The residual mean is zero at every fit, so only the 0.01 offset
        // remains and the threshold is eventually crossed once P_n D*^2
        // does not shrink enough; either way the trace is consistent.
        let row = &r1.criterion_trace[r1.selected_index];
        if !r1.not_met {
            assert!(row.pn_dstar.unwrap().abs() < r1.threshold.unwrap());
        }
        assert!(r1.criterion_trace.iter().all(|t| t.pn_dstar.is_some()));

        let no_eval = SelectionProblem::new(&x, &d, LossKind::squared_error());
        assert!(select_c(&no_eval, &folds, &small_cv(), &us, &opts).is_err());
    }

    #[test]
    fn order_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|&v| 3.0 * v + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let d = Dataset::from_columns(vec![x], y, None).unwrap();
        let cv = CvConfig {
            m_grid: vec![0],
            ..small_cv()
        };
        let caps = BasisCaps::default().with_knots(Some(40));
        let (m, reports) = cv_select_m(&d, &LossKind::squared_error(), &caps, &cv, &SolverOptions::default()).unwrap();
        assert_eq!((m, reports.len()), (0, 1));
        let cv = CvConfig {
            m_grid: vec![0, 1],
            ..small_cv()
        };
        let (m, reports) = cv_select_m(&d, &LossKind::squared_error(), &caps, &cv, &SolverOptions::default()).unwrap();
        assert_eq!(reports.len(), 2);
        // A linear truth is smooth: the first-order basis should win.
        assert_eq!(m, 1);
    }

    #[test]
    fn order_selection_returns_fold_average_minimizer() {
        let caps = BasisCaps::default().with_knots(Some(40));
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 200;
            let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&v| 2.0 * (v >= 0.3) as u8 as f64 - 1.5 * (v >= 0.7) as u8 as f64 + 0.3 * rng.gen_range(-1.0..1.0))
                .collect();
            let d = Dataset::from_columns(vec![x], y, None).unwrap();
            let cv = CvConfig {
                m_grid: vec![0, 1, 2],
                seed,
                ..small_cv()
            };
            let (m, reports) = cv_select_m(&d, &LossKind::squared_error(), &caps, &cv, &SolverOptions::default()).unwrap();
            let best = reports.iter().map(|r| r.cv_risk).fold(f64::INFINITY, f64::min);
            let chosen = reports.iter().find(|r| r.m == m).unwrap();
            assert_eq!(chosen.cv_risk, best);
            // Ties go to the smaller order.
            assert!(reports.iter().filter(|r| r.m < m).all(|r| r.cv_risk > best));
            for r in &reports {
                assert_eq!(r.cv_risk, r.report.cv_risk_curve[r.report.cv_index].risk.unwrap());
            }
        }
    }

    #[test]
    fn trace_csv_columns() {
        let (d, x, _) = problem_setup(8);
        let report = cv_select_c(&x, &d, &LossKind::squared_error(), &small_cv(), &SolverOptions::default()).unwrap().report;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        report.write_trace_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("lambda,C,cv_risk,min_active_score,min_active_Pn_phi,Pn_Dstar,Pn_Dstar_sq\n"));
        assert_eq!(text.lines().count(), report.criterion_trace.len() + 1);
    }

    #[test]
    fn rule_names() {
        for r in [Rule::Cv, Rule::Global, Rule::Sparse, Rule::Targeted] {
            assert_eq!(r.to_string().parse::<Rule>().unwrap(), r);
        }
        assert!("other".parse::<Rule>().is_err());
    }
}
