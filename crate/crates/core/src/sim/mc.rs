use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dgp_ate, dgp_density, stream, true_values, DgpKind, DgpSpec, Purpose, TrueValues};
use crate::error::{HalError, Result};
use crate::select::{Rule, SelectorReport};
use crate::targets::{fit_ate, fit_density, AteConfig, DensityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Undersmoothed,
    Cv,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Undersmoothed => "undersmoothed",
            Estimator::Cv => "cv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dgp: DgpSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub base_seed: u64,
    /// `None` uses rayon's default pool.
    pub threads: Option<usize>,
    pub ate: AteConfig,
    pub density: DensityConfig,
    /// Runs with a larger fraction of failed replicates are flagged.
    pub failure_tolerance: f64,
    /// Recorded for provenance of the covariate draws.
    pub beta_sampler: String,
}

pub const BETA_SAMPLER: &str = "rand_distr::Beta 0.4 (exact rejection sampling)";

impl Default for SimConfig {
    fn default() -> Self {
        Self::ate()
    }
}

impl SimConfig {
    /// Treatment-specific mean study with knot caps sized for one core.
    pub fn ate() -> Self {
        let mut ate = AteConfig::default();
        ate.propensity_caps.max_knots_per_subset = Some(20);
        ate.outcome_caps.max_knots_per_subset = Some(100);
        ate.propensity_cv.patience = Some(10);
        ate.cv.patience = Some(10);
        Self {
            dgp: DgpSpec::ate(),
            n_grid: vec![250, 500, 1000, 2000],
            replicates: 200,
            base_seed: 20240601,
            threads: None,
            ate,
            density: DensityConfig::default(),
            failure_tolerance: 0.05,
            beta_sampler: BETA_SAMPLER.into(),
        }
    }

    /// Integrated squared density study.
    pub fn density() -> Self {
        let mut density = DensityConfig::default();
        density.cv.patience = Some(10);
        Self {
            dgp: DgpSpec::density(),
            n_grid: vec![250, 1000, 5000],
            density,
            ..Self::ate()
        }
    }

    pub fn for_kind(kind: DgpKind) -> Self {
        match kind {
            DgpKind::AteSim61 => Self::ate(),
            DgpKind::DensitySim62 => Self::density(),
            DgpKind::CustomNull => Self {
                dgp: DgpSpec::null(),
                ..Self::ate()
            },
        }
    }

    pub fn set_rule(&mut self, rule: Rule) {
        self.ate.undersmooth.rule = rule;
        self.density.undersmooth.rule = rule;
    }

    /// Spline order of the outcome regression; the hazard fit is always zero order.
    pub fn set_m(&mut self, m: usize) {
        self.ate.outcome_m = m;
    }

    pub fn set_grid_size(&mut self, g: usize) {
        self.ate.cv.grid_size = g;
        self.ate.propensity_cv.grid_size = g;
        self.density.cv.grid_size = g;
    }

    pub fn rule(&self) -> Rule {
        match self.dgp.kind {
            DgpKind::DensitySim62 => self.density.undersmooth.rule,
            _ => self.ate.undersmooth.rule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| n == 0) {
            return Err(HalError::InvalidInput("sample size grid must be non-empty and positive".into()));
        }
        if self.replicates == 0 {
            return Err(HalError::InvalidInput("at least one replicate is required".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_tolerance) {
            return Err(HalError::InvalidInput("failure tolerance must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One estimator on one replicate data set. Fields are empty when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub n: usize,
    pub replicate: usize,
    pub estimator: Estimator,
    pub status: String,
    pub psi: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    #[serde(rename = "C_cv")]
    pub c_cv: Option<f64>,
    #[serde(rename = "C_selected")]
    pub c_selected: Option<f64>,
    #[serde(rename = "sqrt_n_PnDstar")]
    pub sqrt_n_pn_dstar: Option<f64>,
    /// The same quantity at the cross-validated fit.
    #[serde(rename = "sqrt_n_PnDstar_cv")]
    pub sqrt_n_pn_dstar_cv: Option<f64>,
    /// `sqrt(n)` times the selector threshold at the selected fit.
    pub sqrt_n_threshold: Option<f64>,
    #[serde(rename = "sqrt_n_min_active_Pn_phi")]
    pub sqrt_n_min_active_pn_phi: Option<f64>,
    pub not_met: Option<bool>,
    pub shortfall: Option<f64>,
    pub active_count: Option<usize>,
}

impl ReplicateRow {
    fn failed(n: usize, replicate: usize, estimator: Estimator, err: &HalError) -> Self {
        Self {
            n,
            replicate,
            estimator,
            status: format!("error: {err}"),
            psi: None,
            se: None,
            ci_lo: None,
            ci_hi: None,
            c_cv: None,
            c_selected: None,
            sqrt_n_pn_dstar: None,
            sqrt_n_pn_dstar_cv: None,
            sqrt_n_threshold: None,
            sqrt_n_min_active_pn_phi: None,
            not_met: None,
            shortfall: None,
            active_count: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok" && self.psi.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: Estimator,
    /// Successful replicates entering the summary.
    pub replicates: usize,
    pub failures: usize,
    pub psi0: f64,
    pub sqrt_n_bias: f64,
    /// Population variance of `sqrt(n) psi_n`, so `n_mse = n_variance + sqrt_n_bias^2`.
    pub n_variance: f64,
    pub n_mse: f64,
    pub coverage_95: Option<f64>,
    #[serde(rename = "mean_sqrt_n_PnDstar")]
    pub mean_sqrt_n_pn_dstar: Option<f64>,
    #[serde(rename = "mean_sqrt_n_min_active_Pn_phi")]
    pub mean_sqrt_n_min_active_pn_phi: Option<f64>,
    pub efficiency_bound: f64,
    /// Fraction with `|sqrt(n) P_n D*|` at or below the scaled targeted threshold.
    pub frac_within_threshold: Option<f64>,
    /// Fraction with `C_selected >= C_cv`.
    pub frac_c_dominance: Option<f64>,
    /// Fraction where `|P_n D*|` at the selected fit exceeds its value at the CV fit.
    pub frac_dstar_worse_than_cv: Option<f64>,
    pub frac_not_met: Option<f64>,
    pub max_shortfall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: SimConfig,
    pub truth: TrueValues,
    pub summary: Vec<SummaryRow>,
    pub replicates: Vec<ReplicateRow>,
    /// Fraction of replicate data sets on which the primary estimator failed.
    pub failure_fraction: f64,
    pub failed: bool,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fraction(v: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut all) = (0usize, 0usize);
    for b in v {
        all += 1;
        hit += usize::from(b);
    }
    (all > 0).then(|| hit as f64 / all as f64)
}

/// Aggregates replicate rows per `(n, estimator)` in the order of `n_grid`.
pub fn summarize(rows: &[ReplicateRow], truth: &TrueValues, n_grid: &[usize]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &n in n_grid {
        for est in [Estimator::Undersmoothed, Estimator::Cv] {
            let group: Vec<&ReplicateRow> = rows.iter().filter(|r| r.n == n && r.estimator == est).collect();
            if group.is_empty() {
                continue;
            }
            let ok: Vec<&ReplicateRow> = group.iter().copied().filter(|r| r.ok()).collect();
            let rn = (n as f64).sqrt();
            let scaled: Vec<f64> = ok.iter().map(|r| rn * (r.psi.unwrap() - truth.psi0)).collect();
            let bias = mean(&scaled).unwrap_or(f64::NAN);
            let n_variance = mean(&scaled.iter().map(|s| (s - bias).powi(2)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let covered: Vec<bool> = ok
                .iter()
                .filter_map(|r| Some(r.ci_lo? <= truth.psi0 && truth.psi0 <= r.ci_hi?))
                .collect();
            let collect = |f: &dyn Fn(&ReplicateRow) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
            out.push(SummaryRow {
                n,
                estimator: est,
                replicates: ok.len(),
                failures: group.len() - ok.len(),
                psi0: truth.psi0,
                sqrt_n_bias: bias,
                n_variance,
                n_mse: n_variance + bias * bias,
                coverage_95: fraction(covered.into_iter()),
                mean_sqrt_n_pn_dstar: mean(&collect(&|r| r.sqrt_n_pn_dstar)),
                mean_sqrt_n_min_active_pn_phi: mean(&collect(&|r| r.sqrt_n_min_active_pn_phi)),
                efficiency_bound: truth.efficiency_bound,
                frac_within_threshold: fraction(
                    ok.iter().filter_map(|r| Some(r.sqrt_n_pn_dstar?.abs() <= r.sqrt_n_threshold?)),
                ),
                frac_c_dominance: fraction(ok.iter().filter_map(|r| Some(r.c_selected? >= r.c_cv?))),
                frac_dstar_worse_than_cv: fraction(
                    ok.iter().filter_map(|r| Some(r.sqrt_n_pn_dstar?.abs() > r.sqrt_n_pn_dstar_cv?.abs())),
                ),
                frac_not_met: fraction(ok.iter().filter_map(|r| r.not_met)),
                max_shortfall: collect(&|r| r.shortfall).into_iter().reduce(f64::max),
            });
        }
    }
    out
}

fn trace_values(report: &SelectorReport, rn: f64) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let at = |i: usize| report.criterion_trace.get(i);
    let dstar = |i: usize| at(i).and_then(|t| t.pn_dstar).map(|d| rn * d);
    let phi = |i: usize| at(i).and_then(|t| t.min_active_pn_phi).map(|p| rn * p);
    (dstar(report.cv_index), phi(report.cv_index), report.threshold.map(|t| rn * t), phi(report.selected_index))
}

fn ate_rows(cfg: &SimConfig, n: usize, r: usize) -> Result<Vec<ReplicateRow>> {
    let data = dgp_ate(&cfg.dgp, n, &mut stream(cfg.base_seed, n, r, Purpose::Data))?;
    let mut ate = cfg.ate.clone();
    let mut folds = stream(cfg.base_seed, n, r, Purpose::Folds);
    ate.propensity_cv.seed = folds.gen();
    ate.cv.seed = folds.gen();
    let est = fit_ate(&data, &ate)?;
    let rn = (n as f64).sqrt();
    let sel = &est.report.selector;
    let (dstar_cv, phi_cv, threshold, _) = trace_values(sel, rn);
    let und = ReplicateRow {
        n,
        replicate: r,
        estimator: Estimator::Undersmoothed,
        status: "ok".into(),
        psi: Some(est.psi),
        se: Some(est.interval.se),
        ci_lo: Some(est.interval.lo),
        ci_hi: Some(est.interval.hi),
        c_cv: Some(sel.c_cv),
        c_selected: Some(sel.c_selected),
        sqrt_n_pn_dstar: Some(est.diagnostics.sqrt_n_pn_dstar),
        sqrt_n_pn_dstar_cv: dstar_cv,
        sqrt_n_threshold: threshold,
        sqrt_n_min_active_pn_phi: est.diagnostics.min_active_pn_phi.map(|p| rn * p),
        not_met: Some(sel.not_met),
        shortfall: None,
        active_count: Some(est.diagnostics.active_count),
    };
    let cv = ReplicateRow {
        estimator: Estimator::Cv,
        psi: Some(est.psi_cv),
        se: None,
        ci_lo: None,
        ci_hi: None,
        c_selected: Some(sel.c_cv),
        sqrt_n_pn_dstar: dstar_cv,
        sqrt_n_min_active_pn_phi: phi_cv,
        not_met: None,
        active_count: None,
        ..und.clone()
    };
    Ok(vec![und, cv])
}

fn density_rows(cfg: &SimConfig, n: usize, r: usize) -> Result<Vec<ReplicateRow>> {
    let o = dgp_density(&cfg.dgp, n, &mut stream(cfg.base_seed, n, r, Purpose::Data))?;
    let mut dc = cfg.density.clone();
    dc.cv.seed = stream(cfg.base_seed, n, r, Purpose::Folds).gen();
    let est = fit_density(&o, &dc)?;
    let rn = (n as f64).sqrt();
    let sel = &est.report.selector;
    let (_, phi_cv, threshold, _) = trace_values(sel, rn);
    let und = ReplicateRow {
        n,
        replicate: r,
        estimator: Estimator::Undersmoothed,
        status: "ok".into(),
        psi: Some(est.psi),
        se: Some(est.interval.se),
        ci_lo: Some(est.interval.lo),
        ci_hi: Some(est.interval.hi),
        c_cv: Some(sel.c_cv),
        c_selected: Some(sel.c_selected),
        sqrt_n_pn_dstar: Some(est.diagnostics.sqrt_n_pn_dstar),
        sqrt_n_pn_dstar_cv: Some(est.cv.sqrt_n_pn_dstar),
        sqrt_n_threshold: threshold,
        sqrt_n_min_active_pn_phi: est.diagnostics.min_active_pn_phi.map(|p| rn * p),
        not_met: Some(sel.not_met),
        shortfall: Some(est.density.shortfall()),
        active_count: Some(est.diagnostics.active_count),
    };
    let cv = ReplicateRow {
        estimator: Estimator::Cv,
        psi: Some(est.cv.psi),
        se: Some(est.cv.interval.se),
        ci_lo: Some(est.cv.interval.lo),
        ci_hi: Some(est.cv.interval.hi),
        c_selected: Some(sel.c_cv),
        sqrt_n_pn_dstar: Some(est.cv.sqrt_n_pn_dstar),
        sqrt_n_min_active_pn_phi: phi_cv,
        not_met: None,
        shortfall: Some(est.cv.shortfall),
        active_count: None,
        ..und.clone()
    };
    Ok(vec![und, cv])
}

fn replicate(cfg: &SimConfig, n: usize, r: usize) -> Vec<ReplicateRow> {
    let res = match cfg.dgp.kind {
        DgpKind::DensitySim62 => density_rows(cfg, n, r),
        DgpKind::AteSim61 | DgpKind::CustomNull => ate_rows(cfg, n, r),
    };
    match res {
        Ok(rows) => rows,
        Err(e) => {
            log::warn!("replicate {r} at n = {n} failed: {e}");
            vec![
                ReplicateRow::failed(n, r, Estimator::Undersmoothed, &e),
                ReplicateRow::failed(n, r, Estimator::Cv, &e),
            ]
        }
    }
}

/// Runs every replicate of every sample size. Results do not depend on the
/// thread count.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<McReport> {
    cfg.validate()?;
    let truth = true_values(&cfg.dgp)?;
    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| HalError::InvalidInput(e.to_string()))?;
    let replicates: Vec<ReplicateRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, r)| {
                let rows = replicate(cfg, n, r);
                log::info!("n = {n} replicate {r} done");
                rows
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    let primary: Vec<&ReplicateRow> = replicates.iter().filter(|r| r.estimator == Estimator::Undersmoothed).collect();
    let failure_fraction = primary.iter().filter(|r| !r.ok()).count() as f64 / primary.len() as f64;
    let summary = summarize(&replicates, &truth, &cfg.n_grid);
    Ok(McReport {
        config: cfg.clone(),
        truth,
        summary,
        replicates,
        failure_fraction,
        failed: failure_fraction > cfg.failure_tolerance,
    })
}
