use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hal_core::basis::{design_matrix, enumerate_basis, BasisCaps};
use hal_core::data::{read_csv, ColumnRoles};
use hal_core::lasso::SolverOptions;
use hal_core::loss::{Family, LossKind};
use hal_core::select::{cv_select_m, select_c, vfold_split, weight_folds, CvConfig, Rule, SelectionProblem, UndersmoothConfig};
use hal_core::sim::{emit_report, regenerate_plots, run_monte_carlo, DgpKind, SimConfig};
use hal_core::targets::{fit_ate, fit_density, write_eic_csv, AteConfig, DensityConfig};
use hal_core::{HalError, Result};

#[derive(Parser)]
#[command(name = "hal", version, about = "Highly adaptive lasso fits, plug-in estimators and simulation studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON settings; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    /// Spline order of the regression fit.
    #[arg(long)]
    m: Option<usize>,
    /// Number of penalties on the CV grid.
    #[arg(long)]
    grid_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Cv,
    Global,
    Sparse,
    Targeted,
}

impl From<RuleArg> for Rule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Cv => Rule::Cv,
            RuleArg::Global => Rule::Global,
            RuleArg::Sparse => Rule::Sparse,
            RuleArg::Targeted => Rule::Targeted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Squared,
    Binomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    Ate,
    Density,
    Null,
}

#[derive(Subcommand)]
enum Command {
    /// HAL regression of one CSV column on the others.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        outcome: String,
        /// Comma-separated covariates; default is every other column.
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
    },
    /// Treatment-specific mean E[E(Y | A = 1, W)].
    Ate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        outcome: String,
        #[arg(long)]
        treatment: String,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
    },
    /// Integrated squared density of one CSV column.
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        column: String,
    },
    /// Monte Carlo study; writes summary.csv, replicates.csv, config.json and SVG figures.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Preset used when no config file is given.
        #[arg(long, value_enum, default_value = "ate")]
        study: StudyArg,
        #[arg(long)]
        replicates: Option<usize>,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Redraws the figures of a simulate run.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Directory holding replicates.csv and config.json.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Settings of `hal fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct FitConfig {
    family: Family,
    /// `None` cross-validates the order over `cv.m_grid`.
    m: Option<usize>,
    caps: BasisCaps,
    cv: CvConfig,
    undersmooth: UndersmoothConfig,
    solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            family: Family::SquaredError,
            m: None,
            caps: BasisCaps::default(),
            cv: CvConfig::default(),
            undersmooth: UndersmoothConfig::cv(),
            solver: SolverOptions::default(),
        }
    }
}

fn load<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn apply_cv(cv: &mut CvConfig, c: &Common) {
    if let Some(s) = c.seed {
        cv.seed = s;
    }
    if let Some(g) = c.grid_size {
        cv.grid_size = g;
    }
}

fn warn_not_met(not_met: bool) {
    if not_met {
        eprintln!("warning: the undersmoothing criterion never held on the grid; the largest path bound was used");
    }
}

fn fit(c: &Common, data: &Path, outcome: String, covariates: Vec<String>, family: Option<FamilyArg>) -> Result<bool> {
    let mut cfg: FitConfig = load(&c.config)?;
    apply_cv(&mut cfg.cv, c);
    if let Some(f) = family {
        cfg.family = match f {
            FamilyArg::Squared => Family::SquaredError,
            FamilyArg::Binomial => Family::BinomialLoglik,
        };
    }
    if let Some(r) = c.rule {
        cfg.undersmooth.rule = r.into();
    }
    if c.m.is_some() {
        cfg.m = c.m;
    }
    if cfg.undersmooth.rule == Rule::Targeted {
        return Err(HalError::InvalidInput("the targeted rule needs an estimand; use `ate` or `density`".into()));
    }
    let data = read_csv(
        data,
        &ColumnRoles {
            outcome,
            treatment: None,
            covariates,
        },
    )?;
    let loss = match cfg.family {
        Family::SquaredError => LossKind::squared_error(),
        Family::BinomialLoglik => LossKind::binomial(),
    };
    let m = match cfg.m {
        Some(m) => m,
        None => {
            let (m, orders) = cv_select_m(&data, &loss, &cfg.caps, &cfg.cv, &cfg.solver)?;
            fs::create_dir_all(&c.out)?;
            write_json(&c.out, "order_selection.json", &orders)?;
            m
        }
    };
    let dict = enumerate_basis(&data, m, &cfg.caps)?;
    let design = design_matrix(&data, &dict)?;
    let labels = vfold_split(data.n(), cfg.cv.folds, cfg.cv.seed)?;
    let folds = weight_folds(&data, &labels, cfg.cv.folds)?;
    let mut problem = SelectionProblem::new(&design, &data, loss);
    problem.m = m;
    let sel = select_c(&problem, &folds, &cfg.cv, &cfg.undersmooth, &cfg.solver)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("fit.json"), sel.fit.to_json()?)?;
    fs::write(c.out.join("selector_report.json"), sel.report.to_json()?)?;
    sel.report.write_trace_csv(c.out.join("criterion_trace.csv"))?;
    write_json(&c.out, "config.json", &FitConfig { m: Some(m), ..cfg })?;
    println!(
        "m = {m}, C_cv = {:.6}, C_selected = {:.6}, active = {}",
        sel.report.c_cv,
        sel.report.c_selected,
        sel.fit.active_non_intercept().count()
    );
    warn_not_met(sel.report.not_met);
    Ok(false)
}

fn ate(c: &Common, data: &Path, outcome: String, treatment: String, covariates: Vec<String>) -> Result<bool> {
    let mut cfg: AteConfig = load(&c.config)?;
    apply_cv(&mut cfg.cv, c);
    apply_cv(&mut cfg.propensity_cv, c);
    if let Some(r) = c.rule {
        cfg.undersmooth.rule = r.into();
    }
    if let Some(m) = c.m {
        cfg.outcome_m = m;
    }
    let data = read_csv(
        data,
        &ColumnRoles {
            outcome,
            treatment: Some(treatment),
            covariates,
        },
    )?;
    let est = fit_ate(&data, &cfg)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("estimate.json"), est.report.to_json()?)?;
    write_eic_csv(c.out.join("eic.csv"), &est.eic)?;
    est.report.selector.write_trace_csv(c.out.join("criterion_trace.csv"))?;
    write_json(&c.out, "config.json", &cfg)?;
    println!(
        "psi = {:.6} (se {:.6}, 95% CI [{:.6}, {:.6}]), cv plug-in {:.6}",
        est.psi, est.interval.se, est.interval.lo, est.interval.hi, est.psi_cv
    );
    warn_not_met(est.report.selector.not_met);
    Ok(false)
}

fn density(c: &Common, data: &Path, column: String) -> Result<bool> {
    let mut cfg: DensityConfig = load(&c.config)?;
    apply_cv(&mut cfg.cv, c);
    if let Some(r) = c.rule {
        cfg.undersmooth.rule = r.into();
    }
    if c.m.is_some_and(|m| m != 0) {
        return Err(HalError::InvalidInput("the hazard fit uses zero-order splines only".into()));
    }
    let data = read_csv(
        data,
        &ColumnRoles {
            outcome: column.clone(),
            treatment: None,
            covariates: vec![column],
        },
    )?;
    let est = fit_density(data.y(), &cfg)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("estimate.json"), est.report.to_json()?)?;
    write_eic_csv(c.out.join("eic.csv"), &est.eic)?;
    est.report.selector.write_trace_csv(c.out.join("criterion_trace.csv"))?;
    write_json(&c.out, "density.json", &est.density)?;
    write_json(&c.out, "config.json", &cfg)?;
    println!(
        "psi = {:.6} (se {:.6}, 95% CI [{:.6}, {:.6}]), cv plug-in {:.6}, shortfall {:.2e}",
        est.psi,
        est.interval.se,
        est.interval.lo,
        est.interval.hi,
        est.cv.psi,
        est.density.shortfall()
    );
    warn_not_met(est.report.selector.not_met);
    Ok(false)
}

fn simulate(c: &Common, study: StudyArg, replicates: Option<usize>, n: Vec<usize>) -> Result<bool> {
    let mut cfg = match &c.config {
        Some(_) => load::<SimConfig>(&c.config)?,
        None => SimConfig::for_kind(match study {
            StudyArg::Ate => DgpKind::AteSim61,
            StudyArg::Density => DgpKind::DensitySim62,
            StudyArg::Null => DgpKind::CustomNull,
        }),
    };
    if let Some(s) = c.seed {
        cfg.base_seed = s;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if let Some(r) = c.rule {
        cfg.set_rule(r.into());
    }
    if let Some(m) = c.m {
        cfg.set_m(m);
    }
    if let Some(g) = c.grid_size {
        cfg.set_grid_size(g);
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if !n.is_empty() {
        cfg.n_grid = n;
    }
    let report = run_monte_carlo(&cfg)?;
    emit_report(&report, &c.out)?;
    for s in &report.summary {
        println!(
            "n = {:5} {:13} sqrt(n) bias {:+.4}  n var {:.4}  n mse {:.4}  coverage {}  bound {:.4}",
            s.n,
            s.estimator.to_string(),
            s.sqrt_n_bias,
            s.n_variance,
            s.n_mse,
            s.coverage_95.map_or("-".into(), |v| format!("{v:.3}")),
            s.efficiency_bound
        );
    }
    if report.failed {
        eprintln!("{:.1}% of replicates failed; run flagged", 100.0 * report.failure_fraction);
    }
    Ok(report.failed)
}

fn run(cli: Cli) -> Result<bool> {
    let threads = match &cli.command {
        Command::Fit { common, .. }
        | Command::Ate { common, .. }
        | Command::Density { common, .. }
        | Command::Simulate { common, .. }
        | Command::Plot { common, .. } => common.threads,
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| HalError::InvalidInput(e.to_string()))?;
    }
    match cli.command {
        Command::Fit {
            common,
            data,
            outcome,
            covariates,
            family,
        } => fit(&common, &data, outcome, covariates, family),
        Command::Ate {
            common,
            data,
            outcome,
            treatment,
            covariates,
        } => ate(&common, &data, outcome, treatment, covariates),
        Command::Density { common, data, column } => density(&common, &data, column),
        Command::Simulate {
            common,
            study,
            replicates,
            n,
        } => simulate(&common, study, replicates, n),
        Command::Plot { common, input } => {
            let set = regenerate_plots(&input, &common.out)?;
            for (name, _) in &set.files {
                println!("{}", common.out.join(name).display());
            }
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with 1; code 2 is reserved for flagged runs.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
