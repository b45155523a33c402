//! Config-driven Monte Carlo experiments: simulate, estimate, test, aggregate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::fixtures;
use crate::inference::{chi2_upper_quantile, gof_test, penalized_gof_test, TestReport};
use crate::lisrel::{ModelConfig, ParameterMask, ThetaVector};
use crate::matrix::{vech, vech_len, vech_pairs, SymMatrix};
use crate::qmle::{fit_multistart, fit_with, standard_errors_at, FitOptions, FitResult};
use crate::realized::{clt_zscores, realized_cov, RealizedCov};
use crate::sde::{child_seed, fmt17, simulate_with, DiffusionSystem, SamplingGrid, SimError, SimulateOptions, SystemConfig};
use crate::sparse::{sparse_from_fit, support, PenaltyConfig, SparseOptions};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("{model}: {failures} of {replications} replications failed (limit 1%)")]
    TooManyFailures { model: String, failures: usize, replications: usize },
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Either an inline object or a reference (`builtin:<name>` or a file path).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Ref(String),
    Inline(Box<T>),
}

impl<T: serde::de::DeserializeOwned + Clone> Source<T> {
    pub fn resolve(&self, base: Option<&Path>) -> Result<T, HarnessError> {
        match self {
            Source::Inline(v) => Ok((**v).clone()),
            Source::Ref(r) => {
                let text = read_reference(r, base)?;
                serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{r}: {e}")))
            }
        }
    }
}

/// Reads the JSON text behind `builtin:<name>` or a path (relative to `base`).
pub fn read_reference(r: &str, base: Option<&Path>) -> Result<String, HarnessError> {
    if let Some(name) = r.strip_prefix(fixtures::PREFIX) {
        return fixtures::builtin(name)
            .map(str::to_string)
            .ok_or_else(|| HarnessError::Config(format!("unknown fixture `{name}`")));
    }
    let path = match base {
        Some(b) if Path::new(r).is_relative() => b.join(r),
        _ => PathBuf::from(r),
    };
    fs::read_to_string(&path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitRule {
    /// `theta_init` from the model config.
    #[default]
    Config,
    /// `theta_true` from the model config.
    True,
    /// Minimizer of the contrast at the population covariance `Σ₀` of the
    /// true system (multistart from `theta_init`).
    Population,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitModelSpec {
    pub model: Source<ModelConfig>,
    #[serde(default)]
    pub init: InitRule,
    /// Run the sparse pipeline and the penalized test for this model.
    #[serde(default)]
    pub sparse: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    NonErgodic,
    Ergodic,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_multistart() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Metadata only; every regime runs through the same code.
    #[serde(default)]
    pub regime: Regime,
    pub true_model: Source<SystemConfig>,
    pub fit_models: Vec<FitModelSpec>,
    pub grid: SamplingGrid,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyConfig>,
    /// Starts per fit (1 = the configured start only).
    #[serde(default = "default_multistart")]
    pub multistart: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
    /// Directory that relative references are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Loads from `builtin:<name>` or a file path.
    pub fn load(r: &str) -> Result<Self, HarnessError> {
        let text = read_reference(r, None)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{r}: {e}")))?;
        if !r.starts_with(fixtures::PREFIX) {
            cfg.base_dir = Path::new(r).parent().map(Path::to_path_buf);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(HarnessError::Config("replications must be at least 1".into()));
        }
        if self.fit_models.is_empty() {
            return Err(HarnessError::Config("fit_models is empty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HarnessError::Config(format!("alpha = {} is not in (0, 1)", self.alpha)));
        }
        if self.fit_models.iter().any(|m| m.sparse) && self.penalty.is_none() {
            return Err(HarnessError::Config("a sparse fit model needs a `penalty` block".into()));
        }
        if let Some(p) = &self.penalty {
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// A fit model with everything resolved.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub name: String,
    pub config: ModelConfig,
    pub mask: ParameterMask,
    pub start: ThetaVector,
    pub theta_true: Option<ThetaVector>,
    pub sparse: bool,
}

#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub system: DiffusionSystem,
    pub sigma0: SymMatrix,
    pub models: Vec<PreparedModel>,
}

const POPULATION_STARTS: usize = 20;
const POPULATION_SEED: u64 = 0x5eed_0f_5e3;

/// Best contrast minimizer at `Σ₀` from `starts` jittered starts.
pub fn population_fit(
    sigma0: &SymMatrix,
    grid: &SamplingGrid,
    mask: &ParameterMask,
    start: &ThetaVector,
    starts: usize,
) -> Result<FitResult, HarnessError> {
    let q = RealizedCov::from_matrix(sigma0.clone(), grid.n(), grid.horizon())
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut start = start.clone();
    mask.project(&mut start.0);
    fit_multistart(&q, mask, &start, starts, POPULATION_SEED, &FitOptions::default())
        .map_err(|e| HarnessError::Runtime(format!("{}: {e}", mask.name())))
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment, HarnessError> {
    config.validate()?;
    let base = config.base_dir.as_deref();
    let sys_cfg = config.true_model.resolve(base)?;
    let system = sys_cfg.build().map_err(|e| HarnessError::Config(format!("true_model: {e}")))?;
    let sigma0 = system.sigma0();
    let mut models = Vec::new();
    for (i, spec) in config.fit_models.iter().enumerate() {
        let mc = spec.model.resolve(base)?;
        let mask = mc.mask().map_err(|e| HarnessError::Config(format!("fit_models[{i}]: {e}")))?;
        if mask.p() != system.p() {
            return Err(HarnessError::Config(format!(
                "fit_models[{i}] has p = {}, true model has p = {}",
                mask.p(),
                system.p()
            )));
        }
        let name = if mc.name.is_empty() { format!("model{i}") } else { mc.name.clone() };
        let start = match spec.init {
            InitRule::Config => mc.theta_init(),
            InitRule::True => mc
                .theta_true()
                .ok_or_else(|| HarnessError::Config(format!("{name}: init `true` needs theta_true")))?,
            InitRule::Population => {
                let pf = population_fit(&sigma0, &config.grid, &mask, &mc.theta_init(), POPULATION_STARTS)?;
                if !pf.converged {
                    return Err(HarnessError::Runtime(format!("{name}: population fit did not converge")));
                }
                pf.theta_hat
            }
        };
        if !mask.within_bounds(&start) {
            return Err(HarnessError::Config(format!("{name}: start value outside the parameter box")));
        }
        models.push(PreparedModel {
            name,
            theta_true: mc.theta_true(),
            config: mc,
            mask,
            start,
            sparse: spec.sparse,
        });
    }
    Ok(PreparedExperiment { config: config.clone(), system, sigma0, models })
}

/// Outcome of one model on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub failure: Option<String>,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub fallback_identity_v: bool,
    pub test: Option<TestReport>,
    pub active_set: Option<Vec<usize>>,
    pub theta_po: Option<Vec<f64>>,
    pub penalized: Option<TestReport>,
    pub support_match: Option<bool>,
    pub delta_warning: bool,
}

impl ModelOutcome {
    fn failed(msg: String) -> Self {
        ModelOutcome {
            failure: Some(msg),
            theta_hat: Vec::new(),
            converged: false,
            iterations: 0,
            fallback_identity_v: false,
            test: None,
            active_set: None,
            theta_po: None,
            penalized: None,
            support_match: None,
            delta_warning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: u64,
    /// `vech Q`; empty when the simulation failed.
    pub q_vech: Vec<f64>,
    pub zscores: Vec<f64>,
    pub models: Vec<ModelOutcome>,
}

fn run_model(exp: &PreparedExperiment, m: usize, q: &RealizedCov, rep: u64) -> ModelOutcome {
    let pm = &exp.models[m];
    let cfg = &exp.config;
    let opts = FitOptions::default();
    let fit = if cfg.multistart > 1 {
        fit_multistart(q, &pm.mask, &pm.start, cfg.multistart, child_seed(cfg.seed, 100 + m as u64, rep), &opts)
    } else {
        fit_with(q, &pm.mask, &pm.start, &opts)
    };
    let fit = match fit {
        Ok(f) => f,
        Err(e) => return ModelOutcome::failed(e.to_string()),
    };
    let mut out = ModelOutcome {
        failure: None,
        theta_hat: fit.theta_hat.0.clone(),
        converged: fit.converged,
        iterations: fit.iterations,
        fallback_identity_v: fit.fallback_identity_v,
        test: None,
        active_set: None,
        theta_po: None,
        penalized: None,
        support_match: None,
        delta_warning: false,
    };
    if !fit.converged {
        out.failure = Some(format!("fit did not converge (grad {:.3e})", fit.grad_norm));
        return out;
    }
    match gof_test(q, &fit, &pm.mask, cfg.alpha) {
        Ok(t) => out.test = Some(t),
        Err(e) => {
            out.failure = Some(e.to_string());
            return out;
        }
    }
    if pm.sparse {
        let pen = cfg.penalty.as_ref().expect("validated");
        let sp = match sparse_from_fit(q, &pm.mask, &fit, pen, &SparseOptions { fit: opts, plsa: false }) {
            Ok(s) => s,
            Err(e) => {
                out.failure = Some(format!("sparse: {e}"));
                return out;
            }
        };
        out.delta_warning = !sp.delta_warnings.is_empty();
        out.support_match = pm.theta_true.as_ref().map(|t| support(t) == sp.active_set);
        out.theta_po = Some(sp.theta_po.0.clone());
        if !sp.po.fit.converged {
            out.failure = Some("P-O refit did not converge".into());
            out.active_set = Some(sp.active_set);
            return out;
        }
        match penalized_gof_test(q, &sp.po.fit, sp.active_set.len(), &sp.po.reduced_mask, cfg.alpha) {
            Ok(t) => out.penalized = Some(t),
            Err(e) => out.failure = Some(format!("penalized test: {e}")),
        }
        out.active_set = Some(sp.active_set);
    }
    out
}

fn run_replication(exp: &PreparedExperiment, rep: u64) -> ReplicationRecord {
    let cfg = &exp.config;
    let sim = simulate_with(&exp.system, &cfg.grid, cfg.seed, &SimulateOptions { replication: rep, retain_latent: false })
        .map_err(|e| e.to_string())
        .and_then(|path| realized_cov(&path).map_err(|e| e.to_string()));
    let q = match sim {
        Ok(q) => q,
        Err(e) => {
            return ReplicationRecord {
                rep,
                q_vech: Vec::new(),
                zscores: Vec::new(),
                models: exp.models.iter().map(|_| ModelOutcome::failed(format!("simulation: {e}"))).collect(),
            }
        }
    };
    let zscores = clt_zscores(&q, &exp.sigma0).unwrap_or_default();
    let models = (0..exp.models.len()).map(|m| run_model(exp, m, &q, rep)).collect();
    ReplicationRecord { rep, q_vech: vech(q.q()).into_values(), zscores, models }
}

/// Runs every replication on a pool of `threads` workers (0 = all cores).
/// Records come back in replication order whatever the thread count.
pub fn run_replications(exp: &PreparedExperiment, threads: usize) -> Result<Vec<ReplicationRecord>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let reps = exp.config.replications as u64;
    Ok(pool.install(|| (0..reps).into_par_iter().map(|r| run_replication(exp, r)).collect()))
}

// ---------------------------------------------------------------------------
// aggregation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub theoretical_mean: Option<f64>,
    pub theoretical_sd: Option<f64>,
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn describe(name: impl Into<String>, values: &[f64], theoretical_mean: Option<f64>, theoretical_sd: Option<f64>) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Summary {
        name: name.into(),
        count: n,
        mean,
        sd,
        min: s.first().copied().unwrap_or(f64::NAN),
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
        max: s.last().copied().unwrap_or(f64::NAN),
        theoretical_mean,
        theoretical_sd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenalizedSummary {
    pub valid: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Replications whose LSA support equals the support of `theta_true`.
    pub support_matches: Option<usize>,
    pub support_rate: Option<f64>,
    pub true_support_size: Option<usize>,
    pub delta_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub name: String,
    pub q: usize,
    pub df: i64,
    pub labels: Vec<String>,
    pub start: Vec<f64>,
    pub theta_true: Option<Vec<f64>>,
    /// Standard errors at `theta_true` for the experiment's `n`.
    pub theoretical_se: Option<Vec<f64>>,
    pub failures: usize,
    pub valid: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub identity_fallbacks: usize,
    pub penalized: Option<PenalizedSummary>,
}

#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub config: ExperimentConfig,
    pub p: usize,
    pub sigma0_vech: Vec<f64>,
    pub records: Vec<ReplicationRecord>,
    pub models: Vec<ModelReport>,
    pub summaries: Vec<Summary>,
}

impl AggregateReport {
    pub fn summary(&self, name: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Outcomes of one model across replications, failures included.
    pub fn outcomes(&self, model: usize) -> impl Iterator<Item = &ModelOutcome> {
        self.records.iter().map(move |r| &r.models[model])
    }
}

pub fn aggregate(exp: &PreparedExperiment, records: Vec<ReplicationRecord>) -> Result<AggregateReport, HarnessError> {
    let cfg = &exp.config;
    let p = exp.system.p();
    let pbar = vech_len(p);
    let reps = records.len();
    let n = cfg.grid.n();
    let sigma0_vech = vech(&exp.sigma0).into_values();
    let s0 = exp.sigma0.as_matrix();
    let mut summaries = Vec::new();

    let sim_ok: Vec<&ReplicationRecord> = records.iter().filter(|r| !r.q_vech.is_empty()).collect();
    for (k, &(i, j)) in vech_pairs(p).iter().enumerate() {
        let vals: Vec<f64> = sim_ok.iter().map(|r| r.q_vech[k]).collect();
        let w = s0[(i, i)] * s0[(j, j)] + s0[(i, j)] * s0[(i, j)];
        summaries.push(describe(format!("q[{},{}]", i + 1, j + 1), &vals, Some(s0[(i, j)]), Some((w / n as f64).sqrt())));
    }

    let mut models = Vec::new();
    for (m, pm) in exp.models.iter().enumerate() {
        let outs: Vec<&ModelOutcome> = records.iter().map(|r| &r.models[m]).collect();
        let failures = outs.iter().filter(|o| o.failure.is_some()).count();
        if failures as f64 > 0.01 * reps as f64 {
            return Err(HarnessError::TooManyFailures { model: pm.name.clone(), failures, replications: reps });
        }
        let valid: Vec<&ModelOutcome> = outs.iter().copied().filter(|o| o.failure.is_none()).collect();
        let q = pm.mask.q();
        let df = pbar as i64 - q as i64;
        let theoretical_se = pm.theta_true.as_ref().and_then(|t| standard_errors_at(&pm.mask, t, n).ok());
        for j in 0..q {
            let vals: Vec<f64> = valid.iter().map(|o| o.theta_hat[j]).collect();
            summaries.push(describe(
                format!("{}.theta[{}]", pm.name, pm.mask.labels()[j]),
                &vals,
                pm.theta_true.as_ref().map(|t| t.0[j]),
                theoretical_se.as_ref().map(|s| s[j]),
            ));
        }
        let tests: Vec<&TestReport> = valid.iter().filter_map(|o| o.test.as_ref()).collect();
        let stats: Vec<f64> = tests.iter().map(|t| t.statistic).collect();
        let null = pm.theta_true.is_some();
        summaries.push(describe(
            format!("{}.T", pm.name),
            &stats,
            null.then_some(df as f64),
            null.then(|| (2.0 * df as f64).sqrt()),
        ));
        let rejections = tests.iter().filter(|t| t.reject).count();
        let rej: Vec<f64> = tests.iter().map(|t| if t.reject { 1.0 } else { 0.0 }).collect();
        summaries.push(describe(format!("{}.reject", pm.name), &rej, null.then_some(cfg.alpha), None));

        let penalized = if pm.sparse {
            let pts: Vec<&TestReport> = valid.iter().filter_map(|o| o.penalized.as_ref()).collect();
            let true_support = pm.theta_true.as_ref().map(|t| support(t).len());
            let pdf = true_support.map(|s| pbar as f64 - s as f64);
            summaries.push(describe(
                format!("{}.T_pen", pm.name),
                &pts.iter().map(|t| t.statistic).collect::<Vec<_>>(),
                pdf,
                pdf.map(|d| (2.0 * d).sqrt()),
            ));
            let sizes: Vec<f64> = valid.iter().filter_map(|o| o.active_set.as_ref().map(|a| a.len() as f64)).collect();
            summaries.push(describe(format!("{}.active_count", pm.name), &sizes, true_support.map(|s| s as f64), None));
            let prej = pts.iter().filter(|t| t.reject).count();
            let matches = pm.theta_true.as_ref().map(|_| valid.iter().filter(|o| o.support_match == Some(true)).count());
            Some(PenalizedSummary {
                valid: pts.len(),
                rejections: prej,
                rejection_rate: prej as f64 / pts.len().max(1) as f64,
                support_rate: matches.map(|c| c as f64 / valid.len().max(1) as f64),
                support_matches: matches,
                true_support_size: true_support,
                delta_warnings: valid.iter().filter(|o| o.delta_warning).count(),
            })
        } else {
            None
        };
        models.push(ModelReport {
            name: pm.name.clone(),
            q,
            df,
            labels: pm.mask.labels().to_vec(),
            start: pm.start.0.clone(),
            theta_true: pm.theta_true.as_ref().map(|t| t.0.clone()),
            theoretical_se,
            failures,
            valid: valid.len(),
            rejections,
            rejection_rate: rejections as f64 / tests.len().max(1) as f64,
            identity_fallbacks: valid.iter().filter(|o| o.fallback_identity_v).count(),
            penalized,
        });
    }
    Ok(AggregateReport { config: cfg.clone(), p, sigma0_vech, records, models, summaries })
}

/// Prepare, run and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<AggregateReport, HarnessError> {
    let exp = prepare(cfg)?;
    let records = run_replications(&exp, threads)?;
    aggregate(&exp, records)
}

// ---------------------------------------------------------------------------
// output files

fn opt(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

fn csv_io(e: csv::Error) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

/// Writes `summary.csv`, `tests.csv`, `qq.csv` and `run.json` into `dir`.
pub fn emit_tables(report: &AggregateReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;

    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record(["name", "count", "mean", "sd", "min", "q1", "median", "q3", "max", "theoretical_mean", "theoretical_sd"])
        .map_err(csv_io)?;
    for s in &report.summaries {
        w.write_record([
            s.name.clone(),
            s.count.to_string(),
            fmt17(s.mean),
            fmt17(s.sd),
            fmt17(s.min),
            fmt17(s.q1),
            fmt17(s.median),
            fmt17(s.q3),
            fmt17(s.max),
            opt(s.theoretical_mean),
            opt(s.theoretical_sd),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("tests.csv"))?;
    w.write_record(["model", "kind", "rep", "statistic", "df", "critical", "p_value", "reject"]).map_err(csv_io)?;
    for (m, mr) in report.models.iter().enumerate() {
        for rec in &report.records {
            let o = &rec.models[m];
            for (kind, t) in [("plain", &o.test), ("penalized", &o.penalized)] {
                if let Some(t) = t {
                    w.write_record([
                        mr.name.clone(),
                        kind.to_string(),
                        rec.rep.to_string(),
                        fmt17(t.statistic),
                        t.df.to_string(),
                        fmt17(t.critical),
                        fmt17(t.p_value),
                        t.reject.to_string(),
                    ])
                    .map_err(csv_io)?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("qq.csv"))?;
    w.write_record(["quantity", "rank", "empirical", "theoretical"]).map_err(csv_io)?;
    let normal = Normal::standard();
    let pairs = vech_pairs(report.p);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let mut z: Vec<f64> = report.records.iter().filter(|r| !r.zscores.is_empty()).map(|r| r.zscores[k]).collect();
        z.sort_by(|a, b| a.total_cmp(b));
        let m = z.len() as f64;
        for (r, v) in z.iter().enumerate() {
            let theo = normal.inverse_cdf((r as f64 + 0.5) / m);
            w.write_record([format!("z[{},{}]", i + 1, j + 1), (r + 1).to_string(), fmt17(*v), fmt17(theo)]).map_err(csv_io)?;
        }
    }
    for (m, mr) in report.models.iter().enumerate() {
        for (kind, pick) in [("T", 0), ("T_pen", 1)] {
            let mut stats: Vec<(f64, u32)> = report
                .outcomes(m)
                .filter(|o| o.failure.is_none())
                .filter_map(|o| if pick == 0 { o.test.as_ref() } else { o.penalized.as_ref() })
                .map(|t| (t.statistic, t.df))
                .collect();
            if stats.is_empty() {
                continue;
            }
            stats.sort_by(|a, b| a.0.total_cmp(&b.0));
            // reference df: the fixed df, or the modal estimated df
            let df = modal(stats.iter().map(|s| s.1));
            let cnt = stats.len() as f64;
            for (r, (v, _)) in stats.iter().enumerate() {
                let upper = 1.0 - (r as f64 + 0.5) / cnt;
                let theo = chi2_upper_quantile(df, upper).map_err(|e| HarnessError::Runtime(e.to_string()))?;
                w.write_record([format!("{}.{kind}", mr.name), (r + 1).to_string(), fmt17(*v), fmt17(theo)]).map_err(csv_io)?;
            }
        }
    }
    w.flush()?;

    let run = run_json(report);
    let mut f = fs::File::create(dir.join("run.json"))?;
    serde_json::to_writer_pretty(&mut f, &run).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    writeln!(f)?;
    Ok(())
}

fn modal(it: impl Iterator<Item = u32>) -> u32 {
    let mut counts = std::collections::BTreeMap::new();
    for d in it {
        *counts.entry(d).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by_key(|(d, c)| (*c, std::cmp::Reverse(*d))).map(|(d, _)| d).unwrap_or(1)
}

pub fn run_json(report: &AggregateReport) -> Value {
    let cfg = &report.config;
    json!({
        "config": cfg,
        "versions": { env!("CARGO_PKG_NAME"): env!("CARGO_PKG_VERSION") },
        "seeds": {
            "base": cfg.seed,
            "derivation": "each latent process (xi=0, delta=1, eps=2, zeta=3) of replication r is driven by ChaCha8 seeded with splitmix64 mixing of (base, process, r)",
        },
        "replications": report.records.len(),
        "p": report.p,
        "sigma0_vech": report.sigma0_vech,
        "models": report.models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quartiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.75), 3.25);
        let d = describe("x", &[3.0, 1.0, 2.0], None, None);
        assert_eq!((d.mean, d.sd, d.median, d.min, d.max), (2.0, 1.0, 2.0, 1.0, 3.0));
    }

    #[test]
    fn modal_df_prefers_most_frequent() {
        assert_eq!(modal([87, 86, 87, 88].into_iter()), 87);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::load("builtin:sec5_experiment").unwrap();
        cfg.validate().unwrap();
        cfg.replications = 0;
        assert!(cfg.validate().unwrap_err().is_config());
        assert!(ExperimentConfig::load("builtin:nope").unwrap_err().is_config());
    }
}
