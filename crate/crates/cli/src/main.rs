use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hfsem::harness::{emit_tables, read_reference, run_experiment, ExperimentConfig, HarnessError};
use hfsem::inference::{gof_test, penalized_gof_test};
use hfsem::lisrel::{ModelConfig, ParameterMask, ThetaVector};
use hfsem::qmle::{fit_with, FitOptions, FitResult};
use hfsem::realized::{realized_cov, RealizedCov};
use hfsem::sde::{simulate_with, PathSample, SamplingGrid, SimulateOptions, SystemConfig};
use hfsem::sparse::{sparse_from_fit, PenaltyConfig, SparseOptions};

const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "hfsem", version, about = "Latent-factor SEM for high-frequency diffusion data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file, or `builtin:<name>` for a bundled fixture.
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Output directory (stdout when omitted, except for `mc`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Worker threads; 0 or omitted uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one observation path from a system config and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a model config to a path CSV by quasi-likelihood.
    Estimate(FitArgs),
    /// Fit and run the goodness-of-fit test.
    Gof(FitArgs),
    /// Fit, sparsify, refit on the selected support and run the penalized test.
    Sparse(SparseArgs),
    /// Run a Monte Carlo experiment and write summary tables.
    Mc,
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of increments.
    #[arg(long)]
    n: usize,
    /// Sampling step.
    #[arg(long)]
    h: f64,
    /// Replication index mixed into the seed.
    #[arg(long, default_value_t = 0)]
    rep: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Start {
    Config,
    True,
}

#[derive(Args)]
struct FitArgs {
    /// Observation path CSV as written by `simulate`.
    #[arg(long)]
    path: PathBuf,
    /// Starting value taken from the model config.
    #[arg(long, value_enum, default_value = "config")]
    init: Start,
}

#[derive(Args)]
struct SparseArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Penalty config JSON; defaults to lambda1 = n^-0.6, lambda2 = 10, gamma = 4, delta = 0.1.
    #[arg(long)]
    penalty: Option<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    if let Some(a) = g.alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(Failure::Config(format!("--alpha {a} is not in (0, 1)")));
        }
    }
    match &cli.command {
        Command::Simulate(a) => simulate(g, a),
        Command::Estimate(a) => estimate(g, a, false),
        Command::Gof(a) => estimate(g, a, true),
        Command::Sparse(a) => sparse(g, a),
        Command::Mc => mc(g),
    }
}

fn require_config(g: &Global) -> Result<&str, Failure> {
    g.config.as_deref().ok_or_else(|| Failure::Config("--config is required".into()))
}

fn parse_json<T: serde::de::DeserializeOwned>(reference: &str) -> Result<T, Failure> {
    let text = read_reference(reference, None)?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{reference}: {e}")))
}

/// Writes `text` to `dir/name`, or to stdout without `--out`.
fn emit(g: &Global, name: &str, text: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Runtime(e.to_string());
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io)?;
            fs::write(dir.join(name), text).map_err(io)
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(io),
    }
}

fn emit_json(g: &Global, name: &str, v: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    emit(g, name, &text)
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<(), Failure> {
    let cfg: SystemConfig = parse_json(require_config(g)?)?;
    let system = cfg.build().map_err(|e| Failure::Config(e.to_string()))?;
    let grid = SamplingGrid::new(a.n, a.h).map_err(|e| Failure::Config(e.to_string()))?;
    let opts = SimulateOptions { replication: a.rep, retain_latent: false };
    let path = simulate_with(&system, &grid, g.seed.unwrap_or(0), &opts).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut buf = Vec::new();
    path.write_csv(&mut buf).map_err(|e| Failure::Runtime(e.to_string()))?;
    emit(g, "path.csv", &String::from_utf8(buf).expect("csv is utf-8"))
}

struct Loaded {
    q: RealizedCov,
    mask: ParameterMask,
    fit: FitResult,
}

fn load_and_fit(g: &Global, a: &FitArgs) -> Result<Loaded, Failure> {
    let mc: ModelConfig = parse_json(require_config(g)?)?;
    let mask = mc.mask().map_err(|e| Failure::Config(e.to_string()))?;
    let file = fs::File::open(&a.path).map_err(|e| Failure::Config(format!("{}: {e}", a.path.display())))?;
    let path = PathSample::read_csv(file).map_err(|e| Failure::Config(format!("{}: {e}", a.path.display())))?;
    if path.p != mask.p() {
        return Err(Failure::Config(format!("path has {} columns, model expects p = {}", path.p, mask.p())));
    }
    let q = realized_cov(&path).map_err(|e| Failure::Runtime(e.to_string()))?;
    let start: ThetaVector = match a.init {
        Start::Config => mc.theta_init(),
        Start::True => mc.theta_true().ok_or_else(|| Failure::Config("--init true needs theta_true in the model config".into()))?,
    };
    let opts = FitOptions { standard_errors: true, ..Default::default() };
    let fit = fit_with(&q, &mask, &start, &opts).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(Loaded { q, mask, fit })
}

fn estimate(g: &Global, a: &FitArgs, with_test: bool) -> Result<(), Failure> {
    let l = load_and_fit(g, a)?;
    let mut out = l.fit.to_json();
    if with_test {
        let t = gof_test(&l.q, &l.fit, &l.mask, g.alpha.unwrap_or(0.05)).map_err(|e| Failure::Runtime(e.to_string()))?;
        out["test"] = json!(t);
    }
    emit_json(g, if with_test { "gof.json" } else { "fit.json" }, &out)?;
    if !l.fit.converged {
        return Err(Failure::Runtime("fit did not converge".into()));
    }
    Ok(())
}

fn sparse(g: &Global, a: &SparseArgs) -> Result<(), Failure> {
    let l = load_and_fit(g, &a.fit)?;
    if !l.fit.converged {
        emit_json(g, "sparse.json", &json!({ "fit": l.fit.to_json() }))?;
        return Err(Failure::Runtime("initial fit did not converge".into()));
    }
    let pen = match &a.penalty {
        Some(r) => parse_json::<PenaltyConfig>(r)?,
        None => PenaltyConfig {
            lambda1: (l.q.n() as f64).powf(-0.6),
            lambda2: 10.0,
            gamma: 4.0,
            delta: 0.1,
            exclude_positive_lower: true,
        },
    };
    pen.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let sp = sparse_from_fit(&l.q, &l.mask, &l.fit, &pen, &SparseOptions::default())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let test = penalized_gof_test(&l.q, &sp.po.fit, sp.active_set.len(), &sp.po.reduced_mask, g.alpha.unwrap_or(0.05))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let out = json!({ "penalty": pen, "fit": l.fit.to_json(), "sparse": sp.to_json(), "test": test });
    emit_json(g, "sparse.json", &out)
}

fn mc(g: &Global) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(require_config(g)?)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = g.reps {
        cfg.replications = r;
    }
    if let Some(a) = g.alpha {
        cfg.alpha = a;
    }
    let dir: PathBuf = match (&g.out, &cfg.outputs) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => match &cfg.base_dir {
            Some(b) if d.is_relative() => b.join(d),
            _ => d.clone(),
        },
        (None, None) => return Err(Failure::Config("no output directory: pass --out or set `outputs`".into())),
    };
    let report = run_experiment(&cfg, g.threads)?;
    emit_tables(&report, &dir)?;
    print_overview(&report, &dir);
    Ok(())
}

fn print_overview(report: &hfsem::harness::AggregateReport, dir: &Path) {
    for m in &report.models {
        println!("{}: {} valid, {} failed, plain rejections {}", m.name, m.valid, m.failures, m.rejections);
        if let Some(p) = &m.penalized {
            println!("{}: penalized rejections {} of {}", m.name, p.rejections, p.valid);
        }
    }
    println!("tables written to {}", dir.display());
}
