//! Euler–Maruyama simulation of the latent diffusion system and assembly of
//! the observed process
//!
//! ```text
//! X1 = Λx1 ξ + δ,   X2 = Λx2 η + ε,   η = Ψ⁻¹(Γ ξ + ζ),   Ψ = I − B.
//! ```
//!
//! Each of the four latent processes draws from its own ChaCha8 stream whose
//! seed is a SplitMix64 mix of `(seed, process index, replication index)`.
//! Standard normals come from `rand_distr::StandardNormal` (ziggurat); at
//! every step a process draws its `r` Wiener increments in coordinate order.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lisrel::{implied_covariance, ModelMatrices};
use crate::matrix::{PdFactor, SymMatrix};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite drift in process {process} at step {step}")]
    NonFiniteDrift { process: &'static str, step: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error("invalid sampling grid: {0}")]
    Grid(String),
    #[error("path file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A drift vector field `x ↦ b(x)`.
pub trait DriftField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Mean-reverting affine drift `x ↦ −(A x − b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDrift {
    a: DMatrix<f64>,
    b: Vec<f64>,
}

impl AffineDrift {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &[f64] {
        &self.b
    }
}

impl DriftField for AffineDrift {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = self.b.len();
        for i in 0..d {
            let mut s = -self.b[i];
            for j in 0..d {
                s += self.a[(i, j)] * x[j];
            }
            out[i] = -s;
        }
    }
}

pub fn ou_drift(a: DMatrix<f64>, b: Vec<f64>) -> Result<AffineDrift, SimError> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(SimError::Dimension(format!(
            "drift matrix {}x{} does not conform with offset of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    Ok(AffineDrift { a, b })
}

/// Equidistant grid `t_i = i·h`, `i = 0..=n`, horizon `T = n·h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct SamplingGrid {
    n: usize,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    n: usize,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "T")]
    horizon: Option<f64>,
}

impl TryFrom<GridRepr> for SamplingGrid {
    type Error = SimError;

    fn try_from(r: GridRepr) -> Result<Self, SimError> {
        let g = SamplingGrid::new(r.n, r.h)?;
        if let Some(t) = r.horizon {
            if (t - g.horizon()).abs() > 1e-12 * t.abs() {
                return Err(SimError::Grid(format!("T = {t} differs from n·h = {}", g.horizon())));
            }
        }
        Ok(g)
    }
}

impl From<SamplingGrid> for GridRepr {
    fn from(g: SamplingGrid) -> Self {
        GridRepr { n: g.n, h: g.h, horizon: Some(g.horizon()) }
    }
}

impl SamplingGrid {
    pub fn new(n: usize, h: f64) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::Grid("need at least one increment".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(SimError::Grid(format!("step size must be positive, got {h}")));
        }
        Ok(SamplingGrid { n, h })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.h
    }
}

/// One latent diffusion `dY = b(Y) dt + S dW`, `Y_0 = c`.
#[derive(Debug, Clone)]
pub struct LatentProcess {
    pub drift: Arc<dyn DriftField>,
    pub diffusion: DMatrix<f64>,
    pub initial: Vec<f64>,
}

impl LatentProcess {
    pub fn new(
        drift: Arc<dyn DriftField>,
        diffusion: DMatrix<f64>,
        initial: Vec<f64>,
    ) -> Result<Self, SimError> {
        let d = drift.dim();
        if diffusion.nrows() != d || initial.len() != d {
            return Err(SimError::Dimension(format!(
                "process of dimension {d} has a {}x{} diffusion matrix and initial state of length {}",
                diffusion.nrows(),
                diffusion.ncols(),
                initial.len()
            )));
        }
        Ok(LatentProcess { drift, diffusion, initial })
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    /// `S Sᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.diffusion * self.diffusion.transpose()
    }
}

/// The true model: four latent diffusions plus the measurement and structural
/// matrices that map them onto the observed process.
#[derive(Debug, Clone)]
pub struct DiffusionSystem {
    pub xi: LatentProcess,
    pub delta: LatentProcess,
    pub eps: LatentProcess,
    pub zeta: LatentProcess,
    pub lx1: DMatrix<f64>,
    pub lx2: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub b: DMatrix<f64>,
    // Λx2 Ψ⁻¹ Γ and Λx2 Ψ⁻¹, cached for the observation map.
    load_xi: DMatrix<f64>,
    load_zeta: DMatrix<f64>,
}

impl DiffusionSystem {
    pub fn new(
        xi: LatentProcess,
        delta: LatentProcess,
        eps: LatentProcess,
        zeta: LatentProcess,
        lx1: DMatrix<f64>,
        lx2: DMatrix<f64>,
        gamma: DMatrix<f64>,
        b: DMatrix<f64>,
    ) -> Result<Self, SimError> {
        let (k1, p1, p2, k2) = (xi.dim(), delta.dim(), eps.dim(), zeta.dim());
        let shape = |m: &DMatrix<f64>, r: usize, c: usize, name: &str| {
            if m.shape() != (r, c) {
                Err(SimError::Dimension(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        shape(&lx1, p1, k1, "lx1")?;
        shape(&lx2, p2, k2, "lx2")?;
        shape(&gamma, k2, k1, "gamma")?;
        shape(&b, k2, k2, "b")?;
        if (0..k2).any(|i| b[(i, i)] != 0.0) {
            return Err(SimError::Model("diagonal of B must be zero".into()));
        }
        let psi = DMatrix::identity(k2, k2) - &b;
        PdFactor::new(&(&psi * psi.transpose()))
            .map_err(|_| SimError::Model("Ψ = I − B is singular".into()))?;
        let psi_inv = psi
            .clone()
            .try_inverse()
            .ok_or_else(|| SimError::Model("Ψ = I − B is singular".into()))?;
        let rank = lx1.clone().svd(false, false).rank(1e-10 * lx1.norm().max(1.0));
        if rank < k1 {
            return Err(SimError::Model(format!("Λx1 has rank {rank} < {k1}")));
        }
        PdFactor::new(&delta.covariance())
            .map_err(|_| SimError::Model("Σδδ = S2 S2ᵀ is not positive definite".into()))?;
        PdFactor::new(&eps.covariance())
            .map_err(|_| SimError::Model("Σεε = S3 S3ᵀ is not positive definite".into()))?;
        let load_zeta = &lx2 * &psi_inv;
        let load_xi = &load_zeta * &gamma;
        Ok(DiffusionSystem { xi, delta, eps, zeta, lx1, lx2, gamma, b, load_xi, load_zeta })
    }

    pub fn p1(&self) -> usize {
        self.delta.dim()
    }

    pub fn p2(&self) -> usize {
        self.eps.dim()
    }

    pub fn p(&self) -> usize {
        self.p1() + self.p2()
    }

    /// Covariance of the observed increments per unit time, `Σ₀`.
    pub fn sigma0(&self) -> SymMatrix {
        let m = ModelMatrices {
            lx1: self.lx1.clone(),
            lx2: self.lx2.clone(),
            gamma: self.gamma.clone(),
            b: self.b.clone(),
            sxx: self.xi.covariance(),
            sdd: self.delta.covariance(),
            see: self.eps.covariance(),
            szz: self.zeta.covariance(),
        };
        implied_covariance(&m).expect("Ψ was checked invertible at construction")
    }

    fn observe(&self, xi: &[f64], delta: &[f64], eps: &[f64], zeta: &[f64], out: &mut [f64]) {
        let (p1, p2) = (self.p1(), self.p2());
        for i in 0..p1 {
            let mut s = delta[i];
            for (j, x) in xi.iter().enumerate() {
                s += self.lx1[(i, j)] * x;
            }
            out[i] = s;
        }
        for i in 0..p2 {
            let mut s = eps[i];
            for (j, x) in xi.iter().enumerate() {
                s += self.load_xi[(i, j)] * x;
            }
            for (j, z) in zeta.iter().enumerate() {
                s += self.load_zeta[(i, j)] * z;
            }
            out[p1 + i] = s;
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream used by `process` in `replication`.
pub fn child_seed(seed: u64, process: u64, replication: u64) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ process.wrapping_mul(0xD1B5_4A32_D192_ED03));
    splitmix64(h ^ replication.wrapping_mul(0xA24B_AED4_963E_E407))
}

struct EulerStepper<'a> {
    name: &'static str,
    drift: &'a dyn DriftField,
    s: &'a DMatrix<f64>,
    h: f64,
    sqrt_h: f64,
    state: Vec<f64>,
    drift_buf: Vec<f64>,
    z: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> EulerStepper<'a> {
    fn new(
        name: &'static str,
        drift: &'a dyn DriftField,
        s: &'a DMatrix<f64>,
        c0: &[f64],
        grid: &SamplingGrid,
        rng: ChaCha8Rng,
    ) -> Result<Self, SimError> {
        let d = c0.len();
        if drift.dim() != d || s.nrows() != d {
            return Err(SimError::Dimension(format!(
                "{name}: state of length {d}, drift of dimension {}, diffusion with {} rows",
                drift.dim(),
                s.nrows()
            )));
        }
        Ok(EulerStepper {
            name,
            drift,
            s,
            h: grid.h(),
            sqrt_h: grid.h().sqrt(),
            state: c0.to_vec(),
            drift_buf: vec![0.0; d],
            z: vec![0.0; s.ncols()],
            rng,
        })
    }

    fn step(&mut self, index: usize) -> Result<(), SimError> {
        self.drift.eval(&self.state, &mut self.drift_buf);
        if self.drift_buf.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteDrift { process: self.name, step: index });
        }
        for z in self.z.iter_mut() {
            *z = self.rng.sample(StandardNormal);
        }
        for i in 0..self.state.len() {
            let mut noise = 0.0;
            for (k, z) in self.z.iter().enumerate() {
                noise += self.s[(i, k)] * z;
            }
            self.state[i] += self.drift_buf[i] * self.h + self.sqrt_h * noise;
        }
        Ok(())
    }
}

/// Euler–Maruyama path `Y_0 = c0`, `Y_i = Y_{i−1} + b(Y_{i−1}) h + S √h Z_i`.
/// Returns the `(n+1) × d` path in row-major order.
pub fn euler_maruyama<R: Rng>(
    drift: &dyn DriftField,
    s: &DMatrix<f64>,
    c0: &[f64],
    grid: &SamplingGrid,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    let seeded = ChaCha8Rng::from_rng(rng);
    let mut stepper = EulerStepper::new("process", drift, s, c0, grid, seeded)?;
    let mut out = Vec::with_capacity((grid.n() + 1) * c0.len());
    out.extend_from_slice(c0);
    for i in 1..=grid.n() {
        stepper.step(i)?;
        out.extend_from_slice(&stepper.state);
    }
    Ok(out)
}

/// Latent paths retained on request, each `(n+1) × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPaths {
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    pub eps: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Discrete observations `X_{t_0}, …, X_{t_n}` of the `p`-dimensional process.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: SamplingGrid,
    pub p: usize,
    pub seed: u64,
    pub replication: u64,
    data: Vec<f64>,
    pub latent: Option<LatentPaths>,
}

impl PathSample {
    /// Wraps an `(n+1) × p` row-major observation array.
    pub fn from_rows(grid: SamplingGrid, p: usize, data: Vec<f64>) -> Result<Self, SimError> {
        if p == 0 || data.len() != (grid.n() + 1) * p {
            return Err(SimError::Dimension(format!(
                "expected {} values for {} rows of width {p}, got {}",
                (grid.n() + 1) * p,
                grid.n() + 1,
                data.len()
            )));
        }
        Ok(PathSample { grid, p, seed: 0, replication: 0, data, latent: None })
    }

    pub fn rows(&self) -> usize {
        self.grid.n() + 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// CSV with header `t,x1,…,xp` and 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.p).map(|j| format!("x{j}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.rows() {
            let mut rec = Vec::with_capacity(self.p + 1);
            rec.push(fmt17(self.grid.time(i)));
            rec.extend(self.row(i).iter().map(|v| fmt17(*v)));
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a path written by [`PathSample::write_csv`] (or any CSV with a
    /// leading equidistant time column). `h` is taken as `(t_n − t_0)/n`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 2 || &headers[0] != "t" {
            return Err(SimError::Format("header must start with `t` followed by columns".into()));
        }
        let p = headers.len() - 1;
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != p + 1 {
                return Err(SimError::Format(format!("row {row} has {} fields", rec.len())));
            }
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    SimError::Format(format!("row {row}, column {k}: cannot parse `{field}`"))
                })?;
                if k == 0 {
                    times.push(v);
                } else {
                    data.push(v);
                }
            }
        }
        if times.len() < 2 {
            return Err(SimError::Format("need at least two observations".into()));
        }
        let n = times.len() - 1;
        let grid = SamplingGrid::new(n, (times[n] - times[0]) / n as f64)?;
        PathSample::from_rows(grid, p, data)
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Format(e.to_string())
}

/// Formats with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimulateOptions {
    pub replication: u64,
    pub retain_latent: bool,
}

/// Simulates the observed process for replication 0 of `seed`.
pub fn simulate_observations(
    sys: &DiffusionSystem,
    grid: &SamplingGrid,
    seed: u64,
) -> Result<PathSample, SimError> {
    simulate_with(sys, grid, seed, &SimulateOptions::default())
}

pub fn simulate_with(
    sys: &DiffusionSystem,
    grid: &SamplingGrid,
    seed: u64,
    opts: &SimulateOptions,
) -> Result<PathSample, SimError> {
    let rng = |process: u64| ChaCha8Rng::seed_from_u64(child_seed(seed, process, opts.replication));
    let mut xi =
        EulerStepper::new("xi", &*sys.xi.drift, &sys.xi.diffusion, &sys.xi.initial, grid, rng(0))?;
    let mut delta = EulerStepper::new(
        "delta",
        &*sys.delta.drift,
        &sys.delta.diffusion,
        &sys.delta.initial,
        grid,
        rng(1),
    )?;
    let mut eps =
        EulerStepper::new("eps", &*sys.eps.drift, &sys.eps.diffusion, &sys.eps.initial, grid, rng(2))?;
    let mut zeta = EulerStepper::new(
        "zeta",
        &*sys.zeta.drift,
        &sys.zeta.diffusion,
        &sys.zeta.initial,
        grid,
        rng(3),
    )?;

    let p = sys.p();
    let rows = grid.n() + 1;
    let mut data = vec![0.0; rows * p];
    let mut latent = opts.retain_latent.then(|| LatentPaths {
        xi: Vec::with_capacity(rows * sys.xi.dim()),
        delta: Vec::with_capacity(rows * sys.delta.dim()),
        eps: Vec::with_capacity(rows * sys.eps.dim()),
        zeta: Vec::with_capacity(rows * sys.zeta.dim()),
    });
    for i in 0..rows {
        if i > 0 {
            xi.step(i)?;
            delta.step(i)?;
            eps.step(i)?;
            zeta.step(i)?;
        }
        sys.observe(&xi.state, &delta.state, &eps.state, &zeta.state, &mut data[i * p..(i + 1) * p]);
        if let Some(l) = latent.as_mut() {
            l.xi.extend_from_slice(&xi.state);
            l.delta.extend_from_slice(&delta.state);
            l.eps.extend_from_slice(&eps.state);
            l.zeta.extend_from_slice(&zeta.state);
        }
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(SimError::Model(format!("non-finite observation in row {}", pos / p)));
    }
    Ok(PathSample { grid: *grid, p, seed, replication: opts.replication, data, latent })
}

/// JSON description of a latent OU process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessConfig {
    /// Mean-reversion matrix `A` of the drift `−(A x − b)`.
    pub drift: Vec<Vec<f64>>,
    /// Offset `b`; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    pub diffusion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

/// JSON description of a [`DiffusionSystem`] with OU latent processes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(default)]
    pub name: String,
    pub xi: ProcessConfig,
    pub delta: ProcessConfig,
    pub eps: ProcessConfig,
    pub zeta: ProcessConfig,
    pub lx1: Vec<Vec<f64>>,
    pub lx2: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    /// Zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

pub(crate) fn dense(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, SimError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(SimError::Dimension(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ProcessConfig {
    fn build(&self, name: &str) -> Result<LatentProcess, SimError> {
        let a = dense(&self.drift, name)?;
        let d = a.nrows();
        let b = self.offset.clone().unwrap_or_else(|| vec![0.0; d]);
        let drift = ou_drift(a, b)?;
        let s = dense(&self.diffusion, name)?;
        let c = self.initial.clone().unwrap_or_else(|| vec![0.0; d]);
        LatentProcess::new(Arc::new(drift), s, c)
    }
}

impl SystemConfig {
    pub fn build(&self) -> Result<DiffusionSystem, SimError> {
        let xi = self.xi.build("xi")?;
        let zeta = self.zeta.build("zeta")?;
        let k2 = zeta.dim();
        let b = match &self.b {
            Some(rows) => dense(rows, "b")?,
            None => DMatrix::zeros(k2, k2),
        };
        DiffusionSystem::new(
            xi,
            self.delta.build("delta")?,
            self.eps.build("eps")?,
            zeta,
            dense(&self.lx1, "lx1")?,
            dense(&self.lx2, "lx2")?,
            dense(&self.gamma, "gamma")?,
            b,
        )
    }
}
