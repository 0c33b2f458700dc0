//! Experiment configuration and datum generation.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anisotropy::{Anisotropy, AnisotropySpec};
use crate::bvsignal::{Atom, Grid, GridSignal, MeasureWindow};
use crate::error::{check_dim, Error, Result};
use crate::regularizer::{Profile, ProfileSpec, RegularizerSpec, Variant};
use crate::rng::SeedStream;
use crate::solver::{NewtonConfig, PdConfig, SolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

/// One piece of a piecewise-constant datum: `value` from `x_break` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub x_break: f64,
    pub value: Vec<f64>,
}

/// How the datum `h` is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumDescriptor {
    /// `base` left of the first break (zero if omitted), then each piece's
    /// value from its break on. Breaks become explicit atoms.
    PiecewiseConstant {
        #[serde(default)]
        base: Option<Vec<f64>>,
        pieces: Vec<Piece>,
    },
    /// `breaks` uniform break points, piece values uniform in
    /// `[-amplitude, amplitude]` per channel.
    RandomPiecewiseConstant { breaks: usize, amplitude: f64 },
    /// `amplitude * sum_k (a_k cos(2 pi k s) + b_k sin(2 pi k s)) / k` with
    /// `s = (x - a) / |I|` and `a_k, b_k` uniform in `[-1, 1]`.
    SmoothFourier {
        modes: usize,
        amplitude: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Sum of a piecewise-constant and a smooth part; only the former
    /// carries atoms.
    Mixed {
        piecewise: Box<DatumDescriptor>,
        smooth: Box<DatumDescriptor>,
    },
    /// A signal CSV (`x, u_1..u_n`) and an optional atoms JSON.
    File {
        signal: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        atoms: Option<PathBuf>,
    },
}

impl DatumDescriptor {
    fn rebase(&mut self, dir: &std::path::Path) {
        match self {
            DatumDescriptor::File { signal, atoms } => {
                if signal.is_relative() {
                    *signal = dir.join(&*signal);
                }
                if let Some(a) = atoms.as_mut().filter(|a| a.is_relative()) {
                    *a = dir.join(&*a);
                }
            }
            DatumDescriptor::Mixed { piecewise, smooth } => {
                piecewise.rebase(dir);
                smooth.rebase(dir);
            }
            _ => {}
        }
    }

    pub fn validate(&self, interval: &Interval, channels: usize) -> Result<()> {
        match self {
            DatumDescriptor::PiecewiseConstant { base, pieces } => {
                if let Some(b) = base {
                    check_dim(channels, b.len()).map_err(|e| Error::Config(format!("datum.base: {e}")))?;
                }
                for (k, p) in pieces.iter().enumerate() {
                    if !(p.x_break > interval.a && p.x_break < interval.b) {
                        return Err(Error::Config(format!(
                            "datum.pieces[{k}].x_break: {} lies outside ({}, {})",
                            p.x_break, interval.a, interval.b
                        )));
                    }
                    if k > 0 && pieces[k - 1].x_break >= p.x_break {
                        return Err(Error::Config("datum.pieces: breaks must be strictly increasing".into()));
                    }
                    check_dim(channels, p.value.len())
                        .map_err(|e| Error::Config(format!("datum.pieces[{k}].value: {e}")))?;
                    if p.value.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Config(format!("datum.pieces[{k}].value: must be finite")));
                    }
                }
                Ok(())
            }
            DatumDescriptor::RandomPiecewiseConstant { amplitude, .. }
            | DatumDescriptor::SmoothFourier { amplitude, .. } => {
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::Config(format!("datum.amplitude: must be finite and >= 0, got {amplitude}")));
                }
                Ok(())
            }
            DatumDescriptor::Mixed { piecewise, smooth } => {
                if !matches!(
                    **piecewise,
                    DatumDescriptor::PiecewiseConstant { .. } | DatumDescriptor::RandomPiecewiseConstant { .. }
                ) {
                    return Err(Error::Config("datum.piecewise: must be a piecewise-constant kind".into()));
                }
                if !matches!(**smooth, DatumDescriptor::SmoothFourier { .. }) {
                    return Err(Error::Config("datum.smooth: must be smooth_fourier".into()));
                }
                piecewise.validate(interval, channels)?;
                smooth.validate(interval, channels)
            }
            DatumDescriptor::File { .. } => Ok(()),
        }
    }
}

/// Samples the datum on `grid`. Deterministic in `seed`.
pub fn generate_datum(d: &DatumDescriptor, grid: &Grid, channels: usize, seed: SeedStream) -> Result<GridSignal> {
    let interval = Interval { a: grid.a, b: grid.b };
    d.validate(&interval, channels)?;
    match d {
        DatumDescriptor::PiecewiseConstant { base, pieces } => {
            let base = base.clone().unwrap_or_else(|| vec![0.0; channels]);
            let breaks: Vec<(f64, Vec<f64>)> = pieces.iter().map(|p| (p.x_break, p.value.clone())).collect();
            piecewise_signal(grid, channels, &base, &breaks)
        }
        DatumDescriptor::RandomPiecewiseConstant { breaks, amplitude } => {
            let mut rng = seed.named("piecewise").rng();
            let mut xs: Vec<f64> = (0..*breaks).map(|_| rng.random_range(grid.a..grid.b)).collect();
            xs.sort_by(f64::total_cmp);
            let mut draw = || -> Vec<f64> { (0..channels).map(|_| amplitude * rng.random_range(-1.0..=1.0)).collect() };
            let base = draw();
            let pieces: Vec<(f64, Vec<f64>)> = xs.into_iter().map(|x| (x, draw())).collect();
            piecewise_signal(grid, channels, &base, &pieces)
        }
        DatumDescriptor::SmoothFourier {
            modes,
            amplitude,
            seed: own,
        } => {
            let stream = own.map(SeedStream::new).unwrap_or_else(|| seed.named("fourier"));
            let mut rng = stream.rng();
            let coeffs: Vec<Vec<(f64, f64)>> = (0..channels)
                .map(|_| {
                    (0..*modes)
                        .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
                        .collect()
                })
                .collect();
            let (a, len, amp) = (grid.a, grid.length(), *amplitude);
            GridSignal::from_fn(*grid, channels, |x| {
                let s = 2.0 * PI * (x - a) / len;
                coeffs
                    .iter()
                    .map(|ck| {
                        amp * ck
                            .iter()
                            .enumerate()
                            .map(|(k, (ca, cb))| {
                                let m = (k + 1) as f64;
                                (ca * (m * s).cos() + cb * (m * s).sin()) / m
                            })
                            .sum::<f64>()
                    })
                    .collect()
            })
        }
        DatumDescriptor::Mixed { piecewise, smooth } => {
            let pc = generate_datum(piecewise, grid, channels, seed.named("mixed/piecewise"))?;
            let sm = generate_datum(smooth, grid, channels, seed.named("mixed/smooth"))?;
            let values = pc.values().iter().zip(sm.values()).map(|(p, s)| p + s).collect();
            GridSignal::new(*grid, channels, values, pc.atoms().to_vec())
        }
        DatumDescriptor::File { signal, atoms } => {
            let w = crate::io::read_signal(signal, atoms.as_deref())?;
            check_dim(channels, w.channels())?;
            if w.grid().cells != grid.cells
                || (w.grid().a - grid.a).abs() > 1e-9 * grid.length()
                || (w.grid().b - grid.b).abs() > 1e-9 * grid.length()
            {
                return Err(Error::Config(format!(
                    "datum.signal: file grid {:?} does not match the configured grid {:?}",
                    w.grid(),
                    grid
                )));
            }
            Ok(w)
        }
    }
}

// cell values from the last break at or left of the centre; every change
// between neighbouring cells is an atom on the edge between them
fn piecewise_signal(grid: &Grid, channels: usize, base: &[f64], pieces: &[(f64, Vec<f64>)]) -> Result<GridSignal> {
    let mut values = Vec::with_capacity(grid.cells * channels);
    let mut k = 0;
    let mut current = base;
    for i in 0..grid.cells {
        let x = grid.center(i);
        while k < pieces.len() && pieces[k].0 <= x {
            current = &pieces[k].1;
            k += 1;
        }
        values.extend_from_slice(current);
    }
    let mut atoms = Vec::new();
    for j in 0..grid.edges() {
        let jump: Vec<f64> = (0..channels)
            .map(|c| values[(j + 1) * channels + c] - values[j * channels + c])
            .collect();
        if jump.iter().any(|v| *v != 0.0) {
            atoms.push(Atom { edge: j, jump });
        }
    }
    GridSignal::new(*grid, channels, values, atoms)
}

/// Which windows the reports use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowsDescriptor {
    /// The `2^depth` dyadic sub-intervals.
    Dyadic { depth: u32 },
    Explicit { windows: Vec<[f64; 2]> },
}

impl Default for WindowsDescriptor {
    fn default() -> Self {
        WindowsDescriptor::Dyadic { depth: 4 }
    }
}

impl WindowsDescriptor {
    pub fn build(&self, grid: &Grid) -> Result<Vec<MeasureWindow>> {
        match self {
            WindowsDescriptor::Dyadic { depth } => {
                if *depth > 20 {
                    return Err(Error::Config(format!("windows.depth: {depth} is too deep")));
                }
                Ok(MeasureWindow::dyadic(grid, *depth))
            }
            WindowsDescriptor::Explicit { windows } => windows
                .iter()
                .map(|[lo, hi]| MeasureWindow::new(grid, *lo, *hi))
                .collect(),
        }
    }
}

/// Which solver produces the reported minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Primal-dual when the anisotropy has a dual projection, else
    /// continuation.
    #[default]
    Auto,
    Pd,
    Continuation,
    TautString,
}

/// Solver settings; unset fields take the library defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOverrides {
    pub method: Method,
    /// Also run the continuation solver and archive its output.
    pub cross_check: Option<bool>,
    pub eta_schedule: Option<Vec<f64>>,
    pub eps_cells: Option<Vec<f64>>,
    pub variant: Option<Variant>,
    pub newton: Option<NewtonConfig>,
    pub pd: Option<PdConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSettings {
    pub steps: usize,
    pub tau: f64,
    pub record_every: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            steps: 32,
            tau: 1.0 / 32.0,
            record_every: 1,
        }
    }
}

/// Theorem checked by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremChoice {
    /// Homogeneous if `f` is the identity, regular if the regular-case
    /// hypotheses hold, otherwise the constant version.
    #[default]
    Auto,
    Homogeneous,
    SingularConstant,
    SingularRegular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub theorem: TheoremChoice,
    /// Number of seeded data in the battery.
    pub instances: usize,
    /// Grid sizes of the refinement study, increasing; empty means just
    /// `grid_cells`.
    pub refinement: Vec<usize>,
    /// Classifier exponents reported next to the k-sweep.
    pub thetas: Vec<f64>,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            theorem: TheoremChoice::Auto,
            instances: 1,
            refinement: Vec::new(),
            thetas: vec![0.4, 0.5, 0.6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambdas: vec![0.01, 0.05, 0.2],
            seeds: vec![0],
        }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub interval: Interval,
    pub grid_cells: usize,
    pub channels: usize,
    pub lambda: f64,
    pub anisotropy: AnisotropySpec,
    pub profile: ProfileSpec,
    pub datum: DatumDescriptor,
    #[serde(default)]
    pub solver: SolverOverrides,
    #[serde(default)]
    pub windows: WindowsDescriptor,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub sweep: SweepSettings,
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the path of the offending field.
    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative `file` datum paths are taken from the
    /// config's directory.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&s)?;
        if let Some(dir) = path.parent() {
            cfg.datum.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.interval.a, self.interval.b, self.grid_cells)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.channels == 0 {
            return Err(Error::Config("channels: must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda: must be positive, got {}", self.lambda)));
        }
        let spec = self
            .anisotropy
            .with_dim(self.channels)
            .map_err(|e| Error::Config(format!("anisotropy: {e}")))?;
        Anisotropy::new(&spec).map_err(|e| Error::Config(format!("anisotropy: {e}")))?;
        Profile::new(&self.profile).map_err(|e| Error::Config(format!("profile: {e}")))?;
        self.datum.validate(&self.interval, self.channels)?;
        self.windows.build(&grid)?;
        self.solve_config().validate()?;
        if !(self.flow.tau > 0.0 && self.flow.tau.is_finite()) || self.flow.steps == 0 || self.flow.record_every == 0 {
            return Err(Error::Config("flow: need steps >= 1, tau > 0, record_every >= 1".into()));
        }
        if self.verify.refinement.windows(2).any(|w| w[1] <= w[0]) || self.verify.refinement.iter().any(|n| *n < 2) {
            return Err(Error::Config("verify.refinement: grid sizes must increase".into()));
        }
        if self.verify.instances == 0 {
            return Err(Error::Config("verify.instances: must be positive".into()));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("sweep.lambdas: must be positive".into()));
        }
        Ok(())
    }

    pub fn regularizer_spec(&self) -> RegularizerSpec {
        RegularizerSpec {
            profile: self.profile.clone(),
            anisotropy: self.anisotropy.with_dim(self.channels).unwrap_or_else(|_| self.anisotropy.clone()),
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        let mut cfg = SolveConfig::new(self.lambda, self.regularizer_spec());
        let o = &self.solver;
        if let Some(v) = &o.eta_schedule {
            cfg.eta_schedule = v.clone();
        }
        if let Some(v) = &o.eps_cells {
            cfg.eps_cells = v.clone();
        }
        if let Some(v) = o.variant {
            cfg.variant = v;
        }
        if let Some(v) = o.newton {
            cfg.newton = v;
        }
        if let Some(v) = o.pd {
            cfg.pd = v;
        }
        cfg
    }

    /// The method `auto` resolves to.
    pub fn method(&self) -> Method {
        match self.solver.method {
            Method::Auto => {
                let pd_ok = self
                    .anisotropy
                    .with_dim(self.channels)
                    .and_then(|s| Anisotropy::new(&s))
                    .map(|a| a.has_dual_projection())
                    .unwrap_or(false);
                if pd_ok {
                    Method::Pd
                } else {
                    Method::Continuation
                }
            }
            m => m,
        }
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let sc = self.solve_config();
        out.anisotropy = sc.regularizer.anisotropy.clone();
        out.solver = SolverOverrides {
            method: self.method(),
            cross_check: Some(self.solver.cross_check.unwrap_or(false)),
            eta_schedule: Some(sc.eta_schedule),
            eps_cells: Some(sc.eps_cells),
            variant: Some(sc.variant),
            newton: Some(sc.newton),
            pd: Some(sc.pd),
        };
        out
    }
}
