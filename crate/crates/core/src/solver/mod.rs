//! Minimizers of the discrete energy
//!
//! ```text
//! E(u) = lambda * sum_j F((u_{j+1} - u_j) / dx) dx + 1/2 * sum_i |u_i - h_i|^2 dx
//! ```
//!
//! (plus the constant `lambda F(0)` times the two boundary half cells).
//! Three solvers are provided: Newton continuation on the smoothed
//! Euler-Lagrange system, a dual proximal-gradient solver for the exact
//! problem, and the taut string for scalar total variation.

mod newton;
mod pd;
mod taut;

use serde::{Deserialize, Serialize};

use crate::bvsignal::{derivative, gs_functional, GridSignal, MeasureWindow};
use crate::error::{check_dim, Result};
use crate::regularizer::{Regularizer, RegularizerSpec, Variant};

pub use newton::{
    continuation_solve, solve_smoothed, ContinuationResult, SmoothedSolution, SolveDiagnostics, StageDiagnostics, StageStatus,
    UniformBound,
};
pub use pd::{solve_exact_discrete, PdSolution};
pub use taut::taut_string_oracle;

/// Newton settings for one smoothed stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub tol_residual: f64,
    pub max_iter: usize,
    pub backtrack: f64,
    pub min_step: f64,
    /// A stage that stalls with a residual above this level is an error;
    /// below it the stage is accepted and flagged.
    pub stall_tolerance: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol_residual: 1e-10,
            max_iter: 50,
            backtrack: 0.5,
            min_step: 1e-12,
            stall_tolerance: 1e-6,
        }
    }
}

/// Settings for the exact primal-dual solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdConfig {
    pub max_iter: usize,
    pub tol_gap: f64,
    /// Iterations between duality-gap evaluations.
    pub check_every: usize,
}

impl Default for PdConfig {
    fn default() -> Self {
        Self {
            max_iter: 200_000,
            tol_gap: 1e-8,
            check_every: 20,
        }
    }
}

/// `start, start ratio, ...` while above `floor`, then `floor` itself.
pub fn geometric_schedule(start: f64, ratio: f64, floor: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = start;
    while e > floor * (1.0 + 1e-12) {
        out.push(e);
        e *= ratio;
    }
    out.push(floor);
    out
}

/// Everything a solve needs besides the datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub lambda: f64,
    pub regularizer: RegularizerSpec,
    /// Strictly decreasing smoothing parameters.
    #[serde(default = "default_eta_schedule")]
    pub eta_schedule: Vec<f64>,
    /// Mollification radii in units of `dx`, strictly decreasing; `0` means
    /// the raw datum.
    #[serde(default = "default_eps_cells")]
    pub eps_cells: Vec<f64>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub pd: PdConfig,
}

pub fn default_eta_schedule() -> Vec<f64> {
    geometric_schedule(1e-1, 0.25, 1e-6)
}

pub fn default_eps_cells() -> Vec<f64> {
    vec![8.0, 4.0, 2.0, 0.0]
}

fn default_variant() -> Variant {
    Variant::Eta1
}

impl SolveConfig {
    pub fn new(lambda: f64, regularizer: RegularizerSpec) -> Self {
        Self {
            lambda,
            regularizer,
            eta_schedule: default_eta_schedule(),
            eps_cells: default_eps_cells(),
            variant: Variant::Eta1,
            newton: NewtonConfig::default(),
            pd: PdConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda: must be positive, got {}", self.lambda)));
        }
        let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
        if self.eta_schedule.is_empty()
            || !decreasing(&self.eta_schedule)
            || self.eta_schedule.iter().any(|e| !(*e > 0.0))
        {
            return Err(Error::Config("solver.eta_schedule: need strictly decreasing positive values".into()));
        }
        if self.eps_cells.is_empty() || !decreasing(&self.eps_cells) || self.eps_cells.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config("solver.eps_cells: need strictly decreasing non-negative values".into()));
        }
        if self.variant == Variant::Exact {
            return Err(Error::Config("solver.variant: continuation needs eta1 or eta2".into()));
        }
        Ok(())
    }

    /// Exact regularizer for signals with `channels` components.
    pub fn build_regularizer(&self, channels: usize) -> Result<Regularizer> {
        let spec = RegularizerSpec {
            profile: self.regularizer.profile.clone(),
            anisotropy: self.regularizer.anisotropy.with_dim(channels)?,
        };
        Regularizer::from_spec(&spec)
    }
}

/// `lambda G_R(Dw)(I) + 1/2 |w - h|^2`.
pub fn energy(w: &GridSignal, h: &GridSignal, r: &Regularizer, lambda: f64) -> Result<f64> {
    check_dim(r.dim(), w.channels())?;
    let tv = gs_functional(r, &derivative(w), &MeasureWindow::full(w.grid()))?;
    let d = w.l2_distance(h)?;
    Ok(lambda * tv + 0.5 * d * d)
}

/// Discrete smoothed energy without the boundary constants; `values` is
/// row-major.
pub(crate) fn discrete_energy(values: &[f64], h: &[f64], n: usize, dx: f64, r: &Regularizer, lambda: f64) -> f64 {
    let cells = values.len() / n;
    let mut q = vec![0.0; n];
    let mut reg = 0.0;
    for j in 0..cells - 1 {
        for c in 0..n {
            q[c] = (values[(j + 1) * n + c] - values[j * n + c]) / dx;
        }
        reg += r.value(&q);
    }
    let fid: f64 = values.iter().zip(h).map(|(u, h)| (u - h) * (u - h)).sum();
    lambda * reg * dx + 0.5 * fid * dx
}
