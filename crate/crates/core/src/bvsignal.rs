//! Grid signals of bounded variation, their derivative measures, and the
//! measure functionals evaluated on them.
//!
//! Values live at cell centres `a + (i + 1/2) dx`. The derivative lives on the
//! `N - 1` edges joining consecutive centres; edge `j` spans
//! `[x_j, x_{j+1}]` and is centred at the grid node `a + (j + 1) dx`. An edge
//! may carry an explicit atom; its absolutely continuous density is then
//! `(v_{j+1} - v_j - jump_j) / dx`. The two half cells next to `a` and `b`
//! carry zero density.

use serde::{Deserialize, Serialize};

use crate::anisotropy::Anisotropy;
use crate::error::{check_dim, Error, Result};
use crate::quadrature::bump;
use crate::regularizer::{Regularizer, Variant};

/// Uniform partition of `[a, b]` into `cells` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub a: f64,
    pub b: f64,
    pub cells: usize,
}

impl Grid {
    pub fn new(a: f64, b: f64, cells: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Config(format!("interval: need finite a < b, got [{a}, {b}]")));
        }
        if cells < 2 {
            return Err(Error::Config(format!("grid_cells: need at least 2 cells, got {cells}")));
        }
        Ok(Self { a, b, cells })
    }

    pub fn unit(cells: usize) -> Self {
        Self::new(0.0, 1.0, cells).expect("valid grid")
    }

    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.cells as f64
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    /// Grid node `a + i dx`, `i = 0..=N`.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.cells {
            self.b
        } else {
            self.a + i as f64 * self.dx()
        }
    }

    /// Centre of cell `i`.
    pub fn center(&self, i: usize) -> f64 {
        self.a + (i as f64 + 0.5) * self.dx()
    }

    pub fn edges(&self) -> usize {
        self.cells - 1
    }

    /// Location of the atom carried by edge `j`.
    pub fn edge_location(&self, j: usize) -> f64 {
        self.node(j + 1)
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Precondition(format!("grids differ: {self:?} vs {other:?}")))
        }
    }
}

/// A jump of size `jump` carried by edge `edge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub edge: usize,
    pub jump: Vec<f64>,
}

/// Vector-valued grid function with explicit atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSignal {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
    atoms: Vec<Atom>,
}

impl GridSignal {
    /// `values` is row-major, one row of `channels` entries per cell.
    pub fn new(grid: Grid, channels: usize, values: Vec<f64>, atoms: Vec<Atom>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channels: must be positive".into()));
        }
        check_dim(grid.cells * channels, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("signal values must be finite".into()));
        }
        for (k, atom) in atoms.iter().enumerate() {
            check_dim(channels, atom.jump.len())?;
            if atom.edge >= grid.edges() {
                return Err(Error::Domain(format!("atom on edge {} outside the grid", atom.edge)));
            }
            if k > 0 && atoms[k - 1].edge >= atom.edge {
                return Err(Error::Domain("atoms must be sorted by edge, one per edge".into()));
            }
            if atom.jump.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("atom jumps must be finite".into()));
            }
        }
        Ok(Self {
            grid,
            channels,
            values,
            atoms,
        })
    }

    pub fn constant(grid: Grid, value: &[f64]) -> Self {
        let values = (0..grid.cells).flat_map(|_| value.iter().copied()).collect();
        Self::new(grid, value.len(), values, Vec::new()).expect("finite constant")
    }

    /// Samples `f` at cell centres; no atoms.
    pub fn from_fn(grid: Grid, channels: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.cells * channels);
        for i in 0..grid.cells {
            let v = f(grid.center(i));
            check_dim(channels, v.len())?;
            values.extend(v);
        }
        Self::new(grid, channels, values, Vec::new())
    }

    /// Same grid and atoms, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, self.channels, values, self.atoms.clone())
    }

    /// Same values, atoms dropped: every jump becomes a steep edge.
    pub fn without_atoms(&self) -> Self {
        Self {
            grid: self.grid,
            channels: self.channels,
            values: self.values.clone(),
            atoms: Vec::new(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Channel `c` as a column.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.grid.cells).map(|i| self.values[i * self.channels + c]).collect()
    }

    /// `sum_i v_i dx` per channel.
    pub fn integral(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() * dx)
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dx()).sqrt()
    }

    pub fn l2_distance(&self, other: &GridSignal) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        check_dim(self.channels, other.channels)?;
        Ok((self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * self.grid.dx())
        .sqrt())
    }

    /// Mass of the explicit atoms carried inside `window` (overlap-weighted).
    pub fn atom_mass(&self, window: &MeasureWindow) -> f64 {
        derivative(self).atom_mass(window)
    }
}

/// `w_x = ac dL + atoms` on the edge partition of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeMeasure {
    grid: Grid,
    channels: usize,
    ac: Vec<f64>,
    atoms: Vec<Atom>,
}

impl DerivativeMeasure {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Density on edge `j`.
    pub fn ac(&self, j: usize) -> &[f64] {
        &self.ac[j * self.channels..(j + 1) * self.channels]
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// `(location, jump)` pairs.
    pub fn atom_locations(&self) -> Vec<(f64, Vec<f64>)> {
        self.atoms
            .iter()
            .map(|a| (self.grid.edge_location(a.edge), a.jump.clone()))
            .collect()
    }

    pub fn total_variation(&self) -> f64 {
        interval_variation(self, &MeasureWindow::full(&self.grid))
    }

    fn atom_mass(&self, window: &MeasureWindow) -> f64 {
        self.atoms
            .iter()
            .map(|a| overlap(&self.grid, a.edge, window) * norm(&a.jump))
            .sum()
    }

    // sum over edges of weight * g(density) dx + weight * g_inf(atom), plus
    // g(0) over the boundary half cells
    fn integrate(
        &self,
        window: &MeasureWindow,
        mut density: impl FnMut(&[f64]) -> f64,
        mut singular: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<f64> {
        let g = &self.grid;
        let dx = g.dx();
        let (first, last) = window.edge_range(g);
        let mut total = 0.0;
        let mut atoms = self.atoms.iter().peekable();
        while atoms.peek().is_some_and(|a| a.edge < first) {
            atoms.next();
        }
        for j in first..last {
            let w = overlap(g, j, window);
            if w == 0.0 {
                continue;
            }
            total += w * density(self.ac(j)) * dx;
            if let Some(a) = atoms.next_if(|a| a.edge == j) {
                total += w * singular(&a.jump)?;
            }
        }
        let strips = window.boundary_strip_length(g);
        if strips > 0.0 {
            let zero = vec![0.0; self.channels];
            total += density(&zero) * strips;
        }
        Ok(total)
    }
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fraction of edge `j` inside the window.
fn overlap(g: &Grid, j: usize, w: &MeasureWindow) -> f64 {
    let lo = g.center(j).max(w.lo);
    let hi = g.center(j + 1).min(w.hi);
    ((hi - lo) / g.dx()).clamp(0.0, 1.0)
}

/// A closed sub-interval `[lo, hi]` of the grid interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureWindow {
    pub lo: f64,
    pub hi: f64,
}

impl MeasureWindow {
    pub fn new(grid: &Grid, lo: f64, hi: f64) -> Result<Self> {
        if !(grid.a <= lo && lo < hi && hi <= grid.b) {
            return Err(Error::Config(format!(
                "window [{lo}, {hi}] is not a sub-interval of [{}, {}]",
                grid.a, grid.b
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(grid: &Grid) -> Self {
        Self {
            lo: grid.a,
            hi: grid.b,
        }
    }

    /// The `2^depth` dyadic windows of the grid interval.
    pub fn dyadic(grid: &Grid, depth: u32) -> Vec<Self> {
        let k = 1usize << depth;
        let len = grid.length() / k as f64;
        (0..k)
            .map(|i| Self {
                lo: grid.a + i as f64 * len,
                hi: if i + 1 == k { grid.b } else { grid.a + (i + 1) as f64 * len },
            })
            .collect()
    }

    fn edge_range(&self, g: &Grid) -> (usize, usize) {
        let dx = g.dx();
        let first = (((self.lo - g.a) / dx - 1.5).floor().max(0.0)) as usize;
        let last = ((((self.hi - g.a) / dx + 0.5).ceil().max(0.0)) as usize).min(g.edges());
        (first.min(g.edges()), last)
    }

    fn boundary_strip_length(&self, g: &Grid) -> f64 {
        let left = (g.center(0).min(self.hi) - self.lo.max(g.a)).max(0.0);
        let right = (self.hi.min(g.b) - g.center(g.cells - 1).max(self.lo)).max(0.0);
        left + right
    }
}

/// Threshold rule reclassifying steep edges as singular.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRule {
    pub kappa: f64,
    pub theta: f64,
}

impl Default for ClassificationRule {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            theta: 0.5,
        }
    }
}

/// Integrand of a Goffman-Serrin functional: a convex density with its
/// recession function.
pub trait MeasureIntegrand {
    fn density(&self, p: &[f64]) -> f64;
    fn recession(&self, p: &[f64]) -> Result<f64>;
}

impl MeasureIntegrand for Regularizer {
    fn density(&self, p: &[f64]) -> f64 {
        self.value(p)
    }

    fn recession(&self, p: &[f64]) -> Result<f64> {
        if self.variant() != Variant::Exact {
            return Err(Error::InfiniteRecession(
                "the eta quadratic term has no finite recession function".into(),
            ));
        }
        Ok(self.profile().f_inf() * self.anisotropy().value(p))
    }
}

impl MeasureIntegrand for Anisotropy {
    fn density(&self, p: &[f64]) -> f64 {
        self.value(p)
    }

    fn recession(&self, p: &[f64]) -> Result<f64> {
        Ok(self.value(p))
    }
}

/// `|p|`.
#[derive(Debug, Clone, Copy)]
pub struct EuclideanNorm;

impl MeasureIntegrand for EuclideanNorm {
    fn density(&self, p: &[f64]) -> f64 {
        norm(p)
    }

    fn recession(&self, p: &[f64]) -> Result<f64> {
        Ok(norm(p))
    }
}

/// `(|p| - k)_+`, whose recession function is `|p|`.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNorm(pub f64);

impl MeasureIntegrand for TruncatedNorm {
    fn density(&self, p: &[f64]) -> f64 {
        (norm(p) - self.0).max(0.0)
    }

    fn recession(&self, p: &[f64]) -> Result<f64> {
        Ok(norm(p))
    }
}

/// Derivative measure of `w`.
pub fn derivative(w: &GridSignal) -> DerivativeMeasure {
    let g = w.grid;
    let n = w.channels;
    let dx = g.dx();
    let mut ac = vec![0.0; g.edges() * n];
    let mut atoms = w.atoms.iter().peekable();
    for j in 0..g.edges() {
        let atom = atoms.next_if(|a| a.edge == j);
        for c in 0..n {
            let mut d = w.values[(j + 1) * n + c] - w.values[j * n + c];
            if let Some(a) = atom {
                d -= a.jump[c];
            }
            ac[j * n + c] = d / dx;
        }
    }
    DerivativeMeasure {
        grid: g,
        channels: n,
        ac,
        atoms: w.atoms.clone(),
    }
}

/// `G(mu)(window)`.
pub fn gs_functional<G: MeasureIntegrand + ?Sized>(
    g: &G,
    mu: &DerivativeMeasure,
    window: &MeasureWindow,
) -> Result<f64> {
    mu.integrate(window, |p| g.density(p), |p| g.recession(p))
}

/// `|mu|(window)`.
pub fn interval_variation(mu: &DerivativeMeasure, window: &MeasureWindow) -> f64 {
    mu.integrate(window, norm, |p| Ok(norm(p))).expect("finite recession")
}

/// `G_k(mu)(window)` with `G_k(p) = (|p| - k)_+`.
pub fn truncated_variation(mu: &DerivativeMeasure, k: f64, window: &MeasureWindow) -> f64 {
    gs_functional(&TruncatedNorm(k), mu, window).expect("finite recession")
}

/// Singular mass by the threshold classifier.
pub fn singular_mass(mu: &DerivativeMeasure, window: &MeasureWindow, rule: ClassificationRule) -> f64 {
    let dx = mu.grid.dx();
    let threshold = rule.kappa * dx.powf(rule.theta);
    mu.integrate(
        window,
        |p| {
            let m = norm(p) * dx;
            if m > threshold {
                norm(p)
            } else {
                0.0
            }
        },
        |p| Ok(norm(p)),
    )
    .expect("finite recession")
}

/// Singular mass by the truncated variation at `k = dx^(-1/2)`.
pub fn ksweep_singular_mass(mu: &DerivativeMeasure, window: &MeasureWindow) -> f64 {
    truncated_variation(mu, mu.grid.dx().powf(-0.5), window)
}

/// Convolution with the sampled bump of radius `eps`, zero extension outside
/// the interval. Returns `w` unchanged (with a warning) when `eps < 2 dx`.
pub fn mollify(w: &GridSignal, eps: f64) -> GridSignal {
    let g = w.grid;
    let dx = g.dx();
    if !(eps >= 2.0 * dx) {
        log::warn!("mollify: eps = {eps} below 2 dx = {}; signal returned unchanged", 2.0 * dx);
        return w.clone();
    }
    let r = ((eps / dx).ceil() as usize).max(1);
    let mut kernel: Vec<f64> = (0..=2 * r)
        .map(|k| bump((k as f64 - r as f64) * dx / eps))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let n = w.channels;
    let mut out = vec![0.0; w.values.len()];
    for i in 0..g.cells {
        for (k, wk) in kernel.iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            let src = i as isize + k as isize - r as isize;
            if src < 0 || src >= g.cells as isize {
                continue;
            }
            let s = src as usize;
            for c in 0..n {
                out[i * n + c] += wk * w.values[s * n + c];
            }
        }
    }
    GridSignal {
        grid: g,
        channels: n,
        values: out,
        atoms: Vec::new(),
    }
}

/// Both sides of the Jensen inequality for a Goffman-Serrin functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `G(∫b dmu / ∫b dL) <= ∫b dG(mu) / ∫b dL`, `b` given per edge.
pub fn jensen_check<G: MeasureIntegrand + ?Sized>(
    g: &G,
    mu: &DerivativeMeasure,
    weight: &[f64],
    window: &MeasureWindow,
) -> Result<JensenOutcome> {
    let grid = &mu.grid;
    check_dim(grid.edges(), weight.len())?;
    if weight.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::Domain("Jensen weight must be non-negative".into()));
    }
    let dx = grid.dx();
    let n = mu.channels;
    let (first, last) = window.edge_range(grid);
    let mut mass = 0.0;
    let mut mean = vec![0.0; n];
    let mut gsum = 0.0;
    let mut atoms = mu.atoms.iter().peekable();
    while atoms.peek().is_some_and(|a| a.edge < first) {
        atoms.next();
    }
    for j in first..last {
        let w = overlap(grid, j, window) * weight[j];
        let atom = atoms.next_if(|a| a.edge == j);
        if w == 0.0 {
            continue;
        }
        mass += w * dx;
        let p = mu.ac(j);
        for c in 0..n {
            mean[c] += w * p[c] * dx;
        }
        gsum += w * g.density(p) * dx;
        if let Some(a) = atom {
            for c in 0..n {
                mean[c] += w * a.jump[c];
            }
            gsum += w * g.recession(&a.jump)?;
        }
    }
    if !(mass > 0.0) {
        return Err(Error::Precondition("Jensen weight has zero mass on the window".into()));
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let lhs = g.density(&mean);
    let rhs = gsum / mass;
    Ok(JensenOutcome {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10 * (1.0 + rhs.abs()),
    })
}
