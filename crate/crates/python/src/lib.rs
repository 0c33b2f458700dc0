//! Python bindings: `import vrof`.
//!
//! Structured results (diagnostics, reports, battery summaries) cross the
//! boundary as plain dicts decoded from the same JSON the CLI writes.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use vrof_core::anisotropy::{reshetnyak_probe, AnisotropySpec};
use vrof_core::bvsignal::{derivative, interval_variation, truncated_variation, Atom};
use vrof_core::config::{generate_datum, DatumDescriptor, ExperimentConfig};
use vrof_core::flow::{flow_monotonicity_report, minimizing_movements, FlowConfig, FlowSolver};
use vrof_core::regularizer::{ProfileSpec, RegularizerSpec};
use vrof_core::rng::SeedStream;
use vrof_core::solver::{self, PdConfig, SolveConfig};
use vrof_core::verify::{run_battery as core_run_battery, BatterySpec, SlackPolicy};
use vrof_core::{Grid, GridSignal, MeasureWindow};

create_exception!(vrof, VrofError, PyException);

fn err(e: vrof_core::Error) -> PyErr {
    VrofError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| VrofError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let s: String = if let Ok(s) = obj.extract::<String>() {
        s
    } else {
        py.import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&s).map_err(|e| VrofError::new_err(format!("{what}: {e}")))
}

/// Convex, positively 1-homogeneous gauge on R^n.
#[pyclass(name = "Anisotropy", module = "vrof", frozen)]
struct PyAnisotropy {
    inner: vrof_core::Anisotropy,
}

#[pymethods]
impl PyAnisotropy {
    /// From a spec dict or JSON string, e.g. `{"kind": "weighted_l2", "weights": [4, 1]}`.
    #[new]
    #[pyo3(signature = (spec, dim = None))]
    fn new(py: Python<'_>, spec: &Bound<'_, PyAny>, dim: Option<usize>) -> PyResult<Self> {
        let mut s: AnisotropySpec = from_py(py, spec, "anisotropy")?;
        if let Some(n) = dim {
            s = s.with_dim(n).map_err(err)?;
        }
        Ok(Self {
            inner: vrof_core::Anisotropy::new(&s).map_err(err)?,
        })
    }

    #[staticmethod]
    fn euclidean(dim: usize) -> Self {
        Self {
            inner: vrof_core::Anisotropy::euclidean(dim),
        }
    }

    #[staticmethod]
    fn l1(dim: usize) -> Self {
        Self {
            inner: vrof_core::Anisotropy::l1(dim),
        }
    }

    #[staticmethod]
    fn linf(dim: usize) -> Self {
        Self {
            inner: vrof_core::Anisotropy::linf(dim),
        }
    }

    #[staticmethod]
    fn weighted_l2(weights: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: vrof_core::Anisotropy::weighted_l2(weights).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.spec())
    }

    fn __call__(&self, p: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&p).map_err(err)
    }

    fn dual(&self, q: Vec<f64>) -> PyResult<f64> {
        self.inner.dual_eval(&q).map_err(err)
    }

    #[pyo3(signature = (q, radius = 1.0))]
    fn project_dual_ball(&self, q: Vec<f64>, radius: f64) -> PyResult<Vec<f64>> {
        let mut out = vec![0.0; q.len()];
        self.inner.project_dual_ball(&q, radius, &mut out).map_err(err)?;
        Ok(out)
    }

    /// `(c_minus, c_plus)` with `c_minus |p| <= phi(p) <= c_plus |p|`.
    fn equivalence_constants(&self) -> (f64, f64) {
        let c = self.inner.equivalence_constants();
        (c.c_minus, c.c_plus)
    }

    /// The smooth, uniformly convex approximation at scale `eta`.
    fn regularize(&self, py: Python<'_>, eta: f64) -> PyResult<Self> {
        let phi = &self.inner;
        let inner = py.detach(|| phi.regularize(eta)).map_err(err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (trials = 20000, seed = 0))]
    fn reshetnyak_probe<'py>(&self, py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &reshetnyak_probe(&self.inner, trials, seed))
    }

    fn __repr__(&self) -> String {
        format!("Anisotropy({})", serde_json::to_string(self.inner.spec()).unwrap_or_default())
    }
}

/// `F(p) = f(phi(p))`.
#[pyclass(name = "Regularizer", module = "vrof", frozen)]
struct PyRegularizer {
    spec: RegularizerSpec,
    inner: vrof_core::Regularizer,
}

#[pymethods]
impl PyRegularizer {
    /// `profile` is a spec such as `{"kind": "sqrt1p"}` or just `"sqrt1p"`.
    #[new]
    #[pyo3(signature = (anisotropy, profile = None))]
    fn new(py: Python<'_>, anisotropy: &PyAnisotropy, profile: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let profile: ProfileSpec = match profile {
            None => ProfileSpec::Identity,
            Some(p) => match p.extract::<String>() {
                Ok(s) if !s.trim_start().starts_with('{') => {
                    serde_json::from_value(serde_json::json!({ "kind": s })).map_err(|e| VrofError::new_err(format!("profile: {e}")))?
                }
                _ => from_py(py, p, "profile")?,
            },
        };
        let spec = RegularizerSpec {
            profile,
            anisotropy: anisotropy.inner.spec().clone(),
        };
        let inner = vrof_core::Regularizer::from_spec(&spec).map_err(err)?;
        Ok(Self { spec, inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn homogeneous(&self) -> bool {
        self.inner.is_homogeneous()
    }

    fn __call__(&self, p: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&p).map_err(err)
    }

    fn grad(&self, p: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.grad(&p).map_err(err)
    }

    /// `F_inf(p)`, the recession function.
    fn recession(&self, p: Vec<f64>) -> f64 {
        self.inner.recession().eval(&p)
    }

    /// `None` when the regular-case hypotheses hold, else the first failure.
    fn regular_case(&self) -> Option<String> {
        self.inner.regular_case().err()
    }

    fn __repr__(&self) -> String {
        format!("Regularizer({})", serde_json::to_string(&self.spec).unwrap_or_default())
    }
}

/// Cell-average samples on a uniform grid plus explicit jump atoms.
#[pyclass(name = "GridSignal", module = "vrof", frozen)]
struct PySignal {
    inner: GridSignal,
}

#[pymethods]
impl PySignal {
    /// `values` holds one row per cell; `atoms` is a list of `(edge, jump)`.
    #[new]
    #[pyo3(signature = (values, a = 0.0, b = 1.0, atoms = None))]
    fn new(values: Vec<Vec<f64>>, a: f64, b: f64, atoms: Option<Vec<(usize, Vec<f64>)>>) -> PyResult<Self> {
        let channels = values.first().map_or(0, Vec::len);
        let grid = Grid::new(a, b, values.len()).map_err(err)?;
        let atoms = atoms
            .unwrap_or_default()
            .into_iter()
            .map(|(edge, jump)| Atom { edge, jump })
            .collect();
        let flat = values.into_iter().flatten().collect();
        Ok(Self {
            inner: GridSignal::new(grid, channels, flat, atoms).map_err(err)?,
        })
    }

    /// Seeded datum from a descriptor dict.
    #[staticmethod]
    #[pyo3(signature = (descriptor, cells, channels = 1, seed = 0, a = 0.0, b = 1.0))]
    fn generate(py: Python<'_>, descriptor: &Bound<'_, PyAny>, cells: usize, channels: usize, seed: u64, a: f64, b: f64) -> PyResult<Self> {
        let d: DatumDescriptor = from_py(py, descriptor, "datum")?;
        let grid = Grid::new(a, b, cells).map_err(err)?;
        Ok(Self {
            inner: generate_datum(&d, &grid, channels, SeedStream::new(seed)).map_err(err)?,
        })
    }

    #[getter]
    fn cells(&self) -> usize {
        self.inner.grid().cells
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn interval(&self) -> (f64, f64) {
        (self.inner.grid().a, self.inner.grid().b)
    }

    fn centers(&self) -> Vec<f64> {
        let g = self.inner.grid();
        (0..g.cells).map(|i| g.center(i)).collect()
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values().chunks(self.inner.channels()).map(<[f64]>::to_vec).collect()
    }

    fn atoms(&self) -> Vec<(usize, Vec<f64>)> {
        self.inner.atoms().iter().map(|a| (a.edge, a.jump.clone())).collect()
    }

    fn l2_norm(&self) -> f64 {
        self.inner.l2_norm()
    }

    fn l2_distance(&self, other: &PySignal) -> PyResult<f64> {
        self.inner.l2_distance(&other.inner).map_err(err)
    }

    /// `|Dw|([lo, hi])`; the whole interval by default.
    #[pyo3(signature = (lo = None, hi = None))]
    fn variation(&self, lo: Option<f64>, hi: Option<f64>) -> PyResult<f64> {
        let w = self.window(lo, hi)?;
        Ok(interval_variation(&derivative(&self.inner), &w))
    }

    /// Variation with the density truncated at level `k`.
    #[pyo3(signature = (k, lo = None, hi = None))]
    fn truncated_variation(&self, k: f64, lo: Option<f64>, hi: Option<f64>) -> PyResult<f64> {
        let w = self.window(lo, hi)?;
        Ok(truncated_variation(&derivative(&self.inner), k, &w))
    }

    #[pyo3(signature = (lo = None, hi = None))]
    fn atom_mass(&self, lo: Option<f64>, hi: Option<f64>) -> PyResult<f64> {
        let w = self.window(lo, hi)?;
        Ok(self.inner.atom_mass(&w))
    }

    fn __len__(&self) -> usize {
        self.inner.grid().cells
    }

    fn __repr__(&self) -> String {
        let g = self.inner.grid();
        format!(
            "GridSignal(cells={}, channels={}, interval=({}, {}), atoms={})",
            g.cells,
            self.inner.channels(),
            g.a,
            g.b,
            self.inner.atoms().len()
        )
    }
}

impl PySignal {
    fn window(&self, lo: Option<f64>, hi: Option<f64>) -> PyResult<MeasureWindow> {
        let g = self.inner.grid();
        MeasureWindow::new(g, lo.unwrap_or(g.a), hi.unwrap_or(g.b)).map_err(err)
    }
}

fn wrap(u: GridSignal) -> PySignal {
    PySignal { inner: u }
}

/// Scalar TV denoising by the taut string; exact up to rounding.
#[pyfunction]
fn taut_string(py: Python<'_>, h: &PySignal, lam: f64) -> PyResult<PySignal> {
    let h = &h.inner;
    py.detach(|| solver::taut_string_oracle(h, lam)).map(wrap).map_err(err)
}

/// Primal-dual solve of the exact discrete problem. Returns `(u, info)`.
#[pyfunction]
#[pyo3(signature = (h, reg, lam, tol_gap = None, max_iter = None))]
fn solve_pd<'py>(
    py: Python<'py>,
    h: &PySignal,
    reg: &PyRegularizer,
    lam: f64,
    tol_gap: Option<f64>,
    max_iter: Option<usize>,
) -> PyResult<(PySignal, Bound<'py, PyDict>)> {
    let mut cfg = PdConfig::default();
    if let Some(t) = tol_gap {
        cfg.tol_gap = t;
    }
    if let Some(m) = max_iter {
        cfg.max_iter = m;
    }
    let (h, r) = (&h.inner, &reg.inner);
    let s = py.detach(|| solver::solve_exact_discrete(h, r, lam, &cfg)).map_err(err)?;
    let info = PyDict::new(py);
    info.set_item("energy", s.energy)?;
    info.set_item("gap", s.gap)?;
    info.set_item("iterations", s.iterations)?;
    info.set_item("converged", s.converged)?;
    Ok((wrap(s.u), info))
}

/// Newton continuation over the smoothing schedule. `overrides` may set
/// `eta_schedule`, `eps_cells`, `variant`, `newton`. Returns `(u, diagnostics)`.
#[pyfunction]
#[pyo3(signature = (h, reg, lam, overrides = None))]
fn continuation_solve<'py>(
    py: Python<'py>,
    h: &PySignal,
    reg: &PyRegularizer,
    lam: f64,
    overrides: Option<&Bound<'py, PyAny>>,
) -> PyResult<(PySignal, Bound<'py, PyAny>)> {
    let mut v = serde_json::to_value(SolveConfig::new(lam, reg.spec.clone())).map_err(|e| VrofError::new_err(e.to_string()))?;
    if let Some(o) = overrides {
        let o: serde_json::Map<String, serde_json::Value> = from_py(py, o, "overrides")?;
        for (k, x) in o {
            v[k] = x;
        }
    }
    let cfg: SolveConfig = serde_json::from_value(v).map_err(|e| VrofError::new_err(format!("overrides: {e}")))?;
    let h = &h.inner;
    let res = py.detach(|| solver::continuation_solve(h, &cfg)).map_err(err)?;
    Ok((wrap(res.u), to_py(py, &res.diagnostics)?))
}

/// `lam F(Du) + 1/2 |u - h|^2`.
#[pyfunction]
fn energy(u: &PySignal, h: &PySignal, reg: &PyRegularizer, lam: f64) -> PyResult<f64> {
    solver::energy(&u.inner, &h.inner, &reg.inner, lam).map_err(err)
}

/// Minimizing movements from `v0`; returns a dict with times, energies,
/// per-window variations and the monotonicity report.
#[pyfunction]
#[pyo3(signature = (v0, reg, tau, steps, depth = 4, tol_gap = 1e-12))]
fn flow<'py>(
    py: Python<'py>,
    v0: &PySignal,
    reg: &PyRegularizer,
    tau: f64,
    steps: usize,
    depth: u32,
    tol_gap: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut solver = SolveConfig::new(tau, reg.spec.clone());
    solver.pd.tol_gap = tol_gap;
    let cfg = FlowConfig {
        steps,
        tau,
        solver,
        record_every: 1,
        method: FlowSolver::Pd,
    };
    let v0 = &v0.inner;
    let windows = MeasureWindow::dyadic(v0.grid(), depth);
    let traj = py
        .detach(|| minimizing_movements(v0, &cfg, &windows))
        .map_err(err)?;
    let report = flow_monotonicity_report(&traj, &windows, SlackPolicy::floor_only());
    let out = PyDict::new(py);
    out.set_item("times", traj.times())?;
    out.set_item("energies", traj.records.iter().map(|r| r.energy).collect::<Vec<_>>())?;
    out.set_item("variation", traj.records.iter().map(|r| r.variation.clone()).collect::<Vec<_>>())?;
    out.set_item("dissipation_holds", traj.dissipation_holds())?;
    out.set_item("aborted", traj.aborted.clone())?;
    out.set_item("report", to_py(py, &report)?)?;
    if let Some(last) = traj.records.last() {
        out.set_item("final", wrap(last.v.clone()))?;
    }
    Ok(out)
}

/// Seeded battery; `spec` uses the same field names as the Rust `BatterySpec`.
#[pyfunction]
fn run_battery<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let spec: BatterySpec = from_py(py, spec, "battery")?;
    let res = py.detach(|| core_run_battery(&spec)).map_err(err)?;
    to_py(py, &res)
}

/// Parses and validates an experiment config; returns it with defaults filled in.
#[pyfunction]
fn load_config<'py>(py: Python<'py>, path: std::path::PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::load(&path).map_err(err)?;
    to_py(py, &cfg.resolved())
}

/// Runs the `vrof` command line with `args` (without the program name);
/// returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| vrof_cli::main_with_args(std::iter::once("vrof".to_string()).chain(args)))
}

#[pymodule]
fn vrof(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VrofError", m.py().get_type::<VrofError>())?;
    m.add_class::<PyAnisotropy>()?;
    m.add_class::<PyRegularizer>()?;
    m.add_class::<PySignal>()?;
    m.add_function(wrap_pyfunction!(taut_string, m)?)?;
    m.add_function(wrap_pyfunction!(solve_pd, m)?)?;
    m.add_function(wrap_pyfunction!(continuation_solve, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(flow, m)?)?;
    m.add_function(wrap_pyfunction!(run_battery, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
