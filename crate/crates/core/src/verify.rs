//! Window-by-window comparisons of minimizer and datum derivative measures.
//!
//! Every check returns an [`EstimateReport`]: primary rows (the estimate
//! itself), k-sweep rows (the truncated variations) and classifier rows,
//! which are informational and never decide `pass`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anisotropy::EquivalenceConstants;
use crate::bvsignal::{
    derivative, interval_variation, ksweep_singular_mass, singular_mass, truncated_variation, ClassificationRule, Grid,
    GridSignal, MeasureWindow,
};
use crate::config::{generate_datum, DatumDescriptor, Interval, WindowsDescriptor};
use crate::error::{check_dim, Error, Result};
use crate::io::{fmt_f64, Table};
use crate::regularizer::{Regularizer, RegularizerSpec};
use crate::rng::SeedStream;
use crate::solver::{solve_exact_discrete, PdConfig};

/// Truncation levels of the k-sweep.
pub fn ksweep_levels() -> Vec<f64> {
    std::iter::once(0.0).chain((0..=10).map(|e| (1u32 << e) as f64)).collect()
}

/// `slack(dx) = max(floor, c_s dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackPolicy {
    pub floor: f64,
    pub c_s: f64,
}

impl SlackPolicy {
    pub const FLOOR: f64 = 1e-8;

    pub fn floor_only() -> Self {
        Self {
            floor: Self::FLOOR,
            c_s: 0.0,
        }
    }

    /// `c_s = 4 median(violations) / dx`, the median taken over the positive
    /// violations observed at spacing `dx`.
    pub fn calibrated(violations: &[f64], dx: f64) -> Self {
        let mut pos: Vec<f64> = violations.iter().copied().filter(|v| *v > Self::FLOOR).collect();
        if pos.is_empty() {
            return Self::floor_only();
        }
        pos.sort_by(f64::total_cmp);
        let m = pos.len();
        let median = if m % 2 == 1 { pos[m / 2] } else { 0.5 * (pos[m / 2 - 1] + pos[m / 2]) };
        Self {
            floor: Self::FLOOR,
            c_s: 4.0 * median / dx,
        }
    }

    pub fn slack(&self, dx: f64) -> f64 {
        self.floor.max(self.c_s * dx)
    }
}

/// One comparison `lhs <= rhs + slack` on a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub window: MeasureWindow,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub slack: f64,
    pub pass: bool,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, window: MeasureWindow, lhs: f64, rhs: f64, slack: f64) -> Self {
        Self {
            label: label.into(),
            window,
            lhs,
            rhs,
            ratio: (rhs > 0.0).then(|| lhs / rhs),
            slack,
            pass: lhs <= rhs + slack,
        }
    }

    pub fn violation(&self) -> f64 {
        (self.lhs - self.rhs).max(0.0)
    }

    fn reslack(&mut self, slack: f64) {
        self.slack = slack;
        self.pass = self.lhs <= self.rhs + slack;
    }
}

/// Per-window comparison table for one (datum, minimizer) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theorem: String,
    pub grid: Option<Grid>,
    pub slack_policy: SlackPolicy,
    pub rows: Vec<ReportRow>,
    pub ksweep: Vec<ReportRow>,
    /// Threshold-classifier rows; reported, not asserted.
    pub classifier: Vec<ReportRow>,
    pub banner: Option<String>,
    pub pass: bool,
}

impl EstimateReport {
    pub fn empty(theorem: &str) -> Self {
        Self {
            theorem: theorem.into(),
            grid: None,
            slack_policy: SlackPolicy::floor_only(),
            rows: Vec::new(),
            ksweep: Vec::new(),
            classifier: Vec::new(),
            banner: None,
            pass: true,
        }
    }

    pub fn from_rows(theorem: &str, grid: Grid, slack: SlackPolicy, rows: Vec<ReportRow>) -> Self {
        let mut r = Self::empty(theorem);
        r.grid = Some(grid);
        r.slack_policy = slack;
        r.rows = rows;
        r.refresh();
        r
    }

    fn refresh(&mut self) {
        self.pass = self.rows.iter().chain(&self.ksweep).all(|r| r.pass);
    }

    /// Largest `lhs - rhs` over primary and k-sweep rows (0 if none).
    pub fn worst_violation(&self) -> f64 {
        self.rows.iter().chain(&self.ksweep).map(ReportRow::violation).fold(0.0, f64::max)
    }

    pub fn violations(&self) -> Vec<f64> {
        self.rows.iter().chain(&self.ksweep).map(ReportRow::violation).collect()
    }

    /// Recomputes slack and pass flags under a new policy.
    pub fn with_slack(mut self, policy: SlackPolicy) -> Self {
        let s = policy.slack(self.grid.map(|g| g.dx()).unwrap_or(0.0));
        self.slack_policy = policy;
        for r in self.rows.iter_mut().chain(&mut self.ksweep).chain(&mut self.classifier) {
            r.reslack(s);
        }
        if self.banner.is_none() {
            self.refresh();
        }
        self
    }

    /// Number of primary and k-sweep rows above slack.
    pub fn failures(&self) -> usize {
        self.rows.iter().chain(&self.ksweep).filter(|r| !r.pass).count()
    }

    /// Rows as CSV records; `prefix` is prepended to the theorem column.
    pub fn append_to(&self, t: &mut Table, prefix: &str) {
        for r in self.rows.iter().chain(&self.ksweep).chain(&self.classifier) {
            t.push(vec![
                format!("{prefix}{}", r.label),
                fmt_f64(r.window.lo),
                fmt_f64(r.window.hi),
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                r.ratio.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.slack),
                r.pass.to_string(),
            ]);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut t = report_table();
        self.append_to(&mut t, "");
        t.to_csv()
    }
}

/// Empty table with the report columns.
pub fn report_table() -> Table {
    Table::new(["theorem", "window_lo", "window_hi", "lhs", "rhs", "ratio", "slack", "pass"])
}

fn same_grid(h: &GridSignal, u: &GridSignal) -> Result<()> {
    if h.grid() != u.grid() {
        return Err(Error::Precondition("datum and minimizer live on different grids".into()));
    }
    check_dim(h.channels(), u.channels())
}

/// Variation of the minimizer against the datum on each window, plus the
/// truncated variations for every k-sweep level.
pub fn check_homogeneous(
    h: &GridSignal,
    u: &GridSignal,
    windows: &[MeasureWindow],
    r: &Regularizer,
    slack: SlackPolicy,
) -> Result<EstimateReport> {
    if !r.is_homogeneous() {
        return Err(Error::Precondition("the homogeneous estimate needs F = phi".into()));
    }
    same_grid(h, u)?;
    let (mh, mu) = (derivative(h), derivative(u));
    let s = slack.slack(h.grid().dx());
    let rows = windows
        .iter()
        .map(|w| ReportRow::new("homogeneous", *w, interval_variation(&mu, w), interval_variation(&mh, w), s))
        .collect();
    let mut report = EstimateReport::from_rows("homogeneous", *h.grid(), slack, rows);
    for k in ksweep_levels() {
        for w in windows {
            report.ksweep.push(ReportRow::new(
                format!("homogeneous/k={}", fmt_f64(k)),
                *w,
                truncated_variation(&mu, k, w),
                truncated_variation(&mh, k, w),
                s,
            ));
        }
    }
    report.refresh();
    Ok(report)
}

fn classifier_rows(label: &str, u: &GridSignal, windows: &[MeasureWindow], rhs: &[f64], thetas: &[f64], s: f64) -> Vec<ReportRow> {
    let mu = derivative(u);
    let mut out = Vec::new();
    for &theta in thetas {
        let rule = ClassificationRule { kappa: 1.0, theta };
        for (w, b) in windows.iter().zip(rhs) {
            out.push(ReportRow::new(
                format!("{label}/classifier_theta={}", fmt_f64(theta)),
                *w,
                singular_mass(&mu, w, rule),
                *b,
                s,
            ));
        }
    }
    out
}

/// Singular mass of the minimizer (k-sweep limit) against
/// `(c_plus / c_minus)^2` times the datum's atom mass.
pub fn check_singular_constant(
    h: &GridSignal,
    u: &GridSignal,
    windows: &[MeasureWindow],
    constants: EquivalenceConstants,
    slack: SlackPolicy,
    thetas: &[f64],
) -> Result<EstimateReport> {
    same_grid(h, u)?;
    let factor = constants.singular_factor();
    let mu = derivative(u);
    let s = slack.slack(h.grid().dx());
    let rhs: Vec<f64> = windows.iter().map(|w| factor * h.atom_mass(w)).collect();
    let rows = windows
        .iter()
        .zip(&rhs)
        .map(|(w, b)| ReportRow::new("singular_constant", *w, ksweep_singular_mass(&mu, w), *b, s))
        .collect();
    let mut report = EstimateReport::from_rows("singular_constant", *h.grid(), slack, rows);
    report.classifier = classifier_rows("singular_constant", u, windows, &rhs, thetas, s);
    Ok(report)
}

/// Constant-free singular estimate; refuses regularizers outside the regular
/// case, naming the failed hypothesis.
pub fn check_singular_regular(
    h: &GridSignal,
    u: &GridSignal,
    windows: &[MeasureWindow],
    r: &Regularizer,
    slack: SlackPolicy,
    thetas: &[f64],
) -> Result<EstimateReport> {
    if let Err(hyp) = r.regular_case() {
        return Err(Error::Precondition(format!("regular-case hypothesis fails: {hyp}")));
    }
    same_grid(h, u)?;
    let mu = derivative(u);
    let s = slack.slack(h.grid().dx());
    let rhs: Vec<f64> = windows.iter().map(|w| h.atom_mass(w)).collect();
    let rows = windows
        .iter()
        .zip(&rhs)
        .map(|(w, b)| ReportRow::new("singular_regular", *w, ksweep_singular_mass(&mu, w), *b, s))
        .collect();
    let mut report = EstimateReport::from_rows("singular_regular", *h.grid(), slack, rows);
    report.classifier = classifier_rows("singular_regular", u, windows, &rhs, thetas, s);
    Ok(report)
}

/// Limit Euler-Lagrange check through `P(x) = (1/lambda) int_a^x (u - h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// `|P(b)|` per channel.
    pub endpoint: Vec<f64>,
    /// `max_j phi*(P_j)`, homogeneous `F` only.
    pub max_dual: Option<f64>,
    /// Edge attaining `max_dual`.
    pub argmax_edge: Option<usize>,
    /// `max |P_j - DF(Du_j)|` over edges classified as absolutely continuous
    /// where `F` is differentiable.
    pub max_flux_error: f64,
    pub tol_cert: f64,
    /// Edges with `|P_j - DF(Du_j)| > tol_cert`.
    pub flux_failures: Vec<usize>,
    pub endpoint_ok: bool,
    pub dual_ok: bool,
    pub pass: bool,
}

/// `tol_cert = c_cert dx`; the homogeneous dual bound is `1 + 1e-6`.
pub fn limit_el_certificate(h: &GridSignal, u: &GridSignal, r: &Regularizer, lambda: f64, c_cert: f64) -> Result<CertificateReport> {
    if r.variant() != crate::regularizer::Variant::Exact {
        return Err(Error::Precondition("the certificate takes the exact regularizer".into()));
    }
    same_grid(h, u)?;
    check_dim(r.dim(), h.channels())?;
    let n = h.channels();
    let g = *h.grid();
    let dx = g.dx();
    let (hv, uv) = (h.values(), u.values());
    let mut p = vec![0.0; n];
    let mut ps = Vec::with_capacity(g.edges() * n);
    for i in 0..g.cells {
        for c in 0..n {
            p[c] += (uv[i * n + c] - hv[i * n + c]) * dx / lambda;
        }
        if i + 1 < g.cells {
            ps.extend_from_slice(&p);
        }
    }
    let endpoint: Vec<f64> = p.iter().map(|x| x.abs()).collect();
    let homogeneous = r.is_homogeneous();
    let phi = r.anisotropy();
    let mut max_dual: Option<f64> = None;
    let mut argmax = None;
    if homogeneous {
        for j in 0..g.edges() {
            let d = phi.dual(&ps[j * n..(j + 1) * n]);
            if max_dual.is_none_or(|m| d > m) {
                max_dual = Some(d);
                argmax = Some(j);
            }
        }
    }
    let tol_cert = c_cert * dx;
    let mu = derivative(u);
    let threshold = {
        let rule = ClassificationRule::default();
        rule.kappa * dx.powf(rule.theta)
    };
    let slope_floor = 1e-6 * (1.0 + (0..g.edges()).map(|j| norm(mu.ac(j))).fold(0.0, f64::max));
    let mut max_err: f64 = 0.0;
    let mut failures = Vec::new();
    for j in 0..g.edges() {
        let q = mu.ac(j);
        let m = norm(q);
        if m * dx > threshold {
            continue;
        }
        // homogeneous F has no derivative at 0 and an ill-conditioned one
        // next to it
        if homogeneous && m <= slope_floor {
            continue;
        }
        let e = subgradient_residual(r, q, &ps[j * n..(j + 1) * n])?;
        max_err = max_err.max(e);
        if e > tol_cert {
            failures.push(j);
        }
    }
    let endpoint_ok = endpoint.iter().all(|e| *e <= 1e-8);
    let dual_ok = max_dual.is_none_or(|m| m <= 1.0 + 1e-6);
    Ok(CertificateReport {
        endpoint,
        max_dual,
        argmax_edge: argmax,
        max_flux_error: max_err,
        tol_cert,
        pass: endpoint_ok && dual_ok && failures.is_empty(),
        flux_failures: failures,
        endpoint_ok,
        dual_ok,
    })
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// |z - DF(q)| when phi is C1 away from 0, else sqrt(2 g / |q|) with g the
// Fenchel-Young gap F(q) + F*(z) - z.q, which has the same first-order size
// and vanishes exactly on the subdifferential
fn subgradient_residual(r: &Regularizer, q: &[f64], z: &[f64]) -> Result<f64> {
    let phi = r.anisotropy();
    let m = norm(q);
    if !r.is_homogeneous() && m == 0.0 {
        // the subdifferential at 0 is f'(0) times the dual unit ball
        return Ok((phi.dual(z) - r.profile().deriv(0.0)).max(0.0));
    }
    if !r.is_homogeneous() && phi.is_c1() {
        let df = r.grad(q)?;
        return Ok(norm(&df.iter().zip(z).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    let s = phi.dual(z).min(r.profile().f_inf());
    let fy = r.value(q) + r.profile().conjugate(s)? - z.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    Ok((2.0 * fy.max(0.0) / m).sqrt())
}

/// Worst violation per grid and its decay under refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub cells: usize,
    pub dx: f64,
    pub worst_violation: f64,
    /// `worst(N) / worst(N / 2)`, when both are above the floor.
    pub ratio: Option<f64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTable {
    pub rows: Vec<RefinementRow>,
    pub pass: bool,
}

impl RefinementTable {
    pub fn to_csv(&self) -> String {
        let mut t = Table::new(["cells", "dx", "worst_violation", "ratio", "ok"]);
        for r in &self.rows {
            t.push(vec![
                r.cells.to_string(),
                fmt_f64(r.dx),
                fmt_f64(r.worst_violation),
                r.ratio.map(fmt_f64).unwrap_or_default(),
                r.ok.to_string(),
            ]);
        }
        t.to_csv()
    }
}

/// Applies the refinement policy to `(cells, dx, worst violation)` triples,
/// `cells` increasing by doubling: each worst violation must be at most
/// `0.5 * 1.2` of the previous one, or below the slack floor.
pub fn refinement_study(worst: &[(usize, f64, f64)]) -> RefinementTable {
    let mut rows = Vec::with_capacity(worst.len());
    for (k, &(cells, dx, v)) in worst.iter().enumerate() {
        let prev = k.checked_sub(1).map(|i| worst[i].2);
        let ratio = prev.filter(|p| *p > SlackPolicy::FLOOR).map(|p| v / p);
        let ok = v <= SlackPolicy::FLOOR || match prev {
            None => true,
            Some(p) if p <= SlackPolicy::FLOOR => false,
            Some(_) => ratio.is_some_and(|r| r <= 0.5 * 1.2),
        };
        rows.push(RefinementRow {
            cells,
            dx,
            worst_violation: v,
            ratio,
            ok,
        });
    }
    let pass = rows.iter().all(|r| r.ok);
    RefinementTable { rows, pass }
}

/// Which estimate a battery checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    Homogeneous,
    SingularConstant,
    SingularRegular,
}

impl Theorem {
    pub fn tag(&self) -> &'static str {
        match self {
            Theorem::Homogeneous => "homogeneous",
            Theorem::SingularConstant => "singular_constant",
            Theorem::SingularRegular => "singular_regular",
        }
    }

    /// The sharpest estimate whose hypotheses `r` satisfies.
    pub fn for_regularizer(r: &Regularizer) -> Self {
        if r.is_homogeneous() {
            Theorem::Homogeneous
        } else if r.regular_case().is_ok() {
            Theorem::SingularRegular
        } else {
            Theorem::SingularConstant
        }
    }
}

/// A seeded family of instances checked on one or more grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub name: String,
    pub theorem: Theorem,
    pub interval: Interval,
    pub channels: usize,
    pub lambda: f64,
    pub regularizer: RegularizerSpec,
    pub datum: DatumDescriptor,
    pub instances: usize,
    pub seed: u64,
    /// Increasing grid sizes; the first calibrates the slack.
    pub grids: Vec<usize>,
    pub windows: WindowsDescriptor,
    pub pd: PdConfig,
    pub thetas: Vec<f64>,
    /// Also compute the limit Euler-Lagrange certificate.
    pub certificate: bool,
    pub c_cert: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub cells: usize,
    pub index: usize,
    pub seed: u64,
    pub report: EstimateReport,
    pub certificate: Option<CertificateReport>,
    pub gap: f64,
    pub solver_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryResult {
    pub name: String,
    pub theorem: Theorem,
    pub slack: SlackPolicy,
    pub instances: Vec<InstanceOutcome>,
    pub refinement: RefinementTable,
    /// Every instance report passes and every solve converged.
    pub reports_pass: bool,
    pub certificates_pass: bool,
}

impl BatteryResult {
    pub fn on_grid(&self, cells: usize) -> impl Iterator<Item = &InstanceOutcome> {
        self.instances.iter().filter(move |o| o.cells == cells)
    }

    pub fn report_csv(&self) -> String {
        let mut t = report_table();
        for o in &self.instances {
            o.report.append_to(&mut t, &format!("{}[N={},i={}]/", self.name, o.cells, o.index));
        }
        t.to_csv()
    }

    pub fn failures(&self, cells: usize) -> usize {
        self.on_grid(cells).map(|o| o.report.failures()).sum()
    }
}

fn check(
    theorem: Theorem,
    h: &GridSignal,
    u: &GridSignal,
    windows: &[MeasureWindow],
    r: &Regularizer,
    slack: SlackPolicy,
    thetas: &[f64],
) -> Result<EstimateReport> {
    match theorem {
        Theorem::Homogeneous => check_homogeneous(h, u, windows, r, slack),
        Theorem::SingularConstant => {
            check_singular_constant(h, u, windows, r.anisotropy().equivalence_constants(), slack, thetas)
        }
        Theorem::SingularRegular => check_singular_regular(h, u, windows, r, slack, thetas),
    }
}

/// Solves every instance on every grid with the exact solver, calibrates the
/// slack on the coarsest grid and applies it everywhere.
///
/// Instance `i` uses seed `SeedStream(seed).child(i)` on every grid, so the
/// refinement study sees the same continuum datum at each resolution.
/// Output order is deterministic.
pub fn run_battery(spec: &BatterySpec) -> Result<BatteryResult> {
    if spec.grids.is_empty() || spec.grids.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("battery grids must be non-empty and increasing".into()));
    }
    let reg = {
        let s = RegularizerSpec {
            profile: spec.regularizer.profile.clone(),
            anisotropy: spec.regularizer.anisotropy.with_dim(spec.channels)?,
        };
        Regularizer::from_spec(&s)?
    };
    let root = SeedStream::new(spec.seed);
    let jobs: Vec<(usize, usize)> = spec
        .grids
        .iter()
        .flat_map(|&n| (0..spec.instances).map(move |i| (n, i)))
        .collect();
    let raw: Vec<InstanceOutcome> = jobs
        .par_iter()
        .map(|&(cells, i)| -> Result<InstanceOutcome> {
            let grid = Grid::new(spec.interval.a, spec.interval.b, cells)?;
            let seed = root.child(i as u64);
            let h = generate_datum(&spec.datum, &grid, spec.channels, seed)?;
            let windows = spec.windows.build(&grid)?;
            let sol = solve_exact_discrete(&h, &reg, spec.lambda, &spec.pd)?;
            let report = check(spec.theorem, &h, &sol.u, &windows, &reg, SlackPolicy::floor_only(), &spec.thetas)?;
            let certificate = if spec.certificate {
                Some(limit_el_certificate(&h, &sol.u, &reg, spec.lambda, spec.c_cert)?)
            } else {
                None
            };
            Ok(InstanceOutcome {
                cells,
                index: i,
                seed: seed.seed(),
                report,
                certificate,
                gap: sol.gap,
                solver_converged: sol.converged,
            })
        })
        .collect::<Result<_>>()?;
    let coarse = spec.grids[0];
    let coarse_dx = (spec.interval.b - spec.interval.a) / coarse as f64;
    let violations: Vec<f64> = raw
        .iter()
        .filter(|o| o.cells == coarse)
        .flat_map(|o| o.report.violations())
        .collect();
    let slack = SlackPolicy::calibrated(&violations, coarse_dx);
    let instances: Vec<InstanceOutcome> = raw
        .into_iter()
        .map(|mut o| {
            o.report = o.report.with_slack(slack);
            o
        })
        .collect();
    let worst: Vec<(usize, f64, f64)> = spec
        .grids
        .iter()
        .map(|&n| {
            let w = instances
                .iter()
                .filter(|o| o.cells == n)
                .map(|o| o.report.worst_violation())
                .fold(0.0, f64::max);
            (n, (spec.interval.b - spec.interval.a) / n as f64, w)
        })
        .collect();
    let refinement = refinement_study(&worst);
    let reports_pass = instances.iter().all(|o| o.report.pass && o.solver_converged);
    let certificates_pass = instances
        .iter()
        .all(|o| o.certificate.as_ref().is_none_or(|c| c.endpoint_ok && c.dual_ok));
    Ok(BatteryResult {
        name: spec.name.clone(),
        theorem: spec.theorem,
        slack,
        instances,
        refinement,
        reports_pass,
        certificates_pass,
    })
}
