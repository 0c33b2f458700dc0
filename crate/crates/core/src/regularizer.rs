//! Profiles `f`, composite regularizers `F = f o phi`, their smoothed
//! families `F_eta` and the derivatives the solvers need.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::anisotropy::{Anisotropy, AnisotropySpec, SplicedSquare};
use crate::error::{check_dim, Error, Result};
use crate::quadrature::{bump, bump_mass, gauss_legendre_cached};

/// Serializable description of a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// `f(t) = t`
    Identity,
    /// `f(t) = sqrt(1 + t^2) - 1`
    Sqrt1p,
    /// `f(t) = a t + b (log(1 + exp(-c t)) - log 2)`
    SoftplusLinear { a: f64, b: f64, c: f64 },
    /// Piecewise linear through `(t[k], f[k])`, `t[0] = 0`, extended with the
    /// last slope.
    Table { t: Vec<f64>, f: Vec<f64> },
}

/// Which hypotheses of the regular case a profile satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegularFlags {
    pub strictly_convex: bool,
    pub increasing: bool,
    pub differentiable: bool,
    pub zero_slope_at_origin: bool,
}

impl RegularFlags {
    pub fn all(&self) -> bool {
        self.strictly_convex && self.increasing && self.differentiable && self.zero_slope_at_origin
    }

    /// Name of the first failed hypothesis.
    pub fn first_failure(&self) -> Option<&'static str> {
        if !self.strictly_convex {
            Some("f strictly convex")
        } else if !self.increasing {
            Some("f increasing")
        } else if !self.differentiable {
            Some("f differentiable")
        } else if !self.zero_slope_at_origin {
            Some("f'(0) = 0")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
enum ProfileKind {
    Identity,
    Sqrt1p,
    Softplus { a: f64, b: f64, c: f64 },
    Table { t: Vec<f64>, f: Vec<f64>, slopes: Vec<f64> },
    Mollified(Box<Mollified>),
}

#[derive(Debug, Clone)]
struct Mollified {
    base: Profile,
    eta: f64,
    table: HermiteTable,
}

// Quintic Hermite table of f_eta through (f, f', f'') on a geometric grid;
// derivatives are taken from the interpolant so the three stay consistent.
#[derive(Debug, Clone)]
struct HermiteTable {
    t: Vec<f64>,
    f: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    lo: f64,
    inv_log_ratio: f64,
    f_inf: f64,
}

const TABLE_T_MAX: f64 = 1e6;
const TABLE_PER_DECADE: f64 = 256.0;

impl HermiteTable {
    fn empty() -> Self {
        Self {
            t: Vec::new(),
            f: Vec::new(),
            d1: Vec::new(),
            d2: Vec::new(),
            lo: 0.0,
            inv_log_ratio: 0.0,
            f_inf: 0.0,
        }
    }

    fn build(m: &Mollified) -> Self {
        let lo = 1e-3 * m.eta.min(1.0);
        let decades = (TABLE_T_MAX / lo).log10();
        let count = (decades * TABLE_PER_DECADE).ceil() as usize;
        let ratio = (TABLE_T_MAX / lo).powf(1.0 / count as f64);
        let mut t = vec![0.0];
        t.extend((0..=count).map(|k| lo * ratio.powi(k as i32)));
        let f = t.iter().map(|&x| m.value(x)).collect();
        let d1 = t.iter().map(|&x| m.deriv(x)).collect();
        let d2 = t.iter().map(|&x| m.second(x)).collect();
        Self {
            t,
            f,
            d1,
            d2,
            lo,
            inv_log_ratio: 1.0 / ratio.ln(),
            f_inf: m.base.f_inf(),
        }
    }

    // segment k with t[k] <= x < t[k+1], x inside the table
    fn locate(&self, x: f64) -> usize {
        if x < self.lo {
            return 0;
        }
        let guess = ((x / self.lo).ln() * self.inv_log_ratio) as usize + 1;
        let mut k = guess.min(self.t.len() - 2);
        while k > 0 && self.t[k] > x {
            k -= 1;
        }
        while k + 2 < self.t.len() && self.t[k + 1] <= x {
            k += 1;
        }
        k
    }

    // (p, p', p'') of the quintic on the segment containing x
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let k = self.locate(x);
        let h = self.t[k + 1] - self.t[k];
        let s = (x - self.t[k]) / h;
        let dy = self.f[k + 1] - self.f[k];
        let (d0, d1) = (h * self.d1[k], h * self.d1[k + 1]);
        let (e0, e1) = (h * h * self.d2[k], h * h * self.d2[k + 1]);
        let c = [
            self.f[k],
            d0,
            0.5 * e0,
            10.0 * dy - 6.0 * d0 - 4.0 * d1 - 0.5 * (3.0 * e0 - e1),
            -15.0 * dy + 8.0 * d0 + 7.0 * d1 + 0.5 * (3.0 * e0 - 2.0 * e1),
            6.0 * dy - 3.0 * d0 - 3.0 * d1 - 0.5 * (e0 - e1),
        ];
        let v = c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * (c[4] + s * c[5]))));
        let d = c[1] + s * (2.0 * c[2] + s * (3.0 * c[3] + s * (4.0 * c[4] + s * 5.0 * c[5])));
        let dd = 2.0 * c[2] + s * (6.0 * c[3] + s * (12.0 * c[4] + s * 20.0 * c[5]));
        (v, d / h, dd / (h * h))
    }

    fn value(&self, x: f64) -> f64 {
        let last = self.t.len() - 1;
        if x >= self.t[last] {
            return self.f[last] + self.f_inf * (x - self.t[last]);
        }
        self.eval(x).0
    }

    fn deriv(&self, x: f64) -> f64 {
        if x >= self.t[self.t.len() - 1] {
            return self.f_inf;
        }
        self.eval(x).1.clamp(0.0, self.f_inf)
    }

    fn second(&self, x: f64) -> f64 {
        if x >= self.t[self.t.len() - 1] {
            return 0.0;
        }
        self.eval(x).2.max(0.0)
    }
}

/// A convex, nondecreasing scalar function of linear growth on `[0, inf)`.
#[derive(Debug, Clone)]
pub struct Profile {
    kind: ProfileKind,
}

const NODES_PER_PANEL: usize = 16;
const PANELS: usize = 4;

impl Profile {
    pub fn new(spec: &ProfileSpec) -> Result<Self> {
        let kind = match spec {
            ProfileSpec::Identity => ProfileKind::Identity,
            ProfileSpec::Sqrt1p => ProfileKind::Sqrt1p,
            ProfileSpec::SoftplusLinear { a, b, c } => {
                let (a, b, c) = (*a, *b, *c);
                if !(a > 0.0 && b > 0.0 && c > 0.0 && a.is_finite() && b.is_finite() && c.is_finite()) {
                    return Err(Error::Config("profile: softplus_linear needs a, b, c > 0".into()));
                }
                if a < 0.5 * b * c * (1.0 - 1e-15) {
                    return Err(Error::Config(format!(
                        "profile: softplus_linear is decreasing near 0 unless a >= b c / 2 (a = {a}, b c / 2 = {})",
                        0.5 * b * c
                    )));
                }
                ProfileKind::Softplus { a, b, c }
            }
            ProfileSpec::Table { t, f } => {
                if t.len() != f.len() || t.len() < 2 {
                    return Err(Error::Config("profile.table: need matching t, f with >= 2 points".into()));
                }
                if t[0] != 0.0 {
                    return Err(Error::Config("profile.table: first sample must be at t = 0".into()));
                }
                if t.iter().chain(f).any(|x| !x.is_finite()) {
                    return Err(Error::Config("profile.table: samples must be finite".into()));
                }
                if t.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("profile.table: t must be strictly increasing".into()));
                }
                if f[0] < 0.0 {
                    return Err(Error::Config("profile.table: f(0) must be >= 0".into()));
                }
                let slopes: Vec<f64> = t
                    .windows(2)
                    .zip(f.windows(2))
                    .map(|(t, f)| (f[1] - f[0]) / (t[1] - t[0]))
                    .collect();
                if slopes.iter().any(|s| *s < 0.0) {
                    return Err(Error::Config("profile.table: samples must be nondecreasing".into()));
                }
                let tol = 1e-12 * slopes.iter().fold(1.0, |m: f64, s| m.max(s.abs()));
                if slopes.windows(2).any(|s| s[1] < s[0] - tol) {
                    return Err(Error::Config("profile.table: samples must be convex".into()));
                }
                ProfileKind::Table {
                    t: t.clone(),
                    f: f.clone(),
                    slopes,
                }
            }
        };
        Ok(Self { kind })
    }

    pub fn identity() -> Self {
        Self {
            kind: ProfileKind::Identity,
        }
    }

    pub fn sqrt1p() -> Self {
        Self {
            kind: ProfileKind::Sqrt1p,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, ProfileKind::Identity)
    }

    /// `(f(t), f'(t), f_inf)`; one-sided derivative at kinks and at 0.
    pub fn eval(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("profile evaluated at t = {t} < 0")));
        }
        Ok((self.value(t), self.deriv(t), self.f_inf()))
    }

    /// `lim f'(t)`.
    pub fn f_inf(&self) -> f64 {
        match &self.kind {
            ProfileKind::Identity | ProfileKind::Sqrt1p => 1.0,
            ProfileKind::Softplus { a, .. } => *a,
            ProfileKind::Table { slopes, .. } => *slopes.last().expect("validated"),
            ProfileKind::Mollified(m) => m.base.f_inf(),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match &self.kind {
            ProfileKind::Identity => t,
            ProfileKind::Sqrt1p => t * t / ((1.0 + t * t).sqrt() + 1.0),
            ProfileKind::Softplus { a, b, c } => {
                a * t + b * (softplus_tail(c * t) - std::f64::consts::LN_2)
            }
            ProfileKind::Table { t: ts, f, slopes } => {
                let k = segment(ts, t);
                f[k] + slopes[k] * (t - ts[k])
            }
            ProfileKind::Mollified(m) => m.table.value(t),
        }
    }

    /// Right derivative.
    pub fn deriv(&self, t: f64) -> f64 {
        match &self.kind {
            ProfileKind::Identity => 1.0,
            ProfileKind::Sqrt1p => t / (1.0 + t * t).sqrt(),
            ProfileKind::Softplus { a, b, c } => a - b * c * logistic(-c * t),
            ProfileKind::Table { t: ts, slopes, .. } => slopes[segment(ts, t)],
            ProfileKind::Mollified(m) => m.table.deriv(t),
        }
    }

    /// Second derivative of the smooth part (table knots contribute atoms,
    /// see [`Profile::kinks`]).
    pub fn second(&self, t: f64) -> f64 {
        match &self.kind {
            ProfileKind::Identity | ProfileKind::Table { .. } => 0.0,
            ProfileKind::Sqrt1p => (1.0 + t * t).powf(-1.5),
            ProfileKind::Softplus { b, c, .. } => {
                let s = logistic(-c * t);
                b * c * c * s * (1.0 - s)
            }
            ProfileKind::Mollified(m) => m.table.second(t),
        }
    }

    /// Interior kinks `(t_k, jump of f')`.
    pub fn kinks(&self) -> Vec<(f64, f64)> {
        match &self.kind {
            ProfileKind::Table { t, slopes, .. } => slopes
                .windows(2)
                .enumerate()
                .filter(|(_, s)| s[1] != s[0])
                .map(|(k, s)| (t[k + 1], s[1] - s[0]))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Monotone conjugate `sup_{t >= 0} (s t - f(t))`, `+inf` past `f_inf`.
    pub fn conjugate(&self, s: f64) -> Result<f64> {
        let finf = self.f_inf();
        Ok(match &self.kind {
            ProfileKind::Identity => {
                if s <= 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProfileKind::Sqrt1p => {
                if s <= 0.0 {
                    0.0
                } else if s <= 1.0 {
                    s * s / (1.0 + (1.0 - s * s).sqrt())
                } else {
                    f64::INFINITY
                }
            }
            ProfileKind::Softplus { a, b, c } => {
                let f0 = a - 0.5 * b * c;
                if s <= f0 {
                    -self.value(0.0)
                } else if s < *a {
                    let t = ((b * c / (a - s)) - 1.0).ln() / c;
                    s * t - self.value(t)
                } else if s == *a {
                    b * std::f64::consts::LN_2
                } else {
                    f64::INFINITY
                }
            }
            ProfileKind::Table { t, f, .. } => {
                if s > finf {
                    f64::INFINITY
                } else {
                    t.iter().zip(f).map(|(t, f)| s * t - f).fold(f64::NEG_INFINITY, f64::max)
                }
            }
            ProfileKind::Mollified(_) => {
                return Err(Error::Unsupported("conjugate of a mollified profile".into()))
            }
        })
    }

    pub fn regular_flags(&self) -> RegularFlags {
        match &self.kind {
            ProfileKind::Identity => RegularFlags {
                strictly_convex: false,
                increasing: true,
                differentiable: true,
                zero_slope_at_origin: false,
            },
            ProfileKind::Sqrt1p => RegularFlags {
                strictly_convex: true,
                increasing: true,
                differentiable: true,
                zero_slope_at_origin: true,
            },
            ProfileKind::Softplus { a, b, c } => RegularFlags {
                strictly_convex: true,
                increasing: true,
                differentiable: true,
                zero_slope_at_origin: (a - 0.5 * b * c).abs() <= 1e-15 * a,
            },
            ProfileKind::Table { slopes, .. } => RegularFlags {
                strictly_convex: false,
                increasing: slopes.iter().all(|s| *s > 0.0),
                differentiable: slopes.len() == 1,
                zero_slope_at_origin: slopes[0] == 0.0,
            },
            ProfileKind::Mollified(_) => RegularFlags {
                strictly_convex: false,
                increasing: false,
                differentiable: true,
                zero_slope_at_origin: true,
            },
        }
    }

    /// `f_eta = (f 1_{t > eta} + f(eta) 1_{|t| <= eta}) * rho_{eta/2}`.
    pub fn mollify(&self, eta: f64) -> Result<Profile> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Domain(format!("mollification scale must be positive, got {eta}")));
        }
        if let ProfileKind::Mollified(_) = self.kind {
            return Err(Error::Unsupported("mollifying a mollified profile".into()));
        }
        let mut m = Mollified {
            base: self.clone(),
            eta,
            table: HermiteTable::empty(),
        };
        m.table = HermiteTable::build(&m);
        Ok(Profile {
            kind: ProfileKind::Mollified(Box::new(m)),
        })
    }
}

fn logistic(x: f64) -> f64 {
    // 1 / (1 + exp(-x)), evaluated without overflow
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// log(1 + exp(-x)) for x >= 0 (and stable for x < 0)
fn softplus_tail(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn segment(ts: &[f64], t: f64) -> usize {
    // index k of the segment [t_k, t_{k+1}) containing t, last segment extends
    let k = ts.partition_point(|x| *x <= t);
    k.saturating_sub(1).min(ts.len() - 2)
}

impl Mollified {
    // x(sigma) = t - eta sigma / 2; the truncated function is f(x) for x > eta
    // and the plateau f(eta) below. Returns the sigma breakpoints in (-1, 1)
    // where the integrand is not smooth, sorted.
    fn breakpoints(&self, t: f64) -> (f64, Vec<f64>) {
        let eta = self.eta;
        let cut = 2.0 * (t - eta) / eta;
        let mut pts: Vec<f64> = self
            .base
            .kinks()
            .into_iter()
            .filter(|(x, _)| *x > eta)
            .map(|(x, _)| 2.0 * (t - x) / eta)
            .filter(|s| *s > -1.0 && *s < cut.min(1.0))
            .collect();
        pts.sort_by(f64::total_cmp);
        (cut, pts)
    }

    // ∫ over sigma in [-1, min(cut, 1)] of g(x(sigma)) rho(sigma), normalised
    fn upper_integral(&self, t: f64, g: impl Fn(f64) -> f64) -> f64 {
        let (cut, pts) = self.breakpoints(t);
        let hi = cut.min(1.0);
        if hi <= -1.0 {
            return 0.0;
        }
        let x = |s: f64| t - 0.5 * self.eta * s;
        if hi >= 1.0 && pts.is_empty() {
            return full_rule_mean(|s| g(x(s)));
        }
        let mut edges = vec![-1.0];
        edges.extend(pts);
        edges.push(hi);
        edges
            .windows(2)
            .map(|w| panel_integral(w[0], w[1], |s| g(x(s)) * bump(s)))
            .sum::<f64>()
            / bump_mass()
    }

    fn value(&self, t: f64) -> f64 {
        let (cut, _) = self.breakpoints(t);
        let plateau = self.base.value(self.eta);
        let lo = cut.max(-1.0);
        let lower = if lo >= 1.0 {
            0.0
        } else if lo <= -1.0 {
            1.0
        } else {
            panel_integral(lo, 1.0, bump) / bump_mass()
        };
        self.upper_integral(t, |x| self.base.value(x)) + plateau * lower
    }

    fn deriv(&self, t: f64) -> f64 {
        self.upper_integral(t, |x| self.base.deriv(x))
    }

    fn second(&self, t: f64) -> f64 {
        let eta = self.eta;
        let scale = 2.0 / (eta * bump_mass());
        let mut out = self.upper_integral(t, |x| self.base.second(x));
        // atoms of f'': the plateau edge at x = eta, and table knots
        let cut = 2.0 * (t - eta) / eta;
        out += self.base.deriv(eta) * bump(cut) * scale;
        for (x, jump) in self.base.kinks() {
            if x > eta {
                out += jump * bump(2.0 * (t - x) / eta) * scale;
            }
        }
        out
    }
}

fn panel_integral(lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_legendre_cached(NODES_PER_PANEL);
    let h = (hi - lo) / PANELS as f64;
    let mut total = 0.0;
    for k in 0..PANELS {
        let mid = lo + (k as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(w) {
            total += wi * g(mid + 0.5 * h * xi);
        }
    }
    0.5 * h * total
}

// mean of g against the bump over the full support, normalised by the same
// rule so that affine g are reproduced exactly
fn full_rule_mean(g: impl Fn(f64) -> f64) -> f64 {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let rule = RULE.get_or_init(|| {
        let (x, w) = gauss_legendre_cached(NODES_PER_PANEL);
        let h = 2.0 / PANELS as f64;
        let mut pts = Vec::new();
        for k in 0..PANELS {
            let mid = -1.0 + (k as f64 + 0.5) * h;
            for (xi, wi) in x.iter().zip(w) {
                let s = mid + 0.5 * h * xi;
                pts.push((s, wi * bump(s)));
            }
        }
        let total: f64 = pts.iter().map(|p| p.1).sum();
        pts.into_iter().map(|(s, w)| (s, w / total)).collect()
    });
    rule.iter().map(|(s, w)| w * g(*s)).sum()
}

/// Exact regularizer or one of the two smoothed families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Exact,
    /// `f_eta o phi_bar_eta + eta/2 |p|^2`
    Eta1,
    /// `f_eta o phi_tilde_eta + eta/2 phi_tilde_tilde_eta`
    Eta2,
}

/// Serializable pair (profile, anisotropy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub profile: ProfileSpec,
    pub anisotropy: AnisotropySpec,
}

#[derive(Debug, Clone)]
struct Smoothing {
    f_eta: Profile,
    psi: Anisotropy,
    splice: Option<SplicedSquare>,
}

/// `F = f o phi` or a smoothed `F_eta`.
#[derive(Debug, Clone)]
pub struct Regularizer {
    profile: Profile,
    phi: Anisotropy,
    variant: Variant,
    eta: f64,
    smoothing: Option<Smoothing>,
}

/// The recession function `F_inf = f_inf * psi`.
#[derive(Debug, Clone)]
pub struct Recession {
    pub f_inf: f64,
    pub anisotropy: Anisotropy,
    pub warning: Option<String>,
}

impl Recession {
    pub fn eval(&self, p: &[f64]) -> f64 {
        self.f_inf * self.anisotropy.value(p)
    }
}

impl Regularizer {
    pub fn exact(profile: Profile, phi: Anisotropy) -> Self {
        Self {
            profile,
            phi,
            variant: Variant::Exact,
            eta: 0.0,
            smoothing: None,
        }
    }

    pub fn from_spec(spec: &RegularizerSpec) -> Result<Self> {
        Ok(Self::exact(Profile::new(&spec.profile)?, Anisotropy::new(&spec.anisotropy)?))
    }

    /// The smoothed family member at `eta` built from this exact regularizer.
    pub fn smoothed(&self, variant: Variant, eta: f64) -> Result<Self> {
        if self.variant != Variant::Exact {
            return Err(Error::Precondition("smoothing starts from an exact regularizer".into()));
        }
        if !self.phi.is_analytic() {
            return Err(Error::Unsupported("smoothing needs an analytic anisotropy".into()));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Domain(format!("eta must be positive, got {eta}")));
        }
        let f_eta = self.profile.mollify(eta)?;
        let smoothing = match variant {
            Variant::Exact => return Ok(self.clone()),
            Variant::Eta1 => Smoothing {
                f_eta,
                psi: self.phi.schneider_smooth(eta)?,
                splice: None,
            },
            Variant::Eta2 => {
                let psi = self.phi.regularize(eta)?;
                let splice = Some(psi.spliced_square()?);
                Smoothing { f_eta, psi, splice }
            }
        };
        Ok(Self {
            profile: self.profile.clone(),
            phi: self.phi.clone(),
            variant,
            eta,
            smoothing: Some(smoothing),
        })
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn anisotropy(&self) -> &Anisotropy {
        &self.phi
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    /// `F = phi`, the setting of the homogeneous estimate.
    pub fn is_homogeneous(&self) -> bool {
        self.variant == Variant::Exact && self.profile.is_identity()
    }

    /// `F(p)`, checked.
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        check_dim(self.dim(), p.len())?;
        Ok(self.value(p))
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        match &self.smoothing {
            None => self.profile.value(self.phi.value(p)),
            Some(s) => {
                let base = s.f_eta.value(s.psi.value(p));
                match &s.splice {
                    None => base + 0.5 * self.eta * dot(p, p),
                    Some(q) => base + 0.5 * self.eta * q.value(p),
                }
            }
        }
    }

    /// `DF(p)`, checked.
    pub fn grad(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), p.len())?;
        let mut out = vec![0.0; p.len()];
        self.grad_into(p, &mut out)?;
        Ok(out)
    }

    pub fn grad_into(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        let zero = p.iter().all(|&x| x == 0.0);
        match &self.smoothing {
            None => {
                if zero {
                    if self.profile.deriv(0.0) == 0.0 {
                        out.iter_mut().for_each(|o| *o = 0.0);
                        return Ok(());
                    }
                    return Err(Error::NonsmoothPoint(
                        "DF at p = 0 with f'(0) != 0".into(),
                    ));
                }
                if !self.phi.is_differentiable_at(p) {
                    return Err(Error::NonsmoothPoint(format!("anisotropy not differentiable at {p:?}")));
                }
                let t = self.phi.value(p);
                if self.profile.kinks().iter().any(|(x, _)| *x == t) {
                    return Err(Error::NonsmoothPoint(format!("profile kink at t = {t}")));
                }
                self.phi.grad_into(p, out)?;
                let d = self.profile.deriv(t);
                out.iter_mut().for_each(|o| *o *= d);
            }
            Some(s) => {
                let psi = s.psi.value(p);
                let d = s.f_eta.deriv(psi);
                if d != 0.0 && !zero {
                    s.psi.grad_into(p, out)?;
                    out.iter_mut().for_each(|o| *o *= d);
                } else {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
                match &s.splice {
                    None => {
                        for (o, x) in out.iter_mut().zip(p) {
                            *o += self.eta * x;
                        }
                    }
                    Some(q) => {
                        let mut g = vec![0.0; p.len()];
                        q.grad_into(p, &mut g);
                        for (o, x) in out.iter_mut().zip(&g) {
                            *o += 0.5 * self.eta * x;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Generalised Hessian of `F_eta` at `p`, row-major. In dim 3 the
    /// tabulated `phi_bar_eta` is linear inside each cone, so its own
    /// curvature drops out.
    pub fn hessian(&self, p: &[f64]) -> Result<Vec<f64>> {
        let s = self
            .smoothing
            .as_ref()
            .ok_or_else(|| Error::Precondition("Hessian needs an eta variant".into()))?;
        let n = p.len();
        let eta = self.eta;
        let mut h = vec![0.0; n * n];
        let zero = p.iter().all(|&x| x == 0.0);
        let psi = s.psi.value(p);
        let d1 = s.f_eta.deriv(psi);
        let d2 = s.f_eta.second(psi);
        if !zero && (d1 != 0.0 || d2 != 0.0) {
            let mut g = vec![0.0; n];
            s.psi.grad_into(p, &mut g)?;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += d2 * g[i] * g[j];
                }
            }
            if let (Some(table), true) = (s.psi.table(), d1 != 0.0) {
                let mut hb = vec![0.0; n * n];
                table.hessian_into(p, &mut hb);
                if s.splice.is_some() {
                    // D^2 phi_tilde = (g_bar g_bar^T + phi_bar D^2 phi_bar + eta I - g g^T) / phi_tilde
                    let mut gb = vec![0.0; n];
                    table.grad_into(p, &mut gb);
                    let vb = table.value(p);
                    for i in 0..n {
                        for j in 0..n {
                            let id = if i == j { eta } else { 0.0 };
                            h[i * n + j] += d1 * (gb[i] * gb[j] + vb * hb[i * n + j] + id - g[i] * g[j]) / psi;
                        }
                    }
                } else {
                    for (a, b) in h.iter_mut().zip(&hb) {
                        *a += d1 * b;
                    }
                }
            }
        }
        match &s.splice {
            None => {
                for i in 0..n {
                    h[i * n + i] += eta;
                }
            }
            Some(q) => {
                let hq = q.hessian(p);
                for (a, b) in h.iter_mut().zip(&hq) {
                    *a += 0.5 * eta * b;
                }
            }
        }
        Ok(h)
    }

    /// `D^2 F_eta(p) v` by centred differences of `DF` with step
    /// `1e-5 (1 + |p|)`.
    pub fn d2f_apply(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if self.variant == Variant::Exact {
            return Err(Error::Precondition("D2F_apply needs an eta variant".into()));
        }
        check_dim(self.dim(), p.len())?;
        check_dim(self.dim(), v.len())?;
        let nv = dot(v, v).sqrt();
        if nv == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let h = 1e-5 * (1.0 + dot(p, p).sqrt());
        let plus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a + h * b / nv).collect();
        let minus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a - h * b / nv).collect();
        let gp = self.grad(&plus)?;
        let gm = self.grad(&minus)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h) * nv)
            .collect())
    }

    pub fn recession(&self) -> Recession {
        match &self.smoothing {
            None => Recession {
                f_inf: self.profile.f_inf(),
                anisotropy: self.phi.clone(),
                warning: None,
            },
            Some(s) => Recession {
                f_inf: self.profile.f_inf(),
                anisotropy: s.psi.clone(),
                warning: Some(
                    "the eta quadratic term has infinite recession and is excluded from measure evaluation"
                        .into(),
                ),
            },
        }
    }

    /// The mollified profile of an eta variant.
    pub fn smoothed_profile(&self) -> Option<&Profile> {
        self.smoothing.as_ref().map(|s| &s.f_eta)
    }

    /// The smoothed anisotropy of an eta variant.
    pub fn smoothed_anisotropy(&self) -> Option<&Anisotropy> {
        self.smoothing.as_ref().map(|s| &s.psi)
    }

    /// Regular-case hypotheses for the constant-free singular estimate.
    pub fn regular_case(&self) -> std::result::Result<(), String> {
        if self.variant != Variant::Exact {
            return Err("exact regularizer".into());
        }
        if let Some(f) = self.profile.regular_flags().first_failure() {
            return Err(f.into());
        }
        if !self.phi.is_c1() {
            return Err("phi of class C^1 away from 0".into());
        }
        let probe = crate::anisotropy::reshetnyak_probe(&self.phi, 10_000, 0x7e5);
        if !probe.strict {
            return Err("phi strictly convex in the sense of Reshetnyak".into());
        }
        Ok(())
    }
}

fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

/// Margins reported by [`df_injectivity_probe`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub points: usize,
    pub directions: usize,
    /// `min |DF(p) - f_inf D phi(w)|` over sampled `p` and unit `w`.
    pub min_boundary_gap: f64,
    pub pairs: usize,
    /// `min (DF(p) - DF(q)).(p - q)` over sampled pairs.
    pub min_monotonicity: f64,
    pub injective: bool,
}

/// Sampled audit that `DF` stays off the image of `f_inf D phi` on the sphere
/// and is strictly monotone.
pub fn df_injectivity_probe(r: &Regularizer, trials: usize, seed: u64) -> Result<InjectivityReport> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    if let Err(h) = r.regular_case() {
        return Err(Error::Precondition(format!("regular-case hypothesis fails: {h}")));
    }
    let n = r.dim();
    let stream = crate::rng::SeedStream::new(seed);
    let mut rng = stream.named("points").rng();
    let points: Vec<Vec<f64>> = (0..trials)
        .map(|_| {
            let dir = crate::anisotropy::random_unit(&mut rng, n);
            let radius = 10f64.powf(rng.random_range(-3.0..3.0));
            dir.into_iter().map(|x| x * radius).collect()
        })
        .collect();
    let dirs = crate::anisotropy::sphere_sample(n);
    let finf = r.profile.f_inf();
    let boundary: Vec<Vec<f64>> = dirs
        .iter()
        .map(|w| {
            let g = r.phi.grad(w).expect("unit direction");
            g.into_iter().map(|x| finf * x).collect()
        })
        .collect();
    let mut min_gap = f64::INFINITY;
    let grads: Vec<Vec<f64>> = points.iter().map(|p| r.grad(p)).collect::<Result<_>>()?;
    for g in &grads {
        for b in &boundary {
            let d: f64 = g.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            min_gap = min_gap.min(d);
        }
    }
    let mut min_mono = f64::INFINITY;
    let pairs = trials;
    for _ in 0..pairs {
        let i = rng.random_range(0..points.len());
        let q: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let p = &points[i];
        if p == &q {
            continue;
        }
        let gq = r.grad(&q)?;
        let m: f64 = grads[i]
            .iter()
            .zip(&gq)
            .zip(p.iter().zip(&q))
            .map(|((a, b), (x, y))| (a - b) * (x - y))
            .sum();
        min_mono = min_mono.min(m);
    }
    Ok(InjectivityReport {
        points: points.len(),
        directions: dirs.len(),
        min_boundary_gap: min_gap,
        pairs,
        min_monotonicity: min_mono,
        injective: min_gap > 0.0 && min_mono > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn profile_examples() {
        assert_eq!(Profile::sqrt1p().eval(0.0).unwrap(), (0.0, 0.0, 1.0));
        assert_eq!(Profile::identity().eval(7.0).unwrap(), (7.0, 1.0, 1.0));
        let (v, d, fi) = Profile::sqrt1p().eval(3.0).unwrap();
        assert_relative_eq!(v, 10f64.sqrt() - 1.0, epsilon = 1e-15);
        assert_relative_eq!(d, 3.0 / 10f64.sqrt(), epsilon = 1e-15);
        assert_eq!(fi, 1.0);
        assert!(matches!(Profile::sqrt1p().eval(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_finite_differences() {
        let f = Profile::new(&ProfileSpec::SoftplusLinear { a: 2.0, b: 0.5, c: 3.0 }).unwrap();
        assert_eq!(f.value(0.0), 0.0);
        for t in [0.0, 0.1, 1.0, 5.0, 40.0] {
            let h = 1e-6;
            let fd = (f.value(t + h) - f.value((t - h).max(0.0))) / (t + h - (t - h).max(0.0));
            assert!((fd - f.deriv(t)).abs() < 1e-6, "{t}");
            let fd2 = (f.deriv(t + h) - f.deriv((t - h).max(0.0))) / (t + h - (t - h).max(0.0));
            assert!((fd2 - f.second(t)).abs() < 1e-5, "{t}");
        }
        assert_eq!(f.f_inf(), 2.0);
        assert!(!f.regular_flags().zero_slope_at_origin);
        let g = Profile::new(&ProfileSpec::SoftplusLinear { a: 1.0, b: 1.0, c: 2.0 }).unwrap();
        assert!(g.regular_flags().all());
    }

    #[test]
    fn table_validation() {
        let bad = ProfileSpec::Table {
            t: vec![0.0, 1.0, 2.0],
            f: vec![0.0, 2.0, 3.0],
        };
        assert!(matches!(Profile::new(&bad), Err(Error::Config(_))));
        let ok = Profile::new(&ProfileSpec::Table {
            t: vec![0.0, 1.0, 2.0],
            f: vec![0.0, 0.5, 2.0],
        })
        .unwrap();
        assert_eq!(ok.value(3.0), 3.5);
        assert_eq!(ok.deriv(1.0), 1.5);
        assert_eq!(ok.kinks(), vec![(1.0, 1.0)]);
    }

    #[test]
    fn mollified_identity_is_exact_past_two_eta() {
        let eta = 0.1;
        let f = Profile::identity().mollify(eta).unwrap();
        for t in [0.2, 0.25, 1.0, 37.5, 1e4] {
            assert!((f.value(t) - t).abs() <= 1e-13 * t, "{t} {}", f.value(t));
            assert!((f.deriv(t) - 1.0).abs() <= 1e-13);
        }
        // plateau: f_eta is constant f(eta) up to eta/2
        assert_eq!(f.value(0.0), eta);
        assert_eq!(f.deriv(0.04), 0.0);
    }

    #[test]
    fn mollified_sqrt1p_plateau_and_tail() {
        let f = Profile::sqrt1p();
        let fe = f.mollify(0.1).unwrap();
        assert!(fe.value(0.0) >= f.value(0.1) - 1e-9);
        // f_eta' tends to f_inf; at t = 1e3 the base slope is within 5e-7
        assert!((fe.deriv(1e3) - 1.0).abs() < 1e-6);
        for k in 0..200 {
            let t = 0.01 * k as f64;
            assert!(fe.value(t) >= f.value(t) - 1e-12, "{t}");
        }
    }

    #[test]
    fn mollified_derivatives_match_differences() {
        let table = Profile::new(&ProfileSpec::Table {
            t: vec![0.0, 0.3, 1.0],
            f: vec![0.0, 0.1, 0.8],
        })
        .unwrap();
        for base in [Profile::sqrt1p(), Profile::identity(), table] {
            let fe = base.mollify(0.2).unwrap();
            for k in 1..60 {
                let t = 0.02 * k as f64 + 0.003;
                let h = 1e-6;
                let fd = (fe.value(t + h) - fe.value(t - h)) / (2.0 * h);
                assert!((fd - fe.deriv(t)).abs() < 1e-7, "{t}: {fd} {}", fe.deriv(t));
                let fd2 = (fe.deriv(t + h) - fe.deriv(t - h)) / (2.0 * h);
                assert!((fd2 - fe.second(t)).abs() < 1e-5 * (1.0 + fd2.abs()), "{t}: {fd2} {}", fe.second(t));
            }
        }
    }

    #[test]
    fn sup_distance_shrinks_under_halving() {
        let f = Profile::sqrt1p();
        let mut last = f64::INFINITY;
        for k in 0..6 {
            let eta = 0.2 / 2f64.powi(k);
            let fe = f.mollify(eta).unwrap();
            let gap = (0..400)
                .map(|i| {
                    let t = 0.005 * i as f64;
                    fe.value(t) - f.value(t)
                })
                .fold(0.0, f64::max);
            assert!(gap < last);
            last = gap;
        }
    }

    #[test]
    fn regularizer_examples() {
        let e = Regularizer::exact(Profile::identity(), Anisotropy::euclidean(2));
        assert_eq!(e.eval(&[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(e.grad(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert!(matches!(e.grad(&[0.0, 0.0]), Err(Error::NonsmoothPoint(_))));
        let s = Regularizer::exact(Profile::sqrt1p(), Anisotropy::euclidean(2));
        assert_eq!(s.grad(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let l1 = Regularizer::exact(Profile::sqrt1p(), Anisotropy::l1(2));
        assert!(matches!(l1.grad(&[1.0, 0.0]), Err(Error::NonsmoothPoint(_))));
        assert_eq!(l1.recession().eval(&[1.0, -2.0]), 3.0);
        let soft = Profile::new(&ProfileSpec::SoftplusLinear { a: 2.0, b: 1e-3, c: 1.0 }).unwrap();
        let r = Regularizer::exact(soft, Anisotropy::euclidean(2));
        assert_eq!(r.recession().eval(&[0.0, 1.0]), 2.0);

        let eta1 = e.smoothed(Variant::Eta1, 0.05).unwrap();
        assert_relative_eq!(eta1.value(&[0.0, 0.0]), 0.05, epsilon = 1e-15);
        let eta2 = s.smoothed(Variant::Eta2, 0.01).unwrap();
        let v = eta2.value(&[1.0, 0.0]);
        let base = s.value(&[1.0, 0.0]);
        assert!(v >= base && v <= base + 0.05, "{v} {base}");
        assert!(eta2.recession().warning.is_some());
    }

    #[test]
    fn eta2_gradient_matches_differences() {
        let r = Regularizer::exact(Profile::sqrt1p(), Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap())
            .smoothed(Variant::Eta2, 0.05)
            .unwrap();
        let mut rng = crate::rng::SeedStream::new(3).rng();
        use rand::Rng;
        for _ in 0..50 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let g = r.grad(&p).unwrap();
            for i in 0..2 {
                let h = 1e-7;
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                let fd = (r.value(&a) - r.value(&b)) / (2.0 * h);
                // the tabulated phi_bar is piecewise linear on tiny cones, so
                // allow the cone-to-cone gradient jump
                assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + g[i].abs()), "{fd} {}", g[i]);
            }
        }
    }

    #[test]
    fn d2f_examples() {
        let r = Regularizer::exact(Profile::identity(), Anisotropy::euclidean(2))
            .smoothed(Variant::Eta1, 0.01)
            .unwrap();
        assert_eq!(r.d2f_apply(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let p = [600.0, 800.0];
        let hp = r.d2f_apply(&p, &p).unwrap();
        for k in 0..2 {
            assert!((hp[k] - 0.01 * p[k]).abs() < 1e-6 * p[k], "{hp:?}");
        }
        let u = [0.3, -0.2];
        let v = [-1.0, 0.5];
        let q = [0.7, 0.4];
        let hu = r.d2f_apply(&q, &u).unwrap();
        let hv = r.d2f_apply(&q, &v).unwrap();
        let a = hv[0] * u[0] + hv[1] * u[1];
        let b = hu[0] * v[0] + hu[1] * v[1];
        assert!((a - b).abs() < 1e-6, "{a} {b}");
        assert!(matches!(
            Regularizer::exact(Profile::identity(), Anisotropy::euclidean(2)).d2f_apply(&q, &u),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn injectivity_probe() {
        let r = Regularizer::exact(Profile::sqrt1p(), Anisotropy::euclidean(2));
        let rep = df_injectivity_probe(&r, 500, 9).unwrap();
        assert!(rep.injective && rep.min_boundary_gap > 0.0);
        let id = Regularizer::exact(Profile::identity(), Anisotropy::euclidean(2));
        assert!(matches!(df_injectivity_probe(&id, 10, 1), Err(Error::Precondition(_))));
    }
}
