//! Anisotropies: convex, positively 1-homogeneous, coercive functions on R^n.
//!
//! Analytic kinds are evaluated in closed form. Smoothed kinds are tabulated
//! on the unit sphere and extended by homogeneity, which keeps them exactly
//! 1-homogeneous. In the plane the table is a periodic cubic spline in the
//! angle (C^2, so Newton sees a continuous Hessian); in dim 3 it is
//! cone-wise linear.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::quadrature::{bump, gauss_legendre, Rule};
use crate::rng::SeedStream;

/// Symbolic description of an anisotropy.
///
/// `dim = 0` means "take the dimension from the surrounding configuration",
/// see [`AnisotropySpec::with_dim`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnisotropySpec {
    Euclidean {
        #[serde(default)]
        dim: usize,
    },
    L1 {
        #[serde(default)]
        dim: usize,
    },
    Linf {
        #[serde(default)]
        dim: usize,
    },
    Lp {
        #[serde(default)]
        dim: usize,
        p: f64,
    },
    WeightedL2 {
        weights: Vec<f64>,
    },
    Smoothed {
        base: Box<AnisotropySpec>,
        eta: f64,
        stage: SmoothingStage,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingStage {
    Schneider,
    Regularized,
    SplicedSquare,
}

impl AnisotropySpec {
    pub fn euclidean(dim: usize) -> Self {
        AnisotropySpec::Euclidean { dim }
    }

    pub fn l1(dim: usize) -> Self {
        AnisotropySpec::L1 { dim }
    }

    pub fn linf(dim: usize) -> Self {
        AnisotropySpec::Linf { dim }
    }

    pub fn lp(dim: usize, p: f64) -> Self {
        AnisotropySpec::Lp { dim, p }
    }

    pub fn weighted_l2(weights: Vec<f64>) -> Self {
        AnisotropySpec::WeightedL2 { weights }
    }

    pub fn smoothed(base: AnisotropySpec, eta: f64, stage: SmoothingStage) -> Self {
        AnisotropySpec::Smoothed {
            base: Box::new(base),
            eta,
            stage,
        }
    }

    /// Ambient dimension, 0 if not yet resolved.
    pub fn dim(&self) -> usize {
        match self {
            AnisotropySpec::Euclidean { dim }
            | AnisotropySpec::L1 { dim }
            | AnisotropySpec::Linf { dim }
            | AnisotropySpec::Lp { dim, .. } => *dim,
            AnisotropySpec::WeightedL2 { weights } => weights.len(),
            AnisotropySpec::Smoothed { base, .. } => base.dim(),
        }
    }

    /// Fill an unset dimension with `n`, or check that a set one equals `n`.
    pub fn with_dim(&self, n: usize) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            AnisotropySpec::Euclidean { dim }
            | AnisotropySpec::L1 { dim }
            | AnisotropySpec::Linf { dim }
            | AnisotropySpec::Lp { dim, .. } => {
                if *dim == 0 {
                    *dim = n;
                } else {
                    check_dim(n, *dim)?;
                }
            }
            AnisotropySpec::WeightedL2 { weights } => check_dim(n, weights.len())?,
            AnisotropySpec::Smoothed { base, .. } => **base = base.with_dim(n)?,
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Config("anisotropy.dim: dimension must be positive".into()));
        }
        match self {
            AnisotropySpec::Lp { p, .. } if !(p.is_finite() && *p > 1.0) => Err(Error::Config(
                format!("anisotropy.p: exponent must be a finite real > 1, got {p}"),
            )),
            AnisotropySpec::WeightedL2 { weights }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) =>
            {
                Err(Error::Config("anisotropy.weights: weights must be positive and finite".into()))
            }
            AnisotropySpec::Smoothed { base, eta, .. } => {
                if !(eta.is_finite() && *eta > 0.0) {
                    return Err(Error::Config(format!("anisotropy.eta: must be positive, got {eta}")));
                }
                if matches!(**base, AnisotropySpec::Smoothed { .. }) {
                    return Err(Error::Config("anisotropy.base: smoothing an already smoothed kind".into()));
                }
                if base.dim() > 3 {
                    return Err(Error::Unsupported(format!(
                        "smoothed anisotropies need dim <= 3, got {}",
                        base.dim()
                    )));
                }
                base.validate()
            }
            _ => Ok(()),
        }
    }
}

/// Best constants with `c_minus |p| <= phi(p) <= c_plus |p|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConstants {
    pub c_minus: f64,
    pub c_plus: f64,
    /// Number of sphere samples for sampled constants, `None` when exact.
    pub samples: Option<usize>,
}

impl EquivalenceConstants {
    /// `(c_plus / c_minus)^2`.
    pub fn singular_factor(&self) -> f64 {
        let f = (self.c_plus / self.c_minus).powi(2);
        // sqrt(n)^2 should come out as n
        if (f - f.round()).abs() <= 8.0 * f64::EPSILON * f {
            f.round()
        } else {
            f
        }
    }
}

/// Quadrature and table resolution for the smoothing constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SmoothingResolution {
    pub radial: usize,
    pub angular: usize,
    pub polar: usize,
    /// Minimum number of table directions in 2D.
    pub circle_directions: usize,
    pub octa_subdivision: usize,
    /// Grow the 2D table toward a spacing of `eta / 8`, up to 2^15 directions.
    pub adaptive: bool,
}

impl Default for SmoothingResolution {
    fn default() -> Self {
        Self {
            radial: 32,
            angular: 64,
            polar: 32,
            circle_directions: 1024,
            octa_subdivision: 45,
            adaptive: true,
        }
    }
}

impl SmoothingResolution {
    /// The same rule with every count doubled, used as a self-check.
    pub fn doubled(&self) -> Self {
        Self {
            radial: 2 * self.radial,
            angular: 2 * self.angular,
            polar: 2 * self.polar,
            circle_directions: 2 * self.circle_directions,
            octa_subdivision: 2 * self.octa_subdivision,
            adaptive: self.adaptive,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Euclidean,
    L1,
    Linf,
    Lp(f64),
    Weighted(Vec<f64>),
    Table(Arc<SphereTable>),
    Regularized { table: Arc<SphereTable>, eta: f64 },
}

/// Evaluator for an anisotropy. Cheap to clone; tables are shared.
#[derive(Debug, Clone)]
pub struct Anisotropy {
    spec: AnisotropySpec,
    dim: usize,
    kind: Kind,
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

impl Anisotropy {
    pub fn new(spec: &AnisotropySpec) -> Result<Self> {
        Self::with_resolution(spec, SmoothingResolution::default())
    }

    pub fn with_resolution(spec: &AnisotropySpec, res: SmoothingResolution) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dim();
        let kind = match spec {
            AnisotropySpec::Euclidean { .. } => Kind::Euclidean,
            AnisotropySpec::L1 { .. } => Kind::L1,
            AnisotropySpec::Linf { .. } => Kind::Linf,
            AnisotropySpec::Lp { p, .. } => Kind::Lp(*p),
            AnisotropySpec::WeightedL2 { weights } => Kind::Weighted(weights.clone()),
            AnisotropySpec::Smoothed { base, eta, stage } => {
                let table = SphereTable::cached(base, *eta, res)?;
                match stage {
                    SmoothingStage::Schneider => Kind::Table(table),
                    SmoothingStage::Regularized => Kind::Regularized { table, eta: *eta },
                    SmoothingStage::SplicedSquare => {
                        return Err(Error::Unsupported(
                            "spliced_square is a squared field, not an anisotropy; use SplicedSquare".into(),
                        ))
                    }
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            dim,
            kind,
        })
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(&AnisotropySpec::euclidean(dim)).expect("valid spec")
    }

    pub fn l1(dim: usize) -> Self {
        Self::new(&AnisotropySpec::l1(dim)).expect("valid spec")
    }

    pub fn linf(dim: usize) -> Self {
        Self::new(&AnisotropySpec::linf(dim)).expect("valid spec")
    }

    pub fn weighted_l2(weights: Vec<f64>) -> Result<Self> {
        Self::new(&AnisotropySpec::weighted_l2(weights))
    }

    pub fn spec(&self) -> &AnisotropySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Analytic base kinds, as opposed to tabulated smoothed kinds.
    pub fn is_analytic(&self) -> bool {
        !matches!(self.kind, Kind::Table(_) | Kind::Regularized { .. })
    }

    /// `phi(p)`, checked.
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        check_dim(self.dim, p.len())?;
        Ok(self.value(p))
    }

    /// `phi(p)` without the dimension check.
    pub fn value(&self, p: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), self.dim);
        match &self.kind {
            Kind::Euclidean => norm(p),
            Kind::L1 => p.iter().map(|x| x.abs()).sum(),
            Kind::Linf => p.iter().fold(0.0, |m, x| m.max(x.abs())),
            Kind::Lp(e) => {
                let m = p.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
                if m == 0.0 {
                    return 0.0;
                }
                m * p.iter().map(|x| (x.abs() / m).powf(*e)).sum::<f64>().powf(1.0 / e)
            }
            Kind::Weighted(w) => p.iter().zip(w).map(|(x, w)| w * x * x).sum::<f64>().sqrt(),
            Kind::Table(t) => t.value(p),
            Kind::Regularized { table, eta } => {
                let v = table.value(p);
                (v * v + eta * dot(p, p)).sqrt()
            }
        }
    }

    /// Gradient (or the documented subgradient selection) at `p != 0`.
    pub fn grad(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, p.len())?;
        let mut g = vec![0.0; self.dim];
        self.grad_into(p, &mut g)?;
        Ok(g)
    }

    pub fn grad_into(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        if p.iter().all(|&x| x == 0.0) {
            return Err(Error::Domain("gradient of an anisotropy is undefined at the origin".into()));
        }
        match &self.kind {
            Kind::Euclidean => {
                let n = norm(p);
                for (o, x) in out.iter_mut().zip(p) {
                    *o = x / n;
                }
            }
            Kind::L1 => {
                for (o, x) in out.iter_mut().zip(p) {
                    *o = sign0(*x);
                }
            }
            Kind::Linf => {
                let mut k = 0;
                for (i, x) in p.iter().enumerate() {
                    if x.abs() > p[k].abs() {
                        k = i;
                    }
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                out[k] = sign0(p[k]);
            }
            Kind::Lp(e) => {
                let v = self.value(p);
                for (o, x) in out.iter_mut().zip(p) {
                    *o = sign0(*x) * (x.abs() / v).powf(e - 1.0);
                }
            }
            Kind::Weighted(w) => {
                let v = self.value(p);
                for ((o, x), w) in out.iter_mut().zip(p).zip(w) {
                    *o = w * x / v;
                }
            }
            Kind::Table(t) => t.grad_into(p, out),
            Kind::Regularized { table, eta } => {
                let v = table.value(p);
                table.grad_into(p, out);
                let r = (v * v + eta * dot(p, p)).sqrt();
                for (o, x) in out.iter_mut().zip(p) {
                    *o = (v * *o + eta * x) / r;
                }
            }
        }
        Ok(())
    }

    /// Whether `phi` is differentiable at `p` (false at the origin).
    pub fn is_differentiable_at(&self, p: &[f64]) -> bool {
        if p.iter().all(|&x| x == 0.0) {
            return false;
        }
        if self.dim == 1 {
            return true;
        }
        match &self.kind {
            Kind::Euclidean | Kind::Weighted(_) | Kind::Lp(_) => true,
            Kind::L1 => p.iter().all(|&x| x != 0.0),
            Kind::Linf => {
                let m = p.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
                p.iter().filter(|x| x.abs() == m).count() == 1
            }
            Kind::Table(t) | Kind::Regularized { table: t, .. } => !t.on_cone_boundary(p),
        }
    }

    /// `C^1` away from the origin.
    pub fn is_c1(&self) -> bool {
        self.dim == 1
            || matches!(self.kind, Kind::Euclidean | Kind::Weighted(_) | Kind::Lp(_))
            || matches!(&self.kind, Kind::Table(t) | Kind::Regularized { table: t, .. } if t.is_smooth())
    }

    /// Dual anisotropy `sup { q.z : phi(z) <= 1 }`, checked.
    pub fn dual_eval(&self, q: &[f64]) -> Result<f64> {
        check_dim(self.dim, q.len())?;
        Ok(self.dual(q))
    }

    pub fn dual(&self, q: &[f64]) -> f64 {
        match &self.kind {
            Kind::Euclidean => norm(q),
            Kind::L1 => q.iter().fold(0.0, |m, x| m.max(x.abs())),
            Kind::Linf => q.iter().map(|x| x.abs()).sum(),
            Kind::Lp(e) => {
                let c = e / (e - 1.0);
                let m = q.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
                if m == 0.0 {
                    return 0.0;
                }
                m * q.iter().map(|x| (x.abs() / m).powf(c)).sum::<f64>().powf(1.0 / c)
            }
            Kind::Weighted(w) => q.iter().zip(w).map(|(x, w)| x * x / w).sum::<f64>().sqrt(),
            Kind::Table(t) => t.dual_vertices(q),
            Kind::Regularized { .. } => self.dual_by_ascent(q),
        }
    }

    // sup over unit directions of q.w / phi(w): vertex scan then local refinement
    fn dual_by_ascent(&self, q: &[f64]) -> f64 {
        let ratio = |w: &[f64]| dot(q, w) / self.value(w);
        let table = match &self.kind {
            Kind::Regularized { table, .. } => table,
            _ => unreachable!(),
        };
        let mut best = table.best_vertex(|w| ratio(w));
        let mut step = table.spacing();
        let mut val = ratio(&best);
        let n = self.dim;
        for _ in 0..60 {
            let mut improved = false;
            for axis in 0..n {
                for sgn in [-1.0, 1.0] {
                    let mut cand = best.clone();
                    cand[axis] += sgn * step;
                    let r = norm(&cand);
                    cand.iter_mut().for_each(|x| *x /= r);
                    let v = ratio(&cand);
                    if v > val {
                        val = v;
                        best = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < 1e-12 {
                    break;
                }
            }
        }
        val.max(0.0)
    }

    /// Euclidean projection of `q` onto `{ phi* <= radius }`.
    pub fn project_dual_ball(&self, q: &[f64], radius: f64, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            Kind::Euclidean => {
                let n = norm(q);
                let s = if n > radius { radius / n } else { 1.0 };
                for (o, x) in out.iter_mut().zip(q) {
                    *o = s * x;
                }
            }
            Kind::L1 => {
                for (o, x) in out.iter_mut().zip(q) {
                    *o = x.clamp(-radius, radius);
                }
            }
            Kind::Linf => project_l1_ball(q, radius, out),
            Kind::Weighted(w) => project_ellipsoid(q, w, radius, out),
            _ => {
                return Err(Error::Unsupported(format!(
                    "no dual-ball projection for {:?}",
                    kind_name(&self.spec)
                )))
            }
        }
        Ok(())
    }

    /// Weights of a weighted l2 norm.
    pub fn weights(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Weighted(w) => Some(w),
            _ => None,
        }
    }

    pub fn has_dual_projection(&self) -> bool {
        matches!(self.kind, Kind::Euclidean | Kind::L1 | Kind::Linf | Kind::Weighted(_))
    }

    /// Equivalence constants, exact for analytic kinds, sampled otherwise.
    pub fn equivalence_constants(&self) -> EquivalenceConstants {
        let n = self.dim as f64;
        let exact = |c_minus, c_plus| EquivalenceConstants {
            c_minus,
            c_plus,
            samples: None,
        };
        match &self.kind {
            Kind::Euclidean => exact(1.0, 1.0),
            Kind::L1 => exact(1.0, n.sqrt()),
            Kind::Linf => exact(1.0 / n.sqrt(), 1.0),
            Kind::Lp(p) => {
                let c = n.powf(1.0 / p - 0.5);
                if *p >= 2.0 {
                    exact(c, 1.0)
                } else {
                    exact(1.0, c)
                }
            }
            Kind::Weighted(w) => {
                let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = w.iter().cloned().fold(0.0, f64::max);
                exact(lo.sqrt(), hi.sqrt())
            }
            Kind::Table(_) | Kind::Regularized { .. } => {
                let dirs = sphere_sample(self.dim);
                let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
                for d in &dirs {
                    let v = self.value(d);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                EquivalenceConstants {
                    c_minus: lo,
                    c_plus: hi,
                    samples: Some(dirs.len()),
                }
            }
        }
    }

    /// Schneider smoothing `phi_bar_eta` of an analytic anisotropy.
    pub fn schneider_smooth(&self, eta: f64) -> Result<Anisotropy> {
        Anisotropy::new(&AnisotropySpec::smoothed(
            self.analytic_base()?,
            eta,
            SmoothingStage::Schneider,
        ))
    }

    /// `phi_tilde_eta = sqrt(phi_bar_eta^2 + eta |p|^2)`.
    pub fn regularize(&self, eta: f64) -> Result<Anisotropy> {
        Anisotropy::new(&AnisotropySpec::smoothed(
            self.analytic_base()?,
            eta,
            SmoothingStage::Regularized,
        ))
    }

    /// The spliced square of a regularized anisotropy.
    pub fn spliced_square(&self) -> Result<SplicedSquare> {
        SplicedSquare::new(self.clone())
    }

    fn analytic_base(&self) -> Result<AnisotropySpec> {
        match &self.spec {
            AnisotropySpec::Smoothed { base, .. } => Ok((**base).clone()),
            s => Ok(s.clone()),
        }
    }

    /// Smoothing parameter of a smoothed kind.
    pub fn eta(&self) -> Option<f64> {
        match &self.spec {
            AnisotropySpec::Smoothed { eta, .. } => Some(*eta),
            _ => None,
        }
    }

    /// Access to the Schneider table behind a smoothed kind.
    pub fn table(&self) -> Option<&SphereTable> {
        match &self.kind {
            Kind::Table(t) | Kind::Regularized { table: t, .. } => Some(t),
            _ => None,
        }
    }
}

fn kind_name(spec: &AnisotropySpec) -> &'static str {
    match spec {
        AnisotropySpec::Euclidean { .. } => "euclidean",
        AnisotropySpec::L1 { .. } => "l1",
        AnisotropySpec::Linf { .. } => "linf",
        AnisotropySpec::Lp { .. } => "lp",
        AnisotropySpec::WeightedL2 { .. } => "weighted_l2",
        AnisotropySpec::Smoothed { .. } => "smoothed",
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project_l1_ball(q: &[f64], r: f64, out: &mut [f64]) {
    let s: f64 = q.iter().map(|x| x.abs()).sum();
    if s <= r {
        out.copy_from_slice(q);
        return;
    }
    let mut a: Vec<f64> = q.iter().map(|x| x.abs()).collect();
    a.sort_by(|x, y| y.total_cmp(x));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, v) in a.iter().enumerate() {
        cum += v;
        let t = (cum - r) / (i + 1) as f64;
        if *v > t {
            theta = t;
        }
    }
    for (o, x) in out.iter_mut().zip(q) {
        *o = sign0(*x) * (x.abs() - theta).max(0.0);
    }
}

fn project_ellipsoid(q: &[f64], w: &[f64], r: f64, out: &mut [f64]) {
    // {z : sum z_i^2 / w_i <= r^2}; z_i = q_i w_i / (w_i + mu)
    let level = |mu: f64| -> f64 {
        q.iter()
            .zip(w)
            .map(|(x, w)| x * x * w / ((w + mu) * (w + mu)))
            .sum::<f64>()
    };
    if level(0.0) <= r * r {
        out.copy_from_slice(q);
        return;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while level(hi) > r * r {
        hi *= 2.0;
    }
    // Newton from the left is monotone for this convex decreasing function;
    // bisection keeps it inside the bracket
    let mut mu = 0.0;
    for _ in 0..200 {
        let g = level(mu) - r * r;
        if g > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let dg: f64 = q
            .iter()
            .zip(w)
            .map(|(x, w)| -2.0 * x * x * w / (w + mu).powi(3))
            .sum();
        let mut next = mu - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - mu).abs() <= 1e-16 * (1.0 + mu) {
            mu = next;
            break;
        }
        mu = next;
    }
    for ((o, x), w) in out.iter_mut().zip(q).zip(w) {
        *o = x * w / (w + mu);
    }
    // guard against the last ulp landing outside
    let lev: f64 = out.iter().zip(w).map(|(z, w)| z * z / w).sum::<f64>().sqrt();
    if lev > r {
        let s = r / lev;
        out.iter_mut().for_each(|z| *z *= s);
    }
}

/// Deterministic unit-sphere sample: uniform angles in 2D, a Fibonacci
/// sphere in 3D, the two points in 1D.
pub fn sphere_sample(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..4096)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / 4096.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => fibonacci_sphere(16384),
        n => {
            let mut rng = SeedStream::new(0x5EED).rng();
            (0..4096)
                .map(|_| random_unit(&mut rng, n))
                .collect()
        }
    }
}

pub fn fibonacci_sphere(count: usize) -> Vec<Vec<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            vec![r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

pub(crate) fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&v);
        if r > 1e-8 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

/// Cubature nodes `z` and weights for `∫ g(z) rho_1(z) dz` where `rho_1` is
/// the radial shell bump supported in `1/2 <= |z| <= 1`.
fn shell_rule(dim: usize, res: SmoothingResolution) -> (Vec<Vec<f64>>, Vec<f64>) {
    let radial = Rule::gauss(res.radial, 0.5, 1.0);
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    let mut push = |z: Vec<f64>, w: f64| {
        pts.push(z);
        wts.push(w);
    };
    for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
        let wr = wr * bump(4.0 * r - 3.0) * r.powi(dim as i32 - 1);
        match dim {
            1 => {
                push(vec![r], 0.5 * wr);
                push(vec![-r], 0.5 * wr);
            }
            2 => {
                for k in 0..res.angular {
                    let t = 2.0 * PI * (k as f64 + 0.5) / res.angular as f64;
                    push(vec![r * t.cos(), r * t.sin()], wr / res.angular as f64);
                }
            }
            3 => {
                let (cz, wz) = gauss_legendre(res.polar);
                for (&c, &w) in cz.iter().zip(&wz) {
                    let s = (1.0 - c * c).sqrt();
                    for k in 0..res.angular {
                        let t = 2.0 * PI * (k as f64 + 0.5) / res.angular as f64;
                        push(
                            vec![r * s * t.cos(), r * s * t.sin(), r * c],
                            wr * w / res.angular as f64,
                        );
                    }
                }
            }
            _ => unreachable!("validated dim <= 3"),
        }
    }
    let total: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|w| *w /= total);
    (pts, wts)
}

#[derive(Debug)]
enum Layout {
    Line { plus: f64, minus: f64 },
    /// Periodic cubic spline in the angle; `curv` holds its second
    /// derivatives at the nodes.
    Circle { m: usize, curv: Vec<f64> },
    Octa { m: usize, faces: Vec<OctaFace> },
}

#[derive(Debug)]
struct OctaFace {
    signs: [f64; 3],
    up: Vec<[f64; 3]>,
    down: Vec<[f64; 3]>,
}

/// `phi_bar_eta` sampled on the unit sphere and extended cone-wise linearly.
#[derive(Debug)]
pub struct SphereTable {
    dim: usize,
    eta: f64,
    vertices: Vec<Vec<f64>>,
    values: Vec<f64>,
    layout: Layout,
    /// Closed-form evaluator that replaces the interpolant when available.
    exact: Option<AbsForms>,
}

type TableKey = (String, u64, SmoothingResolution);

fn table_cache() -> &'static Mutex<HashMap<TableKey, Arc<SphereTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<TableKey, Arc<SphereTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl SphereTable {
    fn cached(base: &AnisotropySpec, eta: f64, res: SmoothingResolution) -> Result<Arc<SphereTable>> {
        let key = (serde_json::to_string(base)?, eta.to_bits(), res);
        if let Some(t) = table_cache().lock().expect("table cache").get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(SphereTable::build(base, eta, res)?);
        table_cache()
            .lock()
            .expect("table cache")
            .entry(key)
            .or_insert_with(|| t.clone());
        Ok(t)
    }

    /// Tabulate the Schneider smoothing of `base` at scale `eta`.
    pub fn build(base: &AnisotropySpec, eta: f64, res: SmoothingResolution) -> Result<SphereTable> {
        let phi = Anisotropy::new(base)?;
        if !phi.is_analytic() {
            return Err(Error::Unsupported("Schneider smoothing needs an analytic base".into()));
        }
        let dim = phi.dim();
        let (z, w) = shell_rule(dim, res);
        let mut scratch = vec![0.0; dim];
        let exact = AbsForms::of(base, eta);
        let mut smooth = |dir: &[f64]| -> f64 {
            if let Some(f) = &exact {
                return f.value(dir);
            }
            // phi_bar(v) = |v| * phi_bar(v / |v|)
            let r = norm(dir);
            let mut acc = 0.0;
            for (zi, wi) in z.iter().zip(&w) {
                for k in 0..dim {
                    scratch[k] = dir[k] / r + eta * zi[k];
                }
                acc += wi * phi.value(&scratch);
            }
            r * acc
        };
        let (vertices, values, layout) = match dim {
            1 => {
                let plus = smooth(&[1.0]);
                let minus = smooth(&[-1.0]);
                (
                    vec![vec![1.0], vec![-1.0]],
                    vec![plus, minus],
                    Layout::Line { plus, minus },
                )
            }
            2 => {
                let mut m = res.circle_directions;
                if res.adaptive {
                    let want = (16.0 * PI / eta).ceil().min(32768.0) as usize;
                    m = m.max(want.next_power_of_two().min(32768));
                }
                let verts: Vec<Vec<f64>> = (0..m)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / m as f64;
                        vec![t.cos(), t.sin()]
                    })
                    .collect();
                let vals: Vec<f64> = verts.iter().map(|v| smooth(v)).collect();
                let curv = periodic_spline_curvatures(&vals);
                (verts, vals, Layout::Circle { m, curv })
            }
            3 => {
                let m = res.octa_subdivision;
                let mut verts = Vec::new();
                let mut vals = Vec::new();
                let mut faces = Vec::with_capacity(8);
                for f in 0..8 {
                    let signs = [
                        if f & 1 == 0 { 1.0 } else { -1.0 },
                        if f & 2 == 0 { 1.0 } else { -1.0 },
                        if f & 4 == 0 { 1.0 } else { -1.0 },
                    ];
                    let point = |i: usize, j: usize| -> [f64; 3] {
                        let mf = m as f64;
                        [
                            signs[0] * i as f64 / mf,
                            signs[1] * j as f64 / mf,
                            signs[2] * (m - i - j) as f64 / mf,
                        ]
                    };
                    let mut fv = vec![0.0; (m + 1) * (m + 1)];
                    for i in 0..=m {
                        for j in 0..=(m - i) {
                            let v = point(i, j);
                            let val = smooth(&v);
                            fv[i * (m + 1) + j] = val;
                            let r = norm(&v);
                            verts.push(v.iter().map(|x| x / r).collect());
                            vals.push(val / r);
                        }
                    }
                    let at = |i: usize, j: usize| fv[i * (m + 1) + j];
                    let mut up = vec![[0.0; 3]; m * m];
                    let mut down = vec![[0.0; 3]; m * m];
                    for i in 0..m {
                        for j in 0..(m - i) {
                            up[i * m + j] = solve3(
                                [point(i, j), point(i + 1, j), point(i, j + 1)],
                                [at(i, j), at(i + 1, j), at(i, j + 1)],
                            );
                            if i + j + 2 <= m {
                                down[i * m + j] = solve3(
                                    [point(i + 1, j), point(i, j + 1), point(i + 1, j + 1)],
                                    [at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)],
                                );
                            }
                        }
                    }
                    faces.push(OctaFace { signs, up, down });
                }
                (verts, vals, Layout::Octa { m, faces })
            }
            _ => unreachable!("validated dim <= 3"),
        };
        Ok(SphereTable {
            dim,
            eta,
            vertices,
            values,
            layout,
            exact,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Tabulated unit directions and the smoothed values there.
    pub fn samples(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.vertices, &self.values)
    }

    fn spacing(&self) -> f64 {
        match &self.layout {
            Layout::Line { .. } => 1.0,
            Layout::Circle { m, .. } => 2.0 * PI / *m as f64,
            Layout::Octa { m, .. } => 1.0 / *m as f64,
        }
    }

    fn best_vertex(&self, score: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut best = 0;
        let mut val = f64::NEG_INFINITY;
        for (k, v) in self.vertices.iter().enumerate() {
            let s = score(v);
            if s > val {
                val = s;
                best = k;
            }
        }
        self.vertices[best].clone()
    }

    fn gradient_of_cone(&self, p: &[f64]) -> [f64; 3] {
        match &self.layout {
            Layout::Line { plus, minus } => {
                if p[0] >= 0.0 {
                    [*plus, 0.0, 0.0]
                } else {
                    [-*minus, 0.0, 0.0]
                }
            }
            Layout::Circle { .. } => {
                let (sv, ds, _) = self.angular(p);
                let r = norm(p);
                let (c, si) = (p[0] / r, p[1] / r);
                [sv * c - ds * si, sv * si + ds * c, 0.0]
            }
            Layout::Octa { m, faces } => {
                let f = (p[0] < 0.0) as usize | ((p[1] < 0.0) as usize) << 1 | ((p[2] < 0.0) as usize) << 2;
                let face = &faces[f];
                debug_assert!(face.signs.iter().zip(p).all(|(s, x)| s * x >= 0.0));
                let a = [p[0].abs(), p[1].abs(), p[2].abs()];
                let l = a[0] + a[1] + a[2];
                let mf = *m as f64;
                let x = mf * a[0] / l;
                let y = mf * a[1] / l;
                let i = (x.floor() as usize).min(m - 1);
                let j = (y.floor() as usize).min(m - 1 - i);
                let (fx, fy) = (x - i as f64, y - j as f64);
                if fx + fy <= 1.0 || i + j + 2 > *m {
                    face.up[i * m + j]
                } else {
                    face.down[i * m + j]
                }
            }
        }
    }

    // spline value and its first two angle derivatives at the direction of p
    fn angular(&self, p: &[f64]) -> (f64, f64, f64) {
        let Layout::Circle { m, curv } = &self.layout else {
            unreachable!("angular spline only in dim 2")
        };
        let h = 2.0 * PI / *m as f64;
        let mut t = p[1].atan2(p[0]);
        if t < 0.0 {
            t += 2.0 * PI;
        }
        let k = ((t / h).floor() as usize).min(m - 1);
        let k1 = (k + 1) % m;
        let x = (t - k as f64 * h).clamp(0.0, h);
        let y = h - x;
        let (s0, s1, c0, c1) = (self.values[k], self.values[k1], curv[k], curv[k1]);
        let a = s0 / h - c0 * h / 6.0;
        let b = s1 / h - c1 * h / 6.0;
        (
            c0 * y.powi(3) / (6.0 * h) + c1 * x.powi(3) / (6.0 * h) + a * y + b * x,
            -c0 * y * y / (2.0 * h) + c1 * x * x / (2.0 * h) - a + b,
            (c0 * y + c1 * x) / h,
        )
    }

    /// Second derivative of the interpolant at `p != 0`, row-major. Zero
    /// inside the linear cones of the line and octahedral layouts.
    pub fn hessian_into(&self, p: &[f64], out: &mut [f64]) {
        if let Some(e) = &self.exact {
            return e.hessian_into(p, out);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        if let Layout::Circle { .. } = self.layout {
            let (sv, _, d2) = self.angular(p);
            let r = norm(p);
            let e = [-p[1] / r, p[0] / r];
            let k = (sv + d2) / r;
            for i in 0..2 {
                for j in 0..2 {
                    out[i * 2 + j] = k * e[i] * e[j];
                }
            }
        }
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        if p.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        if let Some(e) = &self.exact {
            return e.value(p);
        }
        if let Layout::Circle { .. } = self.layout {
            return norm(p) * self.angular(p).0;
        }
        let g = self.gradient_of_cone(p);
        p.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn grad_into(&self, p: &[f64], out: &mut [f64]) {
        if let Some(e) = &self.exact {
            return e.grad_into(p, out);
        }
        let g = self.gradient_of_cone(p);
        out.copy_from_slice(&g[..self.dim]);
    }

    /// C^1 away from the origin (spline or closed form).
    pub fn is_smooth(&self) -> bool {
        self.exact.is_some() || matches!(self.layout, Layout::Circle { .. } | Layout::Line { .. })
    }

    fn on_cone_boundary(&self, p: &[f64]) -> bool {
        if self.exact.is_some() {
            return false;
        }
        let eps = 1e-12;
        match &self.layout {
            Layout::Line { .. } => false,
            Layout::Circle { .. } => false,
            Layout::Octa { m, .. } => {
                let a = [p[0].abs(), p[1].abs(), p[2].abs()];
                let l = a[0] + a[1] + a[2];
                let mf = *m as f64;
                let x = mf * a[0] / l;
                let y = mf * a[1] / l;
                let frac = |v: f64| (v - v.round()).abs() < eps * mf;
                frac(x) || frac(y) || frac(x + y)
            }
        }
    }

    fn dual_vertices(&self, q: &[f64]) -> f64 {
        // the unit ball of a cone-linear gauge is the polytope spanned by
        // v_k / phi(v_k)
        self.vertices
            .iter()
            .zip(&self.values)
            .map(|(v, f)| dot(q, v) / f)
            .fold(0.0, f64::max)
    }
}

/// Kinds of the form `sum_i |a_i . x|` (l1; linf in the plane). Their
/// smoothing is `sum_i |a_i| |v| g(a_i . v / (|a_i| |v|))` with
/// `g(t) = E|t + eta Z_1| = eta G(t / eta)`, so value, gradient and Hessian
/// come from one scalar table and carry no quadrature noise from the kinks.
#[derive(Debug)]
struct AbsForms {
    eta: f64,
    /// unit normals and their lengths
    forms: Vec<(Vec<f64>, f64)>,
    g: &'static ShellTable,
}

impl AbsForms {
    fn of(base: &AnisotropySpec, eta: f64) -> Option<Self> {
        let forms: Vec<(Vec<f64>, f64)> = match base {
            AnisotropySpec::L1 { dim } if *dim == 2 || *dim == 3 => (0..*dim)
                .map(|i| {
                    let mut e = vec![0.0; *dim];
                    e[i] = 1.0;
                    (e, 1.0)
                })
                .collect(),
            // max(|x|, |y|) = (|x + y| + |x - y|) / 2
            AnisotropySpec::Linf { dim: 2 } => {
                let h = 0.5f64.sqrt();
                vec![(vec![h, h], h), (vec![h, -h], h)]
            }
            _ => return None,
        };
        Some(Self {
            eta,
            forms,
            g: ShellTable::get(base.dim()),
        })
    }

    // (g, g', g'', g - t g') at t, with g(t) = |t| + eta H(|t| / eta)
    fn g(&self, t: f64) -> (f64, f64, f64, f64) {
        let a = t.abs();
        let sg = if t < 0.0 { -1.0 } else { 1.0 };
        let s = a / self.eta;
        let (h, h1, h2) = self.g.eval(s);
        (
            a + self.eta * h,
            sg * (1.0 + h1),
            h2.max(0.0) / self.eta,
            (self.eta * (h - s * h1)).max(0.0),
        )
    }

    fn value(&self, v: &[f64]) -> f64 {
        let r = norm(v);
        if r == 0.0 {
            return 0.0;
        }
        self.forms.iter().map(|(a, len)| len * r * self.g(dot(a, v) / r).0).sum()
    }

    // gradient: sum len (g u + g' (a - c u)) with u = v / |v|, c = a.u
    fn grad_into(&self, v: &[f64], out: &mut [f64]) {
        let r = norm(v);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, len) in &self.forms {
            let c = dot(a, v) / r;
            let (_, g1, _, k) = self.g(c);
            for i in 0..v.len() {
                // g u + g' (a - c u) = (g - c g') u + g' a
                out[i] += len * (k * v[i] / r + g1 * a[i]);
            }
        }
    }

    // Hessian: sum len ((g - c g') (I - u u^T) + g'' b b^T) / |v|, b = a - c u
    fn hessian_into(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        let r = norm(v);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, len) in &self.forms {
            let c = dot(a, v) / r;
            let (_, _, g2, k) = self.g(c);
            for i in 0..n {
                let (ui, bi) = (v[i] / r, a[i] - c * v[i] / r);
                for j in 0..n {
                    let (uj, bj) = (v[j] / r, a[j] - c * v[j] / r);
                    let proj = if i == j { 1.0 } else { 0.0 } - ui * uj;
                    out[i * n + j] += len * (k * proj + g2 * bi * bj) / r;
                }
            }
        }
    }
}

/// `H(s) = E|s + Z_1| - |s|` for `Z` with the radial bump density in dim 2
/// or 3, as a quintic Hermite table on `[0, 1]` (zero beyond). Tabulating the
/// excess over `|s|` keeps the curvature free of cancellation where it is
/// tiny.
#[derive(Debug)]
struct ShellTable {
    f: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

const SHELL_INTERVALS: usize = 2048;

impl ShellTable {
    fn get(dim: usize) -> &'static ShellTable {
        static TWO: OnceLock<ShellTable> = OnceLock::new();
        static THREE: OnceLock<ShellTable> = OnceLock::new();
        match dim {
            2 => TWO.get_or_init(|| ShellTable::build(2)),
            _ => THREE.get_or_init(|| ShellTable::build(3)),
        }
    }

    fn build(dim: usize) -> Self {
        let nodes = 96;
        let weight = |r: f64| bump(4.0 * r - 3.0) * r.powi(dim as i32 - 1);
        let mass = Rule::gauss(nodes, 0.5, 1.0).integrate(weight);
        // sphere means of |s + r w_1| - s and its first two s-derivatives,
        // for 0 <= s < r, given r - s and sqrt(r^2 - s^2) computed stably
        let shell = |s: f64, r: f64, gap: f64, root: f64| -> [f64; 3] {
            if dim == 2 {
                let angle = root.atan2(s);
                [2.0 / PI * (root - s * angle), -2.0 / PI * angle, 2.0 / PI / root]
            } else {
                [gap * gap / (2.0 * r), -gap / r, 1.0 / r]
            }
        };
        let point = |s: f64| -> [f64; 3] {
            // shells with r <= s sit on one side of the kink and add nothing
            let split = s.max(0.5);
            let w = 1.0 - split;
            let rule = Rule::gauss(nodes, 0.0, 1.0);
            let mut acc = [0.0; 3];
            for (&x, &wx) in rule.nodes.iter().zip(&rule.weights) {
                // r = split + w x^2 absorbs the 1 / sqrt(r - s) of the curvature
                let r = split + w * x * x;
                let jac = 2.0 * w * x;
                let gap = if split == s { w * x * x } else { r - s };
                let root = (gap * (r + s)).sqrt();
                let a = shell(s, r, gap, root);
                let wr = weight(r) * wx;
                acc[0] += wr * jac * a[0];
                acc[1] += wr * jac * a[1];
                let curv = if dim == 2 && split == s {
                    // jac / root stays bounded as x -> 0
                    2.0 / PI * 2.0 * w.sqrt() / (r + s).sqrt()
                } else {
                    jac * a[2]
                };
                acc[2] += wr * curv;
            }
            [acc[0] / mass, acc[1] / mass, acc[2] / mass]
        };
        let mut f = Vec::with_capacity(SHELL_INTERVALS + 1);
        let mut d1 = Vec::with_capacity(SHELL_INTERVALS + 1);
        let mut d2 = Vec::with_capacity(SHELL_INTERVALS + 1);
        for k in 0..=SHELL_INTERVALS {
            let v = point(k as f64 / SHELL_INTERVALS as f64);
            f.push(v[0]);
            d1.push(v[1]);
            d2.push(v[2]);
        }
        Self { f, d1, d2 }
    }

    // (H, H', H'') at s >= 0
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        if s >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let h = 1.0 / SHELL_INTERVALS as f64;
        let k = ((s / h) as usize).min(SHELL_INTERVALS - 1);
        let x = (s - k as f64 * h) / h;
        let dy = self.f[k + 1] - self.f[k];
        let (p0, p1) = (h * self.d1[k], h * self.d1[k + 1]);
        let (e0, e1) = (h * h * self.d2[k], h * h * self.d2[k + 1]);
        let c = [
            self.f[k],
            p0,
            0.5 * e0,
            10.0 * dy - 6.0 * p0 - 4.0 * p1 - 0.5 * (3.0 * e0 - e1),
            -15.0 * dy + 8.0 * p0 + 7.0 * p1 + 0.5 * (3.0 * e0 - 2.0 * e1),
            6.0 * dy - 3.0 * p0 - 3.0 * p1 - 0.5 * (e0 - e1),
        ];
        let v = c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * (c[4] + x * c[5]))));
        let d = c[1] + x * (2.0 * c[2] + x * (3.0 * c[3] + x * (4.0 * c[4] + x * 5.0 * c[5])));
        let dd = 2.0 * c[2] + x * (6.0 * c[3] + x * (12.0 * c[4] + x * 20.0 * c[5]));
        (v, d / h, dd / (h * h))
    }
}

// second derivatives of the periodic cubic spline through equally spaced
// samples: M_{k-1} + 4 M_k + M_{k+1} = 6 (s_{k+1} - 2 s_k + s_{k-1}) / h^2,
// solved by Gauss-Seidel (the system is strictly diagonally dominant)
fn periodic_spline_curvatures(vals: &[f64]) -> Vec<f64> {
    let m = vals.len();
    let h = 2.0 * PI / m as f64;
    let rhs: Vec<f64> = (0..m)
        .map(|k| 6.0 * (vals[(k + 1) % m] - 2.0 * vals[k] + vals[(k + m - 1) % m]) / (h * h))
        .collect();
    let scale = rhs.iter().fold(0.0, |a: f64, b| a.max(b.abs()));
    let mut c = vec![0.0; m];
    for _ in 0..200 {
        let mut change: f64 = 0.0;
        for k in 0..m {
            let next = (rhs[k] - c[(k + m - 1) % m] - c[(k + 1) % m]) / 4.0;
            change = change.max((next - c[k]).abs());
            c[k] = next;
        }
        if change <= 1e-15 * scale {
            break;
        }
    }
    c
}

fn solve3(rows: [[f64; 3]; 3], rhs: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(rows);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut m = rows;
        for r in 0..3 {
            m[r][c] = rhs[r];
        }
        *o = det(m) / d;
    }
    out
}

/// The spliced square of a regularized anisotropy: a convex `C^2` function
/// equal to `phi_tilde^2` outside the ball of radius `eta` and to a
/// quadratic `alpha |p|^2 + beta` near the origin.
///
/// The two are joined by a smoothed maximum whose transition lies inside the
/// ball.
#[derive(Debug, Clone)]
pub struct SplicedSquare {
    phi: Anisotropy,
    eta: f64,
    alpha: f64,
    beta: f64,
    width: f64,
}

impl SplicedSquare {
    pub fn new(phi: Anisotropy) -> Result<Self> {
        let eta = match phi.spec() {
            AnisotropySpec::Smoothed {
                eta,
                stage: SmoothingStage::Regularized,
                ..
            } => *eta,
            _ => {
                return Err(Error::Precondition(
                    "spliced_square needs a regularized anisotropy".into(),
                ))
            }
        };
        let table = phi.table().expect("regularized kinds carry a table");
        // min of phi_tilde^2 over the tabulated sphere; the cone-linear
        // interpolant is never below its vertex minimum on the unit sphere
        let (_, vals) = table.samples();
        let min_bar = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let interp_floor = interpolation_floor(table);
        let m = (min_bar * interp_floor).powi(2) + eta;
        let alpha = 0.5 * m;
        let beta = 0.25 * eta * eta * m;
        Ok(Self {
            phi,
            eta,
            alpha,
            beta,
            width: 0.5 * beta,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Value at the origin.
    pub fn origin_value(&self) -> f64 {
        self.beta
    }

    fn parts(&self, p: &[f64]) -> (f64, f64, f64) {
        let v = self.phi.value(p);
        let a = v * v;
        let b = self.alpha * dot(p, p) + self.beta;
        (a, b, 0.5 * (a - b))
    }

    fn s(&self, x: f64) -> (f64, f64, f64) {
        let d = self.width;
        if x.abs() >= d {
            (x.abs(), x.signum(), 0.0)
        } else {
            let y = x / d;
            (
                d * (3.0 + 6.0 * y * y - y.powi(4)) / 8.0,
                (3.0 * y - y.powi(3)) / 2.0,
                (3.0 - 3.0 * y * y) / (2.0 * d),
            )
        }
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        let (a, b, x) = self.parts(p);
        0.5 * (a + b) + self.s(x).0
    }

    pub fn grad_into(&self, p: &[f64], out: &mut [f64]) {
        let (_, _, x) = self.parts(p);
        let (_, s1, _) = self.s(x);
        let n = p.len();
        let mut da = vec![0.0; n];
        if p.iter().any(|&v| v != 0.0) {
            self.phi.grad_into(p, &mut da).expect("nonzero p");
            let v = self.phi.value(p);
            da.iter_mut().for_each(|g| *g *= 2.0 * v);
        }
        for k in 0..n {
            let db = 2.0 * self.alpha * p[k];
            out[k] = 0.5 * (1.0 + s1) * da[k] + 0.5 * (1.0 - s1) * db;
        }
    }

    /// Generalised Hessian, row-major `n x n` (cone-wise in dim 3).
    pub fn hessian(&self, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        let eta = self.eta;
        let (_, _, x) = self.parts(p);
        let (_, s1, s2) = self.s(x);
        let mut gbar = vec![0.0; n];
        let mut vbar = 0.0;
        let nonzero = p.iter().any(|&v| v != 0.0);
        if nonzero {
            let table = self.phi.table().expect("table");
            table.grad_into(p, &mut gbar);
            vbar = table.value(p);
        }
        let mut hb = vec![0.0; n * n];
        if nonzero {
            self.phi.table().expect("table").hessian_into(p, &mut hb);
        }
        let mut da = vec![0.0; n];
        for k in 0..n {
            da[k] = if nonzero {
                2.0 * (vbar * gbar[k] + eta * p[k])
            } else {
                0.0
            };
        }
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d2a = 2.0 * (gbar[i] * gbar[j] + vbar * hb[i * n + j]) + if i == j { 2.0 * eta } else { 0.0 };
                let d2b = if i == j { 2.0 * self.alpha } else { 0.0 };
                let di = da[i] - 2.0 * self.alpha * p[i];
                let dj = da[j] - 2.0 * self.alpha * p[j];
                h[i * n + j] = 0.5 * (1.0 + s1) * d2a + 0.5 * (1.0 - s1) * d2b + 0.25 * s2 * di * dj;
            }
        }
        h
    }
}

// ratio between the minimum of a cone-linear gauge on the unit sphere and the
// minimum over its vertices (chords dip below the circle by cos(half-angle))
fn interpolation_floor(table: &SphereTable) -> f64 {
    match &table.layout {
        Layout::Line { .. } => 1.0,
        Layout::Circle { m, .. } => (PI / *m as f64).cos(),
        Layout::Octa { .. } => {
            // vertices on the octahedron; a face point has |v| >= 1/sqrt(3)
            // relative to its vertices at worst, use that crude bound
            1.0 / 3f64.sqrt()
        }
    }
}

/// Result of a Reshetnyak strict-convexity probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReshetnyakReport {
    pub strict: bool,
    pub trials: usize,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

/// Sample pairs `(p, q)`, `q` not a non-negative multiple of `p`, looking for
/// `phi(p + q) = phi(p) + phi(q)`.
pub fn reshetnyak_probe(phi: &Anisotropy, trials: usize, seed: u64) -> ReshetnyakReport {
    let n = phi.dim();
    let mut rng = SeedStream::new(seed).rng();
    let is_witness = |p: &[f64], q: &[f64]| -> bool {
        let (np, nq) = (norm(p), norm(q));
        if np == 0.0 || nq == 0.0 {
            return false;
        }
        // skip near-parallel pairs: below ~1e-3 rad the strict gap of a
        // round norm drops under the equality tolerance
        if 1.0 - dot(p, q) / (np * nq) < 5e-7 {
            return false;
        }
        let s: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + b).collect();
        let (fp, fq) = (phi.value(p), phi.value(q));
        (phi.value(&s) - fp - fq).abs() <= 1e-9 * (fp + fq)
    };
    // structured candidates first: coordinate directions and their sums
    let mut structured = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            p[i] = 1.0;
            q[j] = 1.0;
            if i != j {
                structured.push((p.clone(), q.clone()));
            }
            q[i] += 1.0;
            structured.push((p, q));
        }
    }
    let mut done = 0;
    for (p, q) in structured.into_iter().take(trials) {
        done += 1;
        if is_witness(&p, &q) {
            return ReshetnyakReport {
                strict: false,
                trials: done,
                witness: Some((p, q)),
            };
        }
    }
    while done < trials {
        done += 1;
        let p: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if is_witness(&p, &q) {
            return ReshetnyakReport {
                strict: false,
                trials: done,
                witness: Some((p, q)),
            };
        }
    }
    ReshetnyakReport {
        strict: true,
        trials: done,
        witness: None,
    }
}

/// Outcome of a strict-midpoint audit of `g o phi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MidpointAudit {
    pub pairs: usize,
    /// Smallest `(avg - mid) / |p - q|^2` over the sampled pairs.
    pub min_margin: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub strict: bool,
}

/// Strict-midpoint test of `g o phi` on sampled distinct pairs, including the
/// pairs derived from a Reshetnyak witness (rescaled to equal level).
pub fn strict_midpoint_audit(
    phi: &Anisotropy,
    g: impl Fn(f64) -> f64,
    pairs: usize,
    seed: u64,
) -> MidpointAudit {
    let n = phi.dim();
    let stream = SeedStream::new(seed);
    let mut rng = stream.named("pairs").rng();
    let field = |p: &[f64]| g(phi.value(p));
    let mut candidates: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let probe = reshetnyak_probe(phi, 1000, stream.named("probe").seed());
    if let Some((p, q)) = probe.witness {
        // equal-level pair on a flat piece of the unit ball
        let (fp, fq) = (phi.value(&p), phi.value(&q));
        let q: Vec<f64> = q.iter().map(|x| x * fp / fq).collect();
        candidates.push((p, q));
    }
    while candidates.len() < pairs {
        let p: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        candidates.push((p, q));
    }
    let mut min_margin = f64::INFINITY;
    let mut worst = None;
    for (p, q) in candidates.iter().take(pairs) {
        let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 == 0.0 {
            continue;
        }
        let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        let margin = (0.5 * (field(p) + field(q)) - field(&mid)) / d2;
        if margin < min_margin {
            min_margin = margin;
            worst = Some((p.clone(), q.clone()));
        }
    }
    MidpointAudit {
        pairs: pairs.min(candidates.len()),
        min_margin,
        worst_pair: worst,
        strict: min_margin > 1e-9,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shell_table_moments() {
        // G(0) = E|Z_1| = E|Z| times the mean of |w_1| over the sphere
        let weight = |r: f64, d: i32| bump(4.0 * r - 3.0) * r.powi(d - 1);
        for (dim, mean_abs) in [(2usize, 2.0 / PI), (3, 0.5)] {
            let d = dim as i32;
            let composite = |g: &dyn Fn(f64) -> f64| -> f64 {
                (0..32).map(|k| Rule::gauss(24, 0.5 + k as f64 / 64.0, 0.5 + (k + 1) as f64 / 64.0).integrate(g)).sum()
            };
            let mass = composite(&|r| weight(r, d));
            let mean_r = composite(&|r| r * weight(r, d)) / mass;
            let t = ShellTable::get(dim);
            assert_relative_eq!(t.eval(0.0).0, mean_abs * mean_r, max_relative = 1e-11);
            assert!(t.eval(1.0 - 1e-12).0.abs() < 1e-15);
            assert!((t.eval(0.0).1 + 1.0).abs() < 1e-12);
            // H'' is twice the density of Z_1 on [0, 1]
            let total: f64 = (0..64).map(|k| Rule::gauss(16, k as f64 / 64.0, (k + 1) as f64 / 64.0).integrate(|s| t.eval(s).2)).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn closed_form_l1_smoothing_matches_brute_quadrature() {
        let eta = 0.3;
        let exact = AbsForms::of(&AnisotropySpec::l1(2), eta).unwrap();
        let radial = Rule::gauss(64, 0.5, 1.0);
        let m = 20000;
        for th in [0.0, 0.2, 0.7, PI / 4.0, 2.0] {
            let v = [th.cos(), th.sin()];
            let mut num = 0.0;
            let mut den = 0.0;
            for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
                let w = wr * bump(4.0 * r - 3.0) * r;
                for k in 0..m {
                    let a = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                    num += w * ((v[0] + eta * r * a.cos()).abs() + (v[1] + eta * r * a.sin()).abs());
                    den += w;
                }
            }
            assert_relative_eq!(exact.value(&v), num / den, max_relative = 1e-7);
        }
    }

    #[test]
    fn closed_form_hessian_is_consistent_and_convex() {
        for (spec, eta) in [(AnisotropySpec::l1(2), 0.1), (AnisotropySpec::linf(2), 0.05), (AnisotropySpec::l1(3), 0.2)] {
            let phi = Anisotropy::new(&AnisotropySpec::smoothed(spec, eta, SmoothingStage::Schneider)).unwrap();
            let t = phi.table().unwrap();
            let n = t.dim();
            let mut rng = SeedStream::new(5).rng();
            for _ in 0..200 {
                let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut h = vec![0.0; n * n];
                t.hessian_into(&p, &mut h);
                let e = 1e-6;
                for a in 0..n {
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp[a] += e;
                    pm[a] -= e;
                    let (gp, gm) = (phi.grad(&pp).unwrap(), phi.grad(&pm).unwrap());
                    for b in 0..n {
                        let fd = (gp[b] - gm[b]) / (2.0 * e);
                        assert!((fd - h[b * n + a]).abs() < 1e-5 * (1.0 + h[b * n + a].abs()), "{p:?}");
                    }
                }
                let eig = nalgebra::DMatrix::from_row_slice(n, n, &h).symmetric_eigenvalues();
                assert!(eig.min() > -1e-12, "{eig}");
            }
        }
    }

    #[test]
    fn analytic_examples() {
        let l1 = Anisotropy::l1(2);
        assert_eq!(l1.eval(&[1.0, -2.0]).unwrap(), 3.0);
        assert_eq!(l1.grad(&[1.0, -2.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(l1.dual_eval(&[2.0, -1.0]).unwrap(), 2.0);
        let e = Anisotropy::euclidean(2);
        assert_eq!(e.eval(&[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(e.grad(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(e.dual_eval(&[3.0, 4.0]).unwrap(), 5.0);
        let w = Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap();
        assert_eq!(w.grad(&[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(w.dual_eval(&[2.0, 0.0]).unwrap(), 1.0);
        let c = w.equivalence_constants();
        assert_eq!((c.c_minus, c.c_plus), (1.0, 2.0));
        let c = l1.equivalence_constants();
        assert_eq!((c.c_minus, c.c_plus), (1.0, 2f64.sqrt()));
        for phi in [&l1, &e, &w] {
            assert_eq!(phi.eval(&[0.0, 0.0]).unwrap(), 0.0);
            assert!(matches!(phi.grad(&[0.0, 0.0]), Err(Error::Domain(_))));
        }
        assert!(matches!(
            e.eval(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn weighted_dual_matches_dense_sampling() {
        // oracle: sup of q.z over a dense sample of the unit sphere of phi
        let w = Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap();
        let q = [2.0, 0.0];
        let mut best: f64 = 0.0;
        for k in 0..200_000 {
            let t = 2.0 * PI * k as f64 / 200_000.0;
            let z = [t.cos(), t.sin()];
            let s = w.value(&z);
            best = best.max((q[0] * z[0] + q[1] * z[1]) / s);
        }
        assert_relative_eq!(w.dual(&q), best, epsilon = 1e-9);
    }

    #[test]
    fn projections_land_in_dual_ball() {
        let mut rng = SeedStream::new(11).rng();
        let kinds = [
            Anisotropy::euclidean(3),
            Anisotropy::l1(3),
            Anisotropy::linf(3),
            Anisotropy::weighted_l2(vec![4.0, 1.0, 0.25]).unwrap(),
        ];
        for phi in &kinds {
            for _ in 0..200 {
                let q: Vec<f64> = (0..3).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let mut z = vec![0.0; 3];
                phi.project_dual_ball(&q, 1.0, &mut z).unwrap();
                assert!(phi.dual(&z) <= 1.0 + 1e-12);
                // optimality: (q - z).(y - z) <= 0 for y in the ball
                for _ in 0..20 {
                    let y0: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let mut y = vec![0.0; 3];
                    phi.project_dual_ball(&y0, 1.0, &mut y).unwrap();
                    let s: f64 = (0..3).map(|k| (q[k] - z[k]) * (y[k] - z[k])).sum();
                    assert!(s <= 1e-9, "{:?} {s}", phi.spec());
                }
            }
        }
    }

    #[test]
    fn schneider_euclidean_is_round() {
        let e = Anisotropy::euclidean(2).schneider_smooth(0.1).unwrap();
        let v0 = e.value(&[1.0, 0.0]);
        assert!(v0 >= 1.0);
        let (_, vals) = e.table().unwrap().samples();
        for v in vals {
            assert!((v - v0).abs() < 1e-12);
        }
    }

    #[test]
    fn schneider_l1_self_check() {
        let fine = SmoothingResolution::default().doubled();
        let a = Anisotropy::l1(2).schneider_smooth(0.1).unwrap();
        let b = Anisotropy::with_resolution(
            &AnisotropySpec::smoothed(AnisotropySpec::l1(2), 0.1, SmoothingStage::Schneider),
            fine,
        )
        .unwrap();
        let va = a.value(&[1.0, 0.0]);
        let vb = b.value(&[1.0, 0.0]);
        assert!(va >= 1.0 && va <= 1.1);
        // the l1 integrand has kinks, so agreement is only to quadrature accuracy
        assert!((va - vb).abs() < 1e-4 * va, "{va} {vb}");
    }

    #[test]
    fn regularized_euclidean_formula() {
        let eta = 0.05;
        let r = Anisotropy::euclidean(2).regularize(eta).unwrap();
        let k = Anisotropy::euclidean(2).schneider_smooth(eta).unwrap().value(&[1.0, 0.0]);
        // exact on table directions, interpolation error in between
        let p = [-2.5, 0.0];
        assert_relative_eq!(r.value(&p), (k * k + eta).sqrt() * norm(&p), epsilon = 1e-12);
        let p = [0.3, -1.2];
        assert_relative_eq!(r.value(&p), (k * k + eta).sqrt() * norm(&p), max_relative = 1e-5);
        assert_eq!(r.value(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn regularized_l1_dominates_on_sweep() {
        let r = Anisotropy::l1(2).regularize(0.05).unwrap();
        let phi = Anisotropy::l1(2);
        for k in 0..360 {
            let t = (k as f64).to_radians();
            let p = [t.cos(), t.sin()];
            assert!(r.value(&p) >= phi.value(&p));
        }
    }

    #[test]
    fn spliced_square_matches_outside_ball() {
        let eta = 0.05;
        let r = Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap().regularize(eta).unwrap();
        let s = r.spliced_square().unwrap();
        for k in 0..64 {
            let t = 2.0 * PI * (k as f64 + 0.3) / 64.0;
            let p = [2.0 * eta * t.cos(), 2.0 * eta * t.sin()];
            let v = r.value(&p);
            assert_relative_eq!(s.value(&p), v * v, epsilon = 1e-15);
            let mut g = [0.0; 2];
            s.grad_into(&p, &mut g);
            let dg = r.grad(&p).unwrap();
            // finite-difference cross-check of the gradient
            let h = 1e-7;
            for i in 0..2 {
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let fd = (s.value(&pp) - s.value(&pm)) / (2.0 * h);
                assert!((g[i] - 2.0 * v * dg[i]).abs() < 1e-8);
                assert!((g[i] - fd).abs() < 1e-6, "{} {}", g[i], fd);
            }
        }
        assert!(s.origin_value() > 0.0);
        assert_eq!(s.value(&[0.0, 0.0]), s.origin_value());
    }

    #[test]
    fn reshetnyak_examples() {
        assert!(reshetnyak_probe(&Anisotropy::euclidean(2), 5000, 1).strict);
        let l1 = reshetnyak_probe(&Anisotropy::l1(2), 5000, 1);
        assert!(!l1.strict);
        let (p, q) = l1.witness.unwrap();
        assert_eq!((p, q), (vec![1.0, 0.0], vec![0.0, 1.0]));
        assert!(reshetnyak_probe(&Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap(), 5000, 1).strict);
    }

    #[test]
    fn weighted_strict_on_angle_grid() {
        // oracle: every pair of directions on a 1-degree grid, unequal
        // directions, several length ratios
        let w = Anisotropy::weighted_l2(vec![4.0, 1.0]).unwrap();
        let mut worst = f64::INFINITY;
        for a in 0..360 {
            for b in 0..360 {
                if a == b {
                    continue;
                }
                let (ta, tb) = ((a as f64).to_radians(), (b as f64).to_radians());
                for s in [0.5, 1.0, 2.0] {
                    let p = [ta.cos(), ta.sin()];
                    let q = [s * tb.cos(), s * tb.sin()];
                    let gap = w.value(&p) + w.value(&q) - w.value(&[p[0] + q[0], p[1] + q[1]]);
                    worst = worst.min(gap / (w.value(&p) + w.value(&q)));
                }
            }
        }
        assert!(worst > 1e-9, "{worst}");
    }
}
