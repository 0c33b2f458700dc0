//! Gauss-Legendre rules and the bump mollifier.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Cached [`gauss_legendre`] for orders up to 64.
pub fn gauss_legendre_cached(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    const MAX: usize = 64;
    static CACHE: [OnceLock<(Vec<f64>, Vec<f64>)>; MAX + 1] = [const { OnceLock::new() }; MAX + 1];
    assert!(n <= MAX, "cached rules go up to order {MAX}");
    CACHE[n].get_or_init(|| gauss_legendre(n))
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Unnormalised bump `exp(-1/(1-s^2))` on `(-1, 1)`, zero outside.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

/// A rule on `[lo, hi]` obtained by mapping a Gauss-Legendre rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn gauss(n: usize, lo: f64, hi: f64) -> Rule {
        let (x, w) = if n <= 64 { gauss_legendre_cached(n).clone() } else { gauss_legendre(n) };
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        Rule {
            nodes: x.iter().map(|t| mid + half * t).collect(),
            weights: w.iter().map(|t| half * t).collect(),
        }
    }

    pub fn integrate(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(x))
            .sum()
    }
}

/// Mass of the unnormalised bump on `[-1, 1]`.
pub fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        // composite rule; the bump is flat at the ends so this converges fast
        let pieces = 16;
        let mut total = 0.0;
        for k in 0..pieces {
            let lo = -1.0 + 2.0 * k as f64 / pieces as f64;
            let hi = lo + 2.0 / pieces as f64;
            total += Rule::gauss(24, lo, hi).integrate(bump);
        }
        total
    })
}

/// Reference nodes for integrals `∫_lo^hi g(s) ρ(s) ds` against the
/// normalised bump on `[-1, 1]`.
pub fn bump_integral(lo: f64, hi: f64, nodes: usize, mut g: impl FnMut(f64) -> f64) -> f64 {
    let lo = lo.max(-1.0);
    let hi = hi.min(1.0);
    if hi <= lo {
        return 0.0;
    }
    Rule::gauss(nodes, lo, hi).integrate(|s| g(s) * bump(s)) / bump_mass()
}
