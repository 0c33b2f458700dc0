use super::{discrete_energy, PdConfig};
use crate::anisotropy::Anisotropy;
use crate::bvsignal::GridSignal;
use crate::error::{check_dim, Error, Result};
use crate::regularizer::{Profile, Regularizer, Variant};

/// Output of [`solve_exact_discrete`].
#[derive(Debug, Clone)]
pub struct PdSolution {
    pub u: GridSignal,
    /// Dual field on the `cells - 1` edges, row-major; a discrete
    /// Cahn-Hoffman field with `phi*(z) <= 1` for homogeneous `F`.
    pub z: Vec<f64>,
    /// Final duality gap.
    pub gap: f64,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Prox<'a> {
    phi: &'a Anisotropy,
    profile: &'a Profile,
    homogeneous: bool,
    n: usize,
    buf: Vec<f64>,
}

impl Prox<'_> {
    // prox of s F* at v, written into out
    fn dual(&mut self, v: &[f64], s: f64, out: &mut [f64]) -> Result<()> {
        if self.homogeneous {
            return self.phi.project_dual_ball(v, 1.0, out);
        }
        // Moreau: prox_{sF*}(v) = v - s prox_{F/s}(v/s)
        let x: Vec<f64> = v.iter().map(|a| a / s).collect();
        let mut p = vec![0.0; self.n];
        self.primal(&x, 1.0 / s, &mut p)?;
        for c in 0..self.n {
            out[c] = v[c] - s * p[c];
        }
        Ok(())
    }

    // prox of c f(phi(.)) at x: p = x - proj_{mu K}(x) with
    // mu = c f'(phi(p)), found by safeguarded regula falsi
    fn primal(&mut self, x: &[f64], c: f64, p: &mut [f64]) -> Result<()> {
        if let Some(w) = self.phi.weights() {
            self.primal_weighted(x, w, c, p);
            return Ok(());
        }
        let n = self.n;
        let t = |mu: f64, p: &mut [f64], buf: &mut [f64]| -> Result<f64> {
            self.phi.project_dual_ball(x, mu, buf)?;
            for k in 0..n {
                p[k] = x[k] - buf[k];
            }
            let r = self.phi.value(p);
            Ok(mu - c * self.profile.deriv(r))
        };
        let mut buf = std::mem::take(&mut self.buf);
        buf.resize(n, 0.0);
        let mut lo = c * self.profile.deriv(0.0);
        let mut hi = c * self.profile.f_inf();
        let mut tlo = t(lo, p, &mut buf)?;
        if tlo >= 0.0 {
            self.buf = buf;
            return Ok(());
        }
        let mut thi = t(hi, p, &mut buf)?;
        if thi <= 0.0 {
            self.buf = buf;
            return Ok(());
        }
        let mut side = 0i8;
        for it in 0..200 {
            let mid = if it % 4 == 3 {
                0.5 * (lo + hi)
            } else {
                let m = (lo * thi - hi * tlo) / (thi - tlo);
                if m > lo && m < hi {
                    m
                } else {
                    0.5 * (lo + hi)
                }
            };
            let tm = t(mid, p, &mut buf)?;
            if tm == 0.0 || hi - lo <= 1e-15 * hi.abs().max(1e-300) {
                break;
            }
            if tm < 0.0 {
                lo = mid;
                tlo = tm;
                if side == -1 {
                    thi *= 0.5;
                }
                side = -1;
            } else {
                hi = mid;
                thi = tm;
                if side == 1 {
                    tlo *= 0.5;
                }
                side = 1;
            }
        }
        self.buf = buf;
        Ok(())
    }

    // weighted l2: p_i = x_i / (1 + beta w_i) with beta phi(p) = c f'(phi(p));
    // the left side grows and the right side shrinks with beta
    fn primal_weighted(&self, x: &[f64], w: &[f64], c: f64, p: &mut [f64]) {
        let g = |beta: f64, p: &mut [f64]| {
            for k in 0..x.len() {
                p[k] = x[k] / (1.0 + beta * w[k]);
            }
            let s = self.phi.value(p);
            beta * s - c * self.profile.deriv(s)
        };
        let dual: f64 = x.iter().zip(w).map(|(a, w)| a * a / w).sum::<f64>().sqrt();
        if dual <= c * self.profile.deriv(0.0) {
            p.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let (mut lo, mut glo) = (0.0, g(0.0, p));
        if glo >= 0.0 {
            return;
        }
        let s0 = self.phi.value(x);
        let mut hi = (c * self.profile.deriv(s0) / s0).max(f64::MIN_POSITIVE);
        let mut ghi = g(hi, p);
        while ghi < 0.0 {
            lo = hi;
            glo = ghi;
            hi *= 4.0;
            ghi = g(hi, p);
        }
        let mut side = 0i8;
        for it in 0..200 {
            let mid = if it % 4 == 3 {
                0.5 * (lo + hi)
            } else {
                let m = (lo * ghi - hi * glo) / (ghi - glo);
                if m > lo && m < hi {
                    m
                } else {
                    0.5 * (lo + hi)
                }
            };
            let gm = g(mid, p);
            if gm == 0.0 || hi - lo <= 1e-15 * hi {
                break;
            }
            if gm < 0.0 {
                lo = mid;
                glo = gm;
                if side == -1 {
                    ghi *= 0.5;
                }
                side = -1;
            } else {
                hi = mid;
                ghi = gm;
                if side == 1 {
                    glo *= 0.5;
                }
                side = 1;
            }
        }
    }
}

/// Dual FISTA (with adaptive restart) for the exact discrete problem.
///
/// The primal iterate is recovered as
/// `u_i = h_i - lambda/dx (z_{i-1} - z_i)` with `z_{-1} = z_{N-1} = 0`.
/// Needs an anisotropy with a dual-ball projection (euclidean, l1, linf,
/// weighted l2).
pub fn solve_exact_discrete(h: &GridSignal, r: &Regularizer, lambda: f64, cfg: &PdConfig) -> Result<PdSolution> {
    if r.variant() != Variant::Exact {
        return Err(Error::Precondition("solve_exact_discrete takes the exact regularizer".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda must be positive, got {lambda}")));
    }
    check_dim(r.dim(), h.channels())?;
    let phi = r.anisotropy();
    if !phi.has_dual_projection() {
        return Err(Error::Unsupported(
            "the primal-dual solver needs euclidean, l1, linf or weighted_l2".into(),
        ));
    }
    let n = h.channels();
    let grid = *h.grid();
    let cells = grid.cells;
    let dx = grid.dx();
    let hv = h.values();
    let edges = cells - 1;
    let m = edges * n;
    let mut prox = Prox {
        phi,
        profile: r.profile(),
        homogeneous: r.is_homogeneous(),
        n,
        buf: Vec::new(),
    };
    let recover = |z: &[f64], u: &mut [f64]| {
        for i in 0..cells {
            for c in 0..n {
                let left = if i > 0 { z[(i - 1) * n + c] } else { 0.0 };
                let right = if i < edges { z[i * n + c] } else { 0.0 };
                u[i * n + c] = hv[i * n + c] - lambda / dx * (left - right);
            }
        }
    };
    let step = dx * dx / (4.0 * lambda);
    let mut z = vec![0.0; m];
    let mut z_old = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut u = vec![0.0; hv.len()];
    let mut v = vec![0.0; n];
    let mut theta = 1.0f64;
    let mut gap = f64::INFINITY;
    let mut energy = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        recover(&y, &mut u);
        std::mem::swap(&mut z, &mut z_old);
        for j in 0..edges {
            for c in 0..n {
                v[c] = y[j * n + c] + step * (u[(j + 1) * n + c] - u[j * n + c]) / dx;
            }
            prox.dual(&v, step, &mut z[j * n..(j + 1) * n])?;
        }
        // gradient-based restart
        let restart: f64 = (0..m).map(|k| (y[k] - z[k]) * (z[k] - z_old[k])).sum();
        if restart > 0.0 {
            theta = 1.0;
            y.copy_from_slice(&z);
        } else {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / next;
            theta = next;
            for k in 0..m {
                y[k] = z[k] + beta * (z[k] - z_old[k]);
            }
        }
        if iterations % cfg.check_every.max(1) == 0 || iterations == cfg.max_iter {
            recover(&z, &mut u);
            energy = discrete_energy(&u, hv, n, dx, r, lambda);
            gap = duality_gap(&u, &z, n, dx, r, lambda)?;
            if gap <= cfg.tol_gap * (1.0 + energy.abs()) {
                converged = true;
                break;
            }
        }
    }
    recover(&z, &mut u);
    if !converged {
        log::warn!("primal-dual solver stopped after {iterations} iterations with gap {gap:e}");
    }
    Ok(PdSolution {
        u: GridSignal::new(grid, n, u, Vec::new())?,
        z,
        gap,
        energy,
        iterations,
        converged,
    })
}

/// `lambda sum_j dx [F(q_j) + F*(z_j) - z_j . q_j]` with `q = Du`.
pub(crate) fn duality_gap(u: &[f64], z: &[f64], n: usize, dx: f64, r: &Regularizer, lambda: f64) -> Result<f64> {
    let edges = z.len() / n;
    let mut q = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..edges {
        for c in 0..n {
            q[c] = (u[(j + 1) * n + c] - u[j * n + c]) / dx;
        }
        let zj = &z[j * n..(j + 1) * n];
        // projections may overshoot the dual ball by rounding
        let s = r.anisotropy().dual(zj).min(r.profile().f_inf());
        let fstar = r.profile().conjugate(s)?;
        let pair: f64 = zj.iter().zip(&q).map(|(a, b)| a * b).sum();
        total += r.value(&q) + fstar - pair;
    }
    Ok(lambda * total * dx)
}
