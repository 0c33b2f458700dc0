use crate::bvsignal::GridSignal;
use crate::error::{Error, Result};

/// Exact minimizer of the scalar discrete total-variation problem.
///
/// Direct taut-string sweep: the string is pulled through the tube of radius
/// `lambda / dx` around the cumulative sums of `h`, with the segment being
/// built restarted whenever the funnel of admissible slopes collapses.
pub fn taut_string_oracle(h: &GridSignal, lambda: f64) -> Result<GridSignal> {
    if h.channels() != 1 {
        return Err(Error::Unsupported("the taut string is scalar only".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!("lambda must be non-negative, got {lambda}")));
    }
    let mu = lambda / h.grid().dx();
    let u = condat(h.values(), mu);
    h.without_atoms().with_values(u)
}

fn condat(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
    if n == 1 || lambda == 0.0 {
        x.copy_from_slice(y);
        return x;
    }
    let (mut k, mut k0, mut kminus, mut kplus) = (0usize, 0usize, 0usize, 0usize);
    let mut umin = lambda;
    let mut umax = -lambda;
    let mut vmin = y[0] - lambda;
    let mut vmax = y[0] + lambda;
    loop {
        while k == n - 1 {
            if umin < 0.0 {
                // close a segment at the lower level
                while k0 <= kminus {
                    x[k0] = vmin;
                    k0 += 1;
                }
                k = k0;
                kminus = k0;
                vmin = y[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                while k0 <= kplus {
                    x[k0] = vmax;
                    k0 += 1;
                }
                k = k0;
                kplus = k0;
                vmax = y[k0];
                umax = -lambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                while k0 <= k {
                    x[k0] = vmin;
                    k0 += 1;
                }
                return x;
            }
        }
        umin += y[k + 1] - vmin;
        if umin < -lambda {
            while k0 <= kminus {
                x[k0] = vmin;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = y[k0];
            vmax = vmin + 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        umax += y[k + 1] - vmax;
        if umax > lambda {
            while k0 <= kplus {
                x[k0] = vmax;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmax = y[k0];
            vmin = vmax - 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        k += 1;
        if umin >= lambda {
            kminus = k;
            vmin += (umin - lambda) / (kminus - k0 + 1) as f64;
            umin = lambda;
        }
        if umax <= -lambda {
            kplus = k;
            vmax += (umax + lambda) / (kplus - k0 + 1) as f64;
            umax = -lambda;
        }
    }
}
