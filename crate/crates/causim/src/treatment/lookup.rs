//! The expected log-square integral `E[log f^2]`, `f ~ N(mu, var)`, used by
//! the ELBO's data term.
//!
//! In dimensionless form the integral is
//! `E[log f^2] = log(var/2) - C + G(s)`, `s = mu^2 / (2 var)`,
//! with `C` the Euler-Mascheroni constant and `G` a smooth nonnegative
//! function with `G(0) = 0`. `G` is precomputed once on a log-spaced grid of
//! `s` in `[0, 1e3]` by adaptive quadrature and evaluated by linear
//! interpolation; beyond the grid the asymptotic expansion
//! `2 log|mu| - 1/(2s) - 3/(8 s^2)` takes over.

use once_cell::sync::Lazy;

use crate::error::{Error, Result};

const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
const S_MAX: f64 = 1e3;
const S_MIN_POSITIVE: f64 = 1e-6;
const NODES_PER_DECADE: usize = 200;
const VAR_FLOOR: f64 = 1e-12;

struct GTable {
    s_nodes: Vec<f64>,
    g_vals: Vec<f64>,
}

impl GTable {
    fn build() -> Self {
        let decades = (S_MAX / S_MIN_POSITIVE).log10().round() as usize;
        let n = decades * NODES_PER_DECADE + 1;
        let mut s_nodes = Vec::with_capacity(n + 1);
        s_nodes.push(0.0);
        for i in 0..n {
            let exp = S_MIN_POSITIVE.log10()
                + (S_MAX.log10() - S_MIN_POSITIVE.log10()) * i as f64 / (n - 1) as f64;
            s_nodes.push(10f64.powf(exp));
        }
        let g_vals = s_nodes.iter().map(|&s| g_by_quadrature(s)).collect();
        GTable { s_nodes, g_vals }
    }

    /// Interpolated value and segment slope at `s` (requires `s <= S_MAX`).
    fn value_and_slope(&self, s: f64) -> (f64, f64) {
        let idx = match self
            .s_nodes
            .binary_search_by(|node| node.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.s_nodes.len() - 2),
            Err(i) => (i - 1).min(self.s_nodes.len() - 2),
        };
        let (s0, s1) = (self.s_nodes[idx], self.s_nodes[idx + 1]);
        let (g0, g1) = (self.g_vals[idx], self.g_vals[idx + 1]);
        let slope = (g1 - g0) / (s1 - s0);
        (g0 + slope * (s - s0), slope)
    }
}

static G_TABLE: Lazy<GTable> = Lazy::new(GTable::build);

/// `G(s)` at a grid node via quadrature of the defining integral with
/// `mu = sqrt(2 s)`, `var = 1`.
fn g_by_quadrature(s: f64) -> f64 {
    let mu = (2.0 * s).sqrt();
    expected_log_square_quadrature(mu) - (0.5f64).ln() + EULER_MASCHERONI
}

/// Direct quadrature of `int log(f^2) N(f; mu, 1) df`.
///
/// Folded onto `[0, inf)`; the integrable log singularity at the origin is
/// removed by the substitution `f = u^2`.
fn expected_log_square_quadrature(mu: f64) -> f64 {
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let density = move |t: f64| phi(t - mu) + phi(t + mu);
    let cut = 0.5f64;
    let upper = mu + 42.0;
    // near zero: f = u^2, log(f^2) df = 8 u log(u) du
    let near = adaptive_simpson(
        &|u: f64| {
            if u == 0.0 {
                0.0
            } else {
                8.0 * u * u.ln() * density(u * u)
            }
        },
        0.0,
        cut.sqrt(),
        1e-12,
        60,
    );
    // split at the density peak so the initial Simpson nodes cannot miss it
    let mut cuts = vec![cut, mu - 6.0, mu - 1.0, mu + 1.0, mu + 6.0, upper];
    cuts.retain(|c| *c >= cut && *c <= upper);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let far: f64 = cuts
        .windows(2)
        .map(|w| adaptive_simpson(&|t: f64| 2.0 * t.ln() * density(t), w[0], w[1], 1e-12, 60))
        .sum();
    near + far
}

fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

pub(crate) fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson_rule(a, b, fa, fm, fb);
    adaptive_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// `E[log f^2]` for `f ~ N(mean, variance)`.
pub fn expected_log_square(mean: f64, variance: f64) -> Result<f64> {
    Ok(expected_log_square_grad(mean, variance)?.0)
}

/// Value together with its partial derivatives `(d/d mean, d/d variance)`,
/// consistent with the interpolated table so optimizers see the gradient of
/// the objective actually evaluated.
pub fn expected_log_square_grad(mean: f64, variance: f64) -> Result<(f64, f64, f64)> {
    if !mean.is_finite() || !variance.is_finite() {
        return Err(Error::invalid_argument(
            "expected_log_square: non-finite input",
        ));
    }
    if variance <= 0.0 {
        return Err(Error::invalid_argument(
            "expected_log_square: variance must be > 0",
        ));
    }
    let var = variance.max(VAR_FLOOR);
    let s = mean * mean / (2.0 * var);
    if s > S_MAX {
        // concentration regime: E -> 2 log|mu| with 1/s corrections
        let value = mean.abs().ln() * 2.0 - 0.5 / s - 0.375 / (s * s);
        let dv_ds = 0.5 / (s * s) + 0.75 / (s * s * s);
        let d_mean = 2.0 / mean + dv_ds * mean / var;
        let d_var = dv_ds * (-s / var);
        return Ok((value, d_mean, d_var));
    }
    let (g, slope) = G_TABLE.value_and_slope(s);
    let value = (var / 2.0).ln() - EULER_MASCHERONI + g;
    let d_mean = slope * mean / var;
    let d_var = 1.0 / var - slope * s / var;
    Ok((value, d_mean, d_var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_mean_unit_variance() {
        // log(1/2) - C; G(0) = 0 must emerge from the table
        let v = expected_log_square(0.0, 1.0).unwrap();
        assert_relative_eq!(v, (0.5f64).ln() - EULER_MASCHERONI, epsilon = 1e-9);
    }

    #[test]
    fn concentration_limit() {
        let v = expected_log_square(3.0, 0.01).unwrap();
        assert_relative_eq!(v, (9.0f64).ln(), epsilon = 1e-2);
    }

    #[test]
    fn sign_symmetry_is_exact() {
        for (m, var) in [(0.7, 0.3), (2.5, 1.9), (14.0, 0.05)] {
            let a = expected_log_square(m, var).unwrap();
            let b = expected_log_square(-m, var).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_nonpositive_variance() {
        assert!(expected_log_square(1.0, 0.0).is_err());
        assert!(expected_log_square(1.0, -1.0).is_err());
    }

    #[test]
    fn matches_direct_quadrature_off_grid() {
        // off-node values exercise the interpolation; scale invariance
        // exercises the dimensionless reduction
        for (mu, var) in [(0.33, 0.77), (1.9, 0.21), (0.05, 3.0), (6.0, 0.4)] {
            let table = expected_log_square(mu, var).unwrap();
            let sd = (var as f64).sqrt();
            let direct = expected_log_square_quadrature(mu / sd) + (var as f64).ln();
            assert_relative_eq!(table, direct, epsilon = 2e-5);
        }
    }

    #[test]
    fn asymptote_joins_table_smoothly() {
        // both branches around the grid edge must track the true integral
        for s in [999.0, 1001.0, 3000.0] {
            let mu = (2.0f64 * s * 0.01).sqrt();
            let v = expected_log_square(mu, 0.01).unwrap();
            let exact = expected_log_square_quadrature((2.0f64 * s).sqrt()) + (0.01f64).ln();
            assert_relative_eq!(v, exact, epsilon = 1e-4);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (mu, var) in [(0.4, 0.9), (2.2, 0.3), (0.0, 0.5)] {
            let (_, dm, dv) = expected_log_square_grad(mu, var).unwrap();
            let h = 1e-6;
            let fd_m = (expected_log_square(mu + h, var).unwrap()
                - expected_log_square(mu - h, var).unwrap())
                / (2.0 * h);
            let fd_v = (expected_log_square(mu, var + h).unwrap()
                - expected_log_square(mu, var - h).unwrap())
                / (2.0 * h);
            assert_relative_eq!(dm, fd_m, epsilon = 1e-4, max_relative = 1e-3);
            assert_relative_eq!(dv, fd_v, epsilon = 1e-4, max_relative = 1e-3);
        }
    }
}
