//! Variational fitting of the treatment model: gradient ascent on
//! `(m, chol(S))` with a backtracking step, kernel hyperparameters fixed.
//!
//! With the inducing inputs frozen, every ELBO matrix (`K_zz`, summed
//! `Phi`/`Psi`, per-event projections) is a constant, so each iteration is a
//! handful of `M x M` products. Gradients of the integral and KL terms are
//! closed-form; the data term's derivative comes from the lookup table's
//! interpolation slope, i.e. the exact gradient of the objective being
//! evaluated.

use nalgebra::{DMatrix, DVector};

use crate::data::DayTrajectory;
use crate::error::{Error, Result};

use super::elbo::{day_constants, elbo_at, DayConstants};
use super::lookup::expected_log_square_grad;
use super::{TreatmentModel, VariationalState};

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iters: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 250,
            step_size: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct FitResult {
    pub model: TreatmentModel,
    /// ELBO value after every accepted step, starting at the initial state.
    pub trace: Vec<f64>,
}

struct Gradient {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

fn gradient(
    model: &TreatmentModel,
    constants: &[DayConstants],
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
) -> Result<Gradient> {
    let cache = model.cache()?;
    let beta0 = model.config.beta0;
    let m = mean.len();
    let cov = chol * chol.transpose();
    let alpha = cache.kzz_chol.solve(mean);

    let mut g_mean = DVector::zeros(m);
    let mut g_cov = DMatrix::zeros(m, m); // dL/dS as a symmetric matrix

    for day in constants {
        for (a, c) in &day.events {
            let mu = beta0 + a.dot(mean);
            let lt_a = chol.transpose() * a;
            let raw_var = c + lt_a.norm_squared();
            let var = raw_var.max(1e-12);
            let (_, d_mu, d_var) = expected_log_square_grad(mu, var)?;
            g_mean.axpy(d_mu, a, 1.0);
            if raw_var > 1e-12 {
                // d var / d S = a a^T
                g_cov.ger(d_var, a, a, 1.0);
            }
        }
        // integral term (subtracted): mu part 2 K^-1 Psi K^-1 m + 2 b K^-1 Phi,
        // S part K^-1 Psi K^-1
        let p = cache.kzz_inv.clone() * &day.psi_sum * &cache.kzz_inv;
        g_mean -= 2.0 * (&p * mean) + 2.0 * beta0 * (&cache.kzz_inv * &day.phi_sum);
        g_cov -= &p;
    }

    // KL (subtracted): d/dm = K^-1 m, d/dS = (K^-1 - S^-1)/2
    g_mean -= &alpha;
    let s_chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("S lost positive definiteness"))?;
    let s_inv = s_chol.inverse();
    g_cov -= 0.5 * (&cache.kzz_inv - &s_inv);

    // chain rule S = L L^T: dL/dL = 2 sym(dL/dS) L, lower triangle only
    let mut g_chol = 2.0 * g_cov * chol;
    for i in 0..m {
        for j in (i + 1)..m {
            g_chol[(i, j)] = 0.0;
        }
    }
    Ok(Gradient {
        mean: g_mean,
        chol: g_chol,
    })
}

/// Maximizes the ELBO over the variational parameters. Hyperparameters and
/// inducing inputs stay fixed. The returned trace is non-decreasing; the
/// final ELBO is never below the initial one.
///
/// The ascent runs in prior-whitened coordinates
/// `m = L_K m~`, `chol(S) = L_K L~` with `L_K = chol(K_zz)`, where the KL
/// term is perfectly conditioned; plain gradient steps crawl badly in the
/// raw parametrization.
pub fn fit(model: &TreatmentModel, dataset: &[DayTrajectory], opt: &FitOptions) -> Result<FitResult> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("fit: dataset must be nonempty"));
    }
    let constants: Vec<DayConstants> = dataset
        .iter()
        .map(|d| day_constants(model, d))
        .collect::<Result<_>>()?;

    let lk = model.cache()?.kzz_chol.l();
    let m = model.vstate.num_inducing();
    let mut wm = lk
        .solve_lower_triangular(&model.vstate.mean)
        .ok_or_else(|| Error::numerical("singular K_zz factor"))?;
    let mut wl = lk
        .solve_lower_triangular(&model.vstate.cov_chol)
        .ok_or_else(|| Error::numerical("singular K_zz factor"))?;
    let to_raw = |wm: &DVector<f64>, wl: &DMatrix<f64>| (&lk * wm, &lk * wl);

    let (mean0, chol0) = to_raw(&wm, &wl);
    let mut value = elbo_at(model, &constants, &mean0, &chol0)?.value();
    if !value.is_finite() {
        return Err(Error::numerical(
            "non-finite ELBO at iteration 0 (initial state)",
        ));
    }
    let mut trace = vec![value];
    let mut step = opt.step_size;
    let mut best = (wm.clone(), wl.clone(), value);

    for iter in 0..opt.max_iters {
        let (mean, chol) = to_raw(&wm, &wl);
        let grad = gradient(model, &constants, &mean, &chol)?;
        if !grad.mean.iter().all(|v| v.is_finite()) || !grad.chol.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite ELBO gradient at iteration {iter}"
            )));
        }
        // chain rule into whitened coordinates
        let g_wm = lk.transpose() * &grad.mean;
        let mut g_wl = lk.transpose() * &grad.chol;
        for i in 0..m {
            for j in (i + 1)..m {
                g_wl[(i, j)] = 0.0;
            }
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand_wm = &wm + step * &g_wm;
            let cand_wl = &wl + step * &g_wl;
            let (cand_mean, cand_chol) = to_raw(&cand_wm, &cand_wl);
            match elbo_at(model, &constants, &cand_mean, &cand_chol) {
                Ok(parts) if parts.value().is_finite() && parts.value() > value => {
                    wm = cand_wm;
                    wl = cand_wl;
                    value = parts.value();
                    step *= 1.3;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        if value > best.2 {
            best = (wm.clone(), wl.clone(), value);
        }
        trace.push(value);
    }

    let (mean, chol) = to_raw(&best.0, &best.1);
    let fitted = TreatmentModel::new(
        model.config.clone(),
        VariationalState {
            inducing: model.vstate.inducing.clone(),
            mean,
            cov_chol: chol,
        },
        model.mark_model.clone(),
        model.policy_label.clone(),
    )?;
    Ok(FitResult {
        model: fitted,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DayTrajectory, Event};
    use crate::treatment::{IntensityComponents, MarkModel, TreatmentConfig};
    use approx::assert_relative_eq;

    fn dataset() -> Vec<DayTrajectory> {
        vec![
            DayTrajectory {
                day_length: 24.0,
                treatments: vec![Event::new(8.0, 30.0), Event::new(13.0, 45.0), Event::new(19.0, 25.0)],
                outcomes: (0..12).map(|i| Event::new(2.0 * i as f64 + 1.0, 5.3)).collect(),
            },
            DayTrajectory {
                day_length: 24.0,
                treatments: vec![Event::new(7.0, 35.0), Event::new(12.0, 50.0)],
                outcomes: (0..12).map(|i| Event::new(2.0 * i as f64 + 0.9, 5.6)).collect(),
            },
        ]
    }

    fn init_model() -> TreatmentModel {
        let cfg = TreatmentConfig {
            components: IntensityComponents::BAO,
            num_inducing: 8,
            ..Default::default()
        };
        let mark = MarkModel::default_daily(4.0, 1.0, 1.0)
            .unwrap()
            .fit(&dataset());
        TreatmentModel::init(cfg, "pi", &dataset(), mark).unwrap()
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let model = init_model();
        let opt = FitOptions {
            max_iters: 0,
            ..Default::default()
        };
        let res = fit(&model, &dataset(), &opt).unwrap();
        assert_eq!(res.model.vstate.mean, model.vstate.mean);
        assert_eq!(res.model.vstate.cov_chol, model.vstate.cov_chol);
        assert_eq!(res.trace.len(), 1);
    }

    #[test]
    fn elbo_improves_and_trace_is_monotone() {
        let model = init_model();
        let data = dataset();
        let before = model.elbo(&data).unwrap().value();
        let res = fit(&model, &data, &FitOptions::default()).unwrap();
        let after = res.model.elbo(&data).unwrap().value();
        assert!(after >= before - 1e-9, "after {after} before {before}");
        assert!(after > before + 1.0, "fit should improve meaningfully");
        for w in res.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        // final value matches the independently recomputed ELBO
        assert_relative_eq!(after, *res.trace.last().unwrap(), epsilon = 1e-9);
        // S stays SPD
        assert!(res.model.vstate.cov().cholesky().is_some());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = init_model();
        let data = dataset();
        let constants: Vec<_> = data.iter().map(|d| day_constants(&model, d).unwrap()).collect();
        let mean = DVector::from_fn(8, |i, _| 0.1 * (i as f64).sin());
        let mut chol = model.vstate.cov_chol.clone() * 0.8;
        chol[(3, 1)] += 0.05;
        let g = gradient(&model, &constants, &mean, &chol).unwrap();
        let f = |mv: &DVector<f64>, cv: &DMatrix<f64>| {
            elbo_at(&model, &constants, mv, cv).unwrap().value()
        };
        let h = 1e-6;
        for idx in [0usize, 3, 7] {
            let mut mp = mean.clone();
            let mut mm = mean.clone();
            mp[idx] += h;
            mm[idx] -= h;
            let fd = (f(&mp, &chol) - f(&mm, &chol)) / (2.0 * h);
            assert_relative_eq!(g.mean[idx], fd, epsilon = 1e-4, max_relative = 5e-3);
        }
        for (i, j) in [(0usize, 0usize), (4, 2), (7, 7)] {
            let mut cp = chol.clone();
            let mut cm = chol.clone();
            cp[(i, j)] += h;
            cm[(i, j)] -= h;
            let fd = (f(&mean, &cp) - f(&mean, &cm)) / (2.0 * h);
            assert_relative_eq!(g.chol[(i, j)], fd, epsilon = 1e-4, max_relative = 5e-3);
        }
    }
}
