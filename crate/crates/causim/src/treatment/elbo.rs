//! ELBO of the treatment model and its closed-form kernel integrals.
//!
//! Over an interval with frozen history, every active kernel component is a
//! Gaussian bump in absolute time, so `Phi_n(z) = int K(z, r(tau)) dtau` and
//! `Psi_n(z, z') = int K(z, r(tau)) K(r(tau), z') dtau` reduce to erf
//! expressions (for products, via the Gaussian product identity). The ELBO
//! is `sum_days [data term - integral term] - KL[q(u) || p(u)]`.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erf;

use crate::data::{DayTrajectory, EventHistory};
use crate::error::{Error, Result};
use crate::kernels::EventSlot;

use super::lookup::expected_log_square;
use super::{retrieve_inputs, TreatmentModel};

/// Decomposed ELBO: `value = data_term - integral_term - kl_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub data_term: f64,
    pub integral_term: f64,
    pub kl_term: f64,
}

impl ElboParts {
    pub fn value(&self) -> f64 {
        self.data_term - self.integral_term - self.kl_term
    }
}

/// `int_a^b exp(-(tau - c)^2 / alpha) dtau` via erf.
fn gauss_integral(c: f64, alpha: f64, a: f64, b: f64) -> f64 {
    let root = alpha.sqrt();
    0.5 * (std::f64::consts::PI * alpha).sqrt() * (erf((b - c) / root) - erf((a - c) / root))
}

/// `int_a^b exp(-(tau-c1)^2/a1) exp(-(tau-c2)^2/a2) dtau` by completing the
/// square: a Gaussian decay in `c1 - c2` times another erf window.
fn gauss_product_integral(c1: f64, a1: f64, c2: f64, a2: f64, a: f64, b: f64) -> f64 {
    let sum = a1 + a2;
    let d = c1 - c2;
    let decay = (-d * d / sum).exp();
    if decay == 0.0 {
        return 0.0;
    }
    let abar = a1 * a2 / sum;
    let cbar = (a2 * c1 + a1 * c2) / sum;
    decay * gauss_integral(cbar, abar, a, b)
}

/// One kernel component's view over an interval with frozen history: the
/// map `z -> (amplitude, center)` of its Gaussian bump in absolute time.
struct FrozenComponent {
    /// time-SE denominator
    alpha: f64,
    /// component variance
    gamma: f64,
    /// absolute time of the slot's frozen event; `None` for the baseline
    event_time: Option<f64>,
    event_mark: f64,
    mark_lengthscale: Option<f64>,
    /// selects the matching slot in an inducing input
    slot: SlotSelector,
}

#[derive(Clone, Copy)]
enum SlotSelector {
    Baseline,
    Treatment(usize),
    Outcome(usize),
}

impl FrozenComponent {
    /// Amplitude and center of `K_p(z, r(tau))` as a function of absolute
    /// time; `None` when the inducing slot is a placeholder.
    fn bump(&self, z: &crate::kernels::RegressiveInput) -> Option<(f64, f64)> {
        match self.slot {
            SlotSelector::Baseline => Some((self.gamma, z.absolute_time)),
            SlotSelector::Treatment(i) | SlotSelector::Outcome(i) => {
                let slots = if matches!(self.slot, SlotSelector::Treatment(_)) {
                    &z.last_treatments
                } else {
                    &z.last_outcomes
                };
                let EventSlot::Present { rel_time, mark } = slots[i] else {
                    return None;
                };
                let mut amp = self.gamma;
                if let Some(ml) = self.mark_lengthscale {
                    let dm = mark - self.event_mark;
                    amp *= crate::kernels::se_d2(dm * dm, ml);
                }
                let event = self.event_time.expect("slot components carry an event");
                Some((amp, event + rel_time))
            }
        }
    }
}

/// Components active over `[t0, ...]` given the history frozen at `t0`
/// (events at exactly `t0` count as past). Slots with no past event are
/// dropped entirely: their indicator is zero on the history side.
fn frozen_components(model: &TreatmentModel, history: &EventHistory, t0: f64) -> Vec<FrozenComponent> {
    let kernel = &model.cache().expect("cache built at construction").kernel;
    let mut comps = Vec::new();
    if let Some((var, ls)) = kernel.baseline {
        comps.push(FrozenComponent {
            alpha: ls,
            gamma: var,
            event_time: None,
            event_mark: 0.0,
            mark_lengthscale: None,
            slot: SlotSelector::Baseline,
        });
    }
    let mut add_slots = |events: &[crate::data::Event],
                         params: &[crate::kernels::SlotParams],
                         mk: fn(usize) -> SlotSelector| {
        let n = events.partition_point(|e| e.time <= t0);
        for (i, p) in params.iter().enumerate() {
            if i < n {
                let e = &events[n - 1 - i];
                comps.push(FrozenComponent {
                    alpha: p.time_lengthscale,
                    gamma: p.variance,
                    event_time: Some(e.time),
                    event_mark: e.value,
                    mark_lengthscale: p.mark_lengthscale,
                    slot: mk(i),
                });
            }
        }
    };
    add_slots(&history.treatments, &kernel.treatment_slots, SlotSelector::Treatment);
    add_slots(&history.outcomes, &kernel.outcome_slots, SlotSelector::Outcome);
    comps
}

fn check_interval(history: &EventHistory, t0: f64, t1: f64) -> Result<()> {
    if !(t0 <= t1) {
        return Err(Error::invalid_argument("interval start must be <= end"));
    }
    let inside = |events: &[crate::data::Event]| {
        events.iter().any(|e| e.time > t0 && e.time < t1)
    };
    if inside(&history.treatments) || inside(&history.outcomes) {
        return Err(Error::invalid_argument(
            "phi/psi require a history with no events strictly inside the interval",
        ));
    }
    Ok(())
}

/// `Phi_n(z) = int_{t0}^{t1} K(z, r(tau)) dtau` per inducing point.
pub(crate) fn phi_vector(
    model: &TreatmentModel,
    t0: f64,
    t1: f64,
    history: &EventHistory,
) -> Result<DVector<f64>> {
    check_interval(history, t0, t1)?;
    let m = model.vstate.num_inducing();
    if t0 == t1 {
        return Ok(DVector::zeros(m));
    }
    let comps = frozen_components(model, history, t0);
    let mut phi = DVector::zeros(m);
    for (j, z) in model.vstate.inducing.iter().enumerate() {
        let mut acc = 0.0;
        for comp in &comps {
            if let Some((amp, center)) = comp.bump(z) {
                acc += amp * gauss_integral(center, comp.alpha, t0, t1);
            }
        }
        phi[j] = acc;
    }
    Ok(phi)
}

/// `Psi_n(z, z') = int_{t0}^{t1} K(z, r(tau)) K(r(tau), z') dtau`.
pub(crate) fn psi_matrix(
    model: &TreatmentModel,
    t0: f64,
    t1: f64,
    history: &EventHistory,
) -> Result<DMatrix<f64>> {
    check_interval(history, t0, t1)?;
    let m = model.vstate.num_inducing();
    if t0 == t1 {
        return Ok(DMatrix::zeros(m, m));
    }
    let comps = frozen_components(model, history, t0);
    // bumps[p][j] = (amplitude, center) of component p at inducing point j
    let bumps: Vec<Vec<Option<(f64, f64)>>> = comps
        .iter()
        .map(|c| model.vstate.inducing.iter().map(|z| c.bump(z)).collect())
        .collect();
    let mut psi = DMatrix::zeros(m, m);
    for j in 0..m {
        for k in 0..=j {
            let mut acc = 0.0;
            for (p, cp) in comps.iter().enumerate() {
                let Some((amp_p, c_p)) = bumps[p][j] else { continue };
                for (q, cq) in comps.iter().enumerate() {
                    let Some((amp_q, c_q)) = bumps[q][k] else { continue };
                    acc += amp_p
                        * amp_q
                        * gauss_product_integral(c_p, cp.alpha, c_q, cq.alpha, t0, t1);
                }
            }
            psi[(j, k)] = acc;
            psi[(k, j)] = acc;
        }
    }
    Ok(psi)
}

/// `int_{t0}^{t1} K(r(tau), r(tau)) dtau`: variances of the baseline and of
/// every slot populated in the frozen history, times the interval length.
fn diag_integral(model: &TreatmentModel, history: &EventHistory, t0: f64, t1: f64) -> f64 {
    let comps = frozen_components(model, history, t0);
    comps.iter().map(|c| c.gamma).sum::<f64>() * (t1 - t0)
}

/// Per-day ELBO pieces that depend on the variational state only through
/// precomputable constants.
pub(crate) struct DayConstants {
    /// summed `Psi_n` over the day's event partition
    pub psi_sum: DMatrix<f64>,
    /// summed `Phi_n`
    pub phi_sum: DVector<f64>,
    /// summed diagonal integrals plus `beta0^2 * T`
    pub const_term: f64,
    /// per treatment event: `a_n = K_zz^{-1} k_zx` and prior residual
    /// `c_n = K_xx - k_zx^T a_n`
    pub events: Vec<(DVector<f64>, f64)>,
}

pub(crate) fn day_constants(model: &TreatmentModel, day: &DayTrajectory) -> Result<DayConstants> {
    day.validate("elbo input")?;
    let cache = model.cache()?;
    let m = model.vstate.num_inducing();
    let history = EventHistory::from_day(day);
    let mut psi_sum = DMatrix::zeros(m, m);
    let mut phi_sum = DVector::zeros(m);
    let mut const_term = model.config.beta0 * model.config.beta0 * day.day_length;
    let partition = day.event_partition();
    for w in partition.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        psi_sum += psi_matrix(model, t0, t1, &history)?;
        phi_sum += phi_vector(model, t0, t1, &history)?;
        const_term += diag_integral(model, &history, t0, t1);
    }
    let mut events = Vec::with_capacity(day.treatments.len());
    for e in &day.treatments {
        let x = retrieve_inputs(&history, e.time, &model.config)?;
        let k = model.kvec(&x)?;
        let a = cache.kzz_chol.solve(&k);
        let c = cache.kernel.diag(&x) - k.dot(&a);
        events.push((a, c));
    }
    Ok(DayConstants {
        psi_sum,
        phi_sum,
        const_term,
        events,
    })
}

/// ELBO terms evaluated at an arbitrary variational state `(mean, chol)`;
/// `constants` must come from the same model and dataset.
pub(crate) fn elbo_at(
    model: &TreatmentModel,
    constants: &[DayConstants],
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
) -> Result<ElboParts> {
    let cache = model.cache()?;
    let beta0 = model.config.beta0;
    let cov = chol * chol.transpose();
    let alpha = cache.kzz_chol.solve(mean);

    let mut data_term = 0.0;
    let mut integral_term = 0.0;
    for day in constants {
        for (a, c) in &day.events {
            let mu = beta0 + a.dot(mean);
            let lt_a = chol.transpose() * a;
            let var = (c + lt_a.norm_squared()).max(1e-12);
            data_term += expected_log_square(mu, var)?;
        }
        // int E[lambda] = int mu^2 + int var + 2 beta0 int mu + beta0^2 T,
        // with int var = int K_xx - tr(K^-1 Psi) + tr(K^-1 S K^-1 Psi);
        // const_term carries int K_xx + beta0^2 T.
        let pm = cache.kzz_inv.clone() * &day.psi_sum * &cache.kzz_inv;
        let mean_sq = (&day.psi_sum * &alpha).dot(&alpha);
        integral_term += mean_sq - cache.kzz_inv.dot(&day.psi_sum) + pm.dot(&cov)
            + 2.0 * beta0 * day.phi_sum.dot(&alpha)
            + day.const_term;
    }

    let m = model.vstate.num_inducing() as f64;
    let logdet_s = 2.0
        * chol
            .diagonal()
            .iter()
            .map(|v| v.abs().ln())
            .sum::<f64>();
    let kl_term = 0.5
        * (cache.kzz_inv.dot(&cov) + mean.dot(&alpha) - m + cache.logdet_kzz - logdet_s);
    Ok(ElboParts {
        data_term,
        integral_term,
        kl_term,
    })
}

/// Full ELBO over a dataset of day trajectories.
pub(crate) fn elbo(model: &TreatmentModel, dataset: &[DayTrajectory]) -> Result<ElboParts> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("elbo: dataset must be nonempty"));
    }
    let constants: Vec<DayConstants> = dataset
        .iter()
        .map(|d| day_constants(model, d))
        .collect::<Result<_>>()?;
    let parts = elbo_at(model, &constants, &model.vstate.mean, &model.vstate.cov_chol)?;
    if !parts.value().is_finite() {
        return Err(Error::numerical("ELBO is not finite"));
    }
    Ok(parts)
}

/// Data and integral terms on a held-out day (no KL): the test
/// log-likelihood lower bound.
pub(crate) fn tll_parts(model: &TreatmentModel, heldout: &DayTrajectory) -> Result<ElboParts> {
    let constants = vec![day_constants(model, heldout)?];
    let mut parts = elbo_at(model, &constants, &model.vstate.mean, &model.vstate.cov_chol)?;
    parts.kl_term = 0.0;
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use crate::kernels::RegressiveInput;
    use crate::treatment::{
        IntensityComponents, MarkModel, TreatmentConfig, VariationalState,
    };
    use approx::assert_relative_eq;

    fn day() -> DayTrajectory {
        DayTrajectory {
            day_length: 24.0,
            treatments: vec![Event::new(7.5, 30.0), Event::new(12.5, 55.0), Event::new(18.0, 40.0)],
            outcomes: (0..12)
                .map(|i| Event::new(2.0 * i as f64 + 0.7, 5.0 + (i as f64 * 0.9).sin()))
                .collect(),
        }
    }

    fn model(components: IntensityComponents) -> TreatmentModel {
        let cfg = TreatmentConfig {
            components,
            num_inducing: 5,
            ..Default::default()
        };
        let mark = MarkModel::default_daily(1.0, 1.0, 0.1)
            .unwrap()
            .with_training_pairs(&[(8.0, 30.0)]);
        TreatmentModel::init(cfg, "pi", &[day()], mark).unwrap()
    }

    #[test]
    fn phi_zero_length_interval_is_zero() {
        let m = model(IntensityComponents::BAO);
        let h = EventHistory::from_day(&day());
        let phi = m.phi_vector(5.0, 5.0, &h).unwrap();
        assert!(phi.iter().all(|v| *v == 0.0));
        let psi = m.psi_matrix(5.0, 5.0, &h).unwrap();
        assert!(psi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phi_rejects_events_inside_interval() {
        let m = model(IntensityComponents::BAO);
        let h = EventHistory::from_day(&day());
        assert!(m.phi_vector(7.0, 8.0, &h).is_err());
        // endpoints are fine
        assert!(m.phi_vector(7.5, 8.7, &h).is_ok());
    }

    #[test]
    fn phi_masks_placeholder_slots() {
        let m = model(IntensityComponents::BAO);
        // empty history: only the baseline component contributes
        let h = EventHistory::new();
        let phi = m.phi_vector(1.0, 2.0, &h).unwrap();
        let mb = model(IntensityComponents::B);
        let phib = mb.phi_vector(1.0, 2.0, &h).unwrap();
        for (a, b) in phi.iter().zip(phib.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    // quadrature oracle for one interval; midpoint rule keeps the sample
    // points strictly inside, matching the frozen-history semantics
    fn phi_quad(m: &TreatmentModel, j: usize, t0: f64, t1: f64, h: &EventHistory) -> f64 {
        let n = 20000;
        let kern = &m.cache().unwrap().kernel;
        let z = &m.vstate.inducing[j];
        let mut acc = 0.0;
        for i in 0..n {
            let tau = t0 + (t1 - t0) * (i as f64 + 0.5) / n as f64;
            let x = crate::treatment::retrieve_inputs(h, tau, &m.config).unwrap();
            acc += kern.eval(&x, z).unwrap();
        }
        acc * (t1 - t0) / n as f64
    }

    #[test]
    fn phi_matches_quadrature() {
        let m = model(IntensityComponents::BAO);
        let h = EventHistory::from_day(&day());
        // interval between two events, fully populated history
        let (t0, t1) = (12.7, 14.7);
        let phi = m.phi_vector(t0, t1, &h).unwrap();
        for j in 0..m.vstate.num_inducing() {
            let q = phi_quad(&m, j, t0, t1, &h);
            assert_relative_eq!(phi[j], q, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn psi_matches_quadrature_and_is_symmetric() {
        let m = model(IntensityComponents::BAO);
        let h = EventHistory::from_day(&day());
        let (t0, t1) = (12.7, 14.7);
        let psi = m.psi_matrix(t0, t1, &h).unwrap();
        // symmetry is bit-exact
        for j in 0..psi.nrows() {
            for k in 0..psi.ncols() {
                assert_eq!(psi[(j, k)].to_bits(), psi[(k, j)].to_bits());
            }
        }
        let kern = &m.cache().unwrap().kernel;
        let n = 20000;
        for (j, k) in [(0, 0), (1, 3), (2, 4)] {
            let (zj, zk) = (&m.vstate.inducing[j], &m.vstate.inducing[k]);
            let mut acc = 0.0;
            for i in 0..n {
                let tau = t0 + (t1 - t0) * (i as f64 + 0.5) / n as f64;
                let x = crate::treatment::retrieve_inputs(&h, tau, &m.config).unwrap();
                acc += kern.eval(zj, &x).unwrap() * kern.eval(&x, zk).unwrap();
            }
            let q = acc * (t1 - t0) / n as f64;
            assert_relative_eq!(psi[(j, k)], q, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn phi_psi_refinement_invariance() {
        let m = model(IntensityComponents::BAO);
        let h = EventHistory::from_day(&day());
        let (t0, t1) = (12.7, 14.7);
        let whole_phi = m.phi_vector(t0, t1, &h).unwrap();
        let whole_psi = m.psi_matrix(t0, t1, &h).unwrap();
        let mid = 13.4;
        let split_phi = m.phi_vector(t0, mid, &h).unwrap() + m.phi_vector(mid, t1, &h).unwrap();
        let split_psi = m.psi_matrix(t0, mid, &h).unwrap() + m.psi_matrix(mid, t1, &h).unwrap();
        assert!((whole_phi - split_phi).abs().max() < 1e-8);
        assert!((whole_psi - split_psi).abs().max() < 1e-8);
    }

    #[test]
    fn elbo_empty_dataset_rejected() {
        let m = model(IntensityComponents::BAO);
        assert!(m.elbo(&[]).is_err());
    }

    #[test]
    fn elbo_zero_events_has_zero_data_term() {
        let m = model(IntensityComponents::B);
        let empty_day = DayTrajectory::empty(24.0);
        let parts = m.elbo(&[empty_day]).unwrap();
        assert_eq!(parts.data_term, 0.0);
        assert!(parts.integral_term > 0.0);
    }

    #[test]
    fn kl_zero_when_q_equals_prior() {
        // init uses m = 0, S = K_zz, i.e. q(u) = p(u)
        let m = model(IntensityComponents::BAO);
        let parts = m.elbo(&[day()]).unwrap();
        assert_relative_eq!(parts.kl_term, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn kl_positive_otherwise() {
        let base = model(IntensityComponents::BAO);
        let n = base.vstate.num_inducing();
        let vstate = VariationalState {
            inducing: base.vstate.inducing.clone(),
            mean: DVector::from_element(n, 0.7),
            cov_chol: DMatrix::identity(n, n) * 0.3,
        };
        let m = TreatmentModel::new(base.config.clone(), vstate, base.mark_model.clone(), "pi")
            .unwrap();
        let parts = m.elbo(&[day()]).unwrap();
        assert!(parts.kl_term > 0.0);
    }

    #[test]
    fn integral_term_matches_quadrature_of_expected_intensity() {
        // E_q[lambda] integrated by brute force must match the closed-form
        // integral term
        let m = model(IntensityComponents::BAO);
        let d = day();
        let h = EventHistory::from_day(&d);
        let n = 60000;
        let mut acc = 0.0;
        for i in 0..=n {
            let tau = d.day_length * i as f64 / n as f64;
            let lam = m.intensity(&h, tau).unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += lam * w;
        }
        let quad = acc * d.day_length / n as f64;
        let parts = m.elbo(&[d]).unwrap();
        assert_relative_eq!(parts.integral_term, quad, max_relative = 1e-4);
    }

    #[test]
    fn phi_with_placeholder_z_slot_drops_contribution() {
        let m0 = model(IntensityComponents::BAO);
        let mut z = m0.vstate.inducing.clone();
        // blank out the treatment slot of inducing point 2
        z[2].last_treatments[0] = crate::kernels::EventSlot::Placeholder;
        let vstate = VariationalState {
            inducing: z,
            mean: m0.vstate.mean.clone(),
            cov_chol: m0.vstate.cov_chol.clone(),
        };
        let m = TreatmentModel::new(m0.config.clone(), vstate, m0.mark_model.clone(), "pi")
            .unwrap();
        let h = EventHistory::from_day(&day());
        let phi = m.phi_vector(12.7, 14.7, &h).unwrap();
        let q = phi_quad(&m, 2, 12.7, 14.7, &h);
        assert_relative_eq!(phi[2], q, max_relative = 1e-6);
        // and the masked phi is strictly below the unmasked one
        let phi_full = m0.phi_vector(12.7, 14.7, &h).unwrap();
        assert!(phi[2] < phi_full[2]);
    }

    #[test]
    fn tll_equals_elbo_parts_on_training_day() {
        let m = model(IntensityComponents::BAO);
        let d = day();
        let parts = m.elbo(&[d.clone()]).unwrap();
        let tll = m.test_log_likelihood_bound(&d).unwrap();
        assert_relative_eq!(tll, parts.data_term - parts.integral_term, epsilon = 1e-10);
    }

    #[test]
    fn placeholder_input_kvec_is_masked() {
        let m = model(IntensityComponents::AO);
        let x = RegressiveInput::all_placeholder(5.0, 1, 1);
        let k = m.kvec(&x).unwrap();
        assert!(k.iter().all(|v| *v == 0.0));
    }
}
