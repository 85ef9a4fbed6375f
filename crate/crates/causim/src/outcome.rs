//! Hierarchical conditional-GP outcome model:
//! `y(tau) = f_b(tau) + f_a(tau; a) + eps(tau)`.
//!
//! The per-patient baseline `f_b` has prior mean `b` and a 24h-periodic
//! kernel; the treatment response `f_a` sums dose-scaled copies of one
//! shared shape GP, each confined to a 3h window after its treatment, so
//! the response covariance between two times is a double sum over treatment
//! pairs of the windowed shape kernel scaled by `f_m(m_i) f_m(m_j)` with
//! patient-specific linear scaling `f_m(m) = b0 + b1 * m`. Fitting is joint
//! MAP: marginal likelihood plus hierarchical Gaussian priors on the
//! scaling coefficients.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Event, PatientRecord};
use crate::error::{Error, Result};
use crate::kernels::{eval_response_kernel, se_d2, DEFAULT_JITTER};

pub const BASELINE_PERIOD_HOURS: f64 = 24.0;
pub const DEFAULT_RESPONSE_WINDOW_HOURS: f64 = 3.0;

/// Per-patient baseline parameters; the period is fixed at 24 hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub intercept: f64,
    pub periodic_variance: f64,
    pub periodic_lengthscale: f64,
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.periodic_variance >= 0.0) || !(self.periodic_lengthscale > 0.0) {
            return Err(Error::invalid_argument(
                "baseline: variance must be >= 0 and lengthscale > 0",
            ));
        }
        Ok(())
    }
}

/// Patient-specific linear dose scaling `f_m(m) = intercept + slope * m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub intercept: f64,
    pub slope: f64,
}

impl ScalingParams {
    pub fn eval(&self, mark: f64) -> f64 {
        self.intercept + self.slope * mark
    }
}

/// Shared response-shape parameters plus the scaling hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseParams {
    pub shape_lengthscale: f64,
    pub window_hours: f64,
    pub scaling: BTreeMap<String, ScalingParams>,
    pub prior_intercept_mean: f64,
    pub prior_slope_mean: f64,
    pub prior_intercept_std: f64,
    pub prior_slope_std: f64,
}

impl ResponseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shape_lengthscale > 0.0) || !(self.window_hours > 0.0) {
            return Err(Error::invalid_argument(
                "response: lengthscale and window must be > 0",
            ));
        }
        if !(self.prior_intercept_std > 0.0) || !(self.prior_slope_std > 0.0) {
            return Err(Error::invalid_argument("response: prior stds must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub baselines: BTreeMap<String, BaselineParams>,
    pub response: ResponseParams,
    pub noise_std: f64,
    /// Optional long-lengthscale SE multiplier on the periodic baseline
    /// kernel, off by default.
    pub baseline_long_se_lengthscale: Option<f64>,
}

impl OutcomeModel {
    /// Default-initialized model for the patients of a dataset.
    pub fn init(dataset: &[PatientRecord]) -> Self {
        let mut baselines = BTreeMap::new();
        let mut scaling = BTreeMap::new();
        for r in dataset {
            let values: Vec<f64> = r
                .days
                .iter()
                .flat_map(|d| d.outcomes.iter().map(|e| e.value))
                .collect();
            let mean = if values.is_empty() {
                1.0
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            baselines.insert(
                r.patient_id.clone(),
                BaselineParams {
                    intercept: mean,
                    periodic_variance: 1.0,
                    periodic_lengthscale: 1.0,
                },
            );
            scaling.insert(
                r.patient_id.clone(),
                ScalingParams {
                    intercept: 0.1,
                    slope: 0.1,
                },
            );
        }
        OutcomeModel {
            baselines,
            response: ResponseParams {
                shape_lengthscale: 0.5,
                window_hours: DEFAULT_RESPONSE_WINDOW_HOURS,
                scaling,
                prior_intercept_mean: 0.1,
                prior_slope_mean: 0.1,
                prior_intercept_std: 0.1,
                prior_slope_std: 0.1,
            },
            noise_std: 1.0,
            baseline_long_se_lengthscale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0) {
            return Err(Error::invalid_argument("noise_std must be > 0"));
        }
        for b in self.baselines.values() {
            b.validate()?;
        }
        self.response.validate()
    }

    fn baseline(&self, patient: &str) -> Result<&BaselineParams> {
        self.baselines
            .get(patient)
            .ok_or_else(|| Error::invalid_argument(format!("unknown patient '{patient}'")))
    }

    fn scaling(&self, patient: &str) -> Result<&ScalingParams> {
        self.response
            .scaling
            .get(patient)
            .ok_or_else(|| Error::invalid_argument(format!("unknown patient '{patient}'")))
    }

    /// Prior mean of the outcome trajectory (the baseline intercept; the
    /// response GP has mean zero).
    pub fn prior_mean(&self, patient: &str) -> Result<f64> {
        Ok(self.baseline(patient)?.intercept)
    }

    fn baseline_cov(&self, params: &BaselineParams, t1: f64, t2: f64) -> f64 {
        let s = (std::f64::consts::PI * (t1 - t2).abs() / BASELINE_PERIOD_HOURS).sin();
        let l = params.periodic_lengthscale;
        let mut v = params.periodic_variance * (-2.0 * s * s / (l * l)).exp();
        if let Some(ls) = self.baseline_long_se_lengthscale {
            let d = t1 - t2;
            v *= se_d2(d * d, ls);
        }
        v
    }

    /// Covariance of the summed dose-scaled response GP between two times:
    /// the double sum over treatment pairs of the windowed shape kernel.
    pub fn response_covariance(
        &self,
        patient: &str,
        treatments: &[Event],
        tau: f64,
        tau2: f64,
    ) -> Result<f64> {
        if treatments.windows(2).any(|w| w[0].time >= w[1].time) {
            return Err(Error::invalid_argument(
                "response_covariance: treatments must be sorted",
            ));
        }
        let sc = self.scaling(patient)?;
        let l = self.response.shape_lengthscale;
        let w = self.response.window_hours;
        let mut acc = 0.0;
        for a in treatments {
            if tau < a.time || tau > a.time + w {
                continue;
            }
            let fa = sc.eval(a.value);
            for b in treatments {
                if tau2 < b.time || tau2 > b.time + w {
                    continue;
                }
                acc += fa * sc.eval(b.value) * eval_response_kernel(tau, tau2, a.time, b.time, l, w);
            }
        }
        Ok(acc)
    }

    /// Full kernel (baseline + response) between two sets of times.
    fn cov_block(
        &self,
        patient: &str,
        treatments: &[Event],
        xs: &[f64],
        ys: &[f64],
    ) -> Result<DMatrix<f64>> {
        let base = self.baseline(patient)?;
        let sc = self.scaling(patient)?;
        let l = self.response.shape_lengthscale;
        let w = self.response.window_hours;
        let mut k = DMatrix::zeros(xs.len(), ys.len());
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in ys.iter().enumerate() {
                k[(i, j)] = self.baseline_cov(base, x, y);
            }
        }
        // response part, looping only over in-window points per treatment
        let in_window = |ts: &[f64], t0: f64| -> Vec<usize> {
            ts.iter()
                .enumerate()
                .filter(|(_, &t)| t >= t0 && t <= t0 + w)
                .map(|(i, _)| i)
                .collect()
        };
        for a in treatments {
            let rows = in_window(xs, a.time);
            if rows.is_empty() {
                continue;
            }
            let fa = sc.eval(a.value);
            for b in treatments {
                let cols = in_window(ys, b.time);
                if cols.is_empty() {
                    continue;
                }
                let fab = fa * sc.eval(b.value);
                for &i in &rows {
                    for &j in &cols {
                        k[(i, j)] +=
                            fab * eval_response_kernel(xs[i], ys[j], a.time, b.time, l, w);
                    }
                }
            }
        }
        Ok(k)
    }

    /// GP posterior of the latent outcome `f = f_b + f_a` at `query` given
    /// noisy observations. Means and covariance are the exact conditional
    /// under the model's kernel; no jitter is added here.
    pub fn predict(
        &self,
        patient: &str,
        treatments: &[Event],
        observed: &[Event],
        query: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if observed.windows(2).any(|w| w[0].time >= w[1].time) {
            return Err(Error::invalid_argument("predict: observations must be sorted"));
        }
        let mean = self.prior_mean(patient)?;
        let kqq = self.cov_block(patient, treatments, query, query)?;
        if observed.is_empty() {
            return Ok((DVector::from_element(query.len(), mean), kqq));
        }
        let obs_times: Vec<f64> = observed.iter().map(|e| e.time).collect();
        let mut koo = self.cov_block(patient, treatments, &obs_times, &obs_times)?;
        let n = obs_times.len();
        for i in 0..n {
            koo[(i, i)] += self.noise_std * self.noise_std;
        }
        let chol = koo
            .cholesky()
            .ok_or_else(|| Error::numerical("outcome gram is not positive definite"))?;
        let kqo = self.cov_block(patient, treatments, query, &obs_times)?;
        let resid = DVector::from_iterator(n, observed.iter().map(|e| e.value - mean));
        let alpha = chol.solve(&resid);
        let mu = DVector::from_element(query.len(), mean) + &kqo * alpha;
        let v = chol.solve(&kqo.transpose());
        let cov = kqq - &kqo * v;
        Ok((mu, cov))
    }

    /// Joint draw of the outcome at `times`: a GP sample plus i.i.d. noise,
    /// or the mean function plus fixed residuals added verbatim.
    pub fn sample_trajectory(
        &self,
        patient: &str,
        treatments: &[Event],
        times: &[f64],
        noise: TrajectoryNoise,
    ) -> Result<Vec<f64>> {
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_argument("sample_trajectory: times must be sorted"));
        }
        let mean = self.prior_mean(patient)?;
        match noise {
            TrajectoryNoise::Fixed(residuals) => {
                if residuals.len() != times.len() {
                    return Err(Error::invalid_argument(
                        "sample_trajectory: residual count must match times",
                    ));
                }
                Ok(times
                    .iter()
                    .zip(residuals)
                    .map(|(_, r)| mean + r)
                    .collect())
            }
            TrajectoryNoise::Fresh(rng) => {
                let mut k = self.cov_block(patient, treatments, times, times)?;
                for i in 0..times.len() {
                    k[(i, i)] += DEFAULT_JITTER;
                }
                let chol = k
                    .cholesky()
                    .ok_or_else(|| Error::numerical("trajectory covariance not PSD"))?;
                let z = DVector::from_iterator(
                    times.len(),
                    (0..times.len()).map(|_| crate::sampler::standard_normal(rng)),
                );
                let f = chol.l() * z;
                Ok((0..times.len())
                    .map(|i| mean + f[i] + self.noise_std * crate::sampler::standard_normal(rng))
                    .collect())
            }
        }
    }

    /// Component-wise posterior given one patient's observed window: the
    /// baseline mean and the shared response-shape mean as standalone
    /// functions. Recombining them under a different treatment set gives
    /// counterfactual trajectories whose difference from the factual one is
    /// exactly the added/removed response bumps.
    pub fn component_posterior(
        &self,
        patient: &str,
        treatments: &[Event],
        observed: &[Event],
    ) -> Result<ComponentPosterior> {
        let base = *self.baseline(patient)?;
        let sc = *self.scaling(patient)?;
        let mean = base.intercept;
        let obs_times: Vec<f64> = observed.iter().map(|e| e.time).collect();
        let weights = if observed.is_empty() {
            DVector::zeros(0)
        } else {
            let mut koo = self.cov_block(patient, treatments, &obs_times, &obs_times)?;
            for i in 0..obs_times.len() {
                koo[(i, i)] += self.noise_std * self.noise_std;
            }
            let chol = koo
                .cholesky()
                .ok_or_else(|| Error::numerical("outcome gram is not positive definite"))?;
            let resid =
                DVector::from_iterator(observed.len(), observed.iter().map(|e| e.value - mean));
            chol.solve(&resid)
        };
        Ok(ComponentPosterior {
            prior_mean: mean,
            baseline: base,
            long_se: self.baseline_long_se_lengthscale,
            scaling: sc,
            shape_lengthscale: self.response.shape_lengthscale,
            window: self.response.window_hours,
            obs_times,
            obs_treatments: treatments.to_vec(),
            weights,
        })
    }

    /// Mean posterior outcome noise at the observed times:
    /// `eps(t_j) = y_j - E[f(t_j) | y]`. Adding the posterior latent mean
    /// back reproduces the observations exactly.
    pub fn noise_posterior(
        &self,
        patient: &str,
        treatments: &[Event],
        observed: &[Event],
    ) -> Result<Vec<f64>> {
        let times: Vec<f64> = observed.iter().map(|e| e.time).collect();
        let (mu, _) = self.predict(patient, treatments, observed, &times)?;
        Ok(observed
            .iter()
            .zip(mu.iter())
            .map(|(e, m)| e.value - m)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        crate::jsonfmt::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: OutcomeModel = crate::jsonfmt::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

pub enum TrajectoryNoise<'a> {
    Fresh(&'a mut dyn RngCore),
    Fixed(&'a [f64]),
}

/// Posterior means of the outcome components given one observed window,
/// evaluable at arbitrary times and recombinable under any treatment set.
#[derive(Debug, Clone)]
pub struct ComponentPosterior {
    prior_mean: f64,
    baseline: BaselineParams,
    long_se: Option<f64>,
    scaling: ScalingParams,
    shape_lengthscale: f64,
    window: f64,
    obs_times: Vec<f64>,
    obs_treatments: Vec<Event>,
    weights: DVector<f64>,
}

impl ComponentPosterior {
    fn baseline_cov(&self, t1: f64, t2: f64) -> f64 {
        let s = (std::f64::consts::PI * (t1 - t2).abs() / BASELINE_PERIOD_HOURS).sin();
        let l = self.baseline.periodic_lengthscale;
        let mut v = self.baseline.periodic_variance * (-2.0 * s * s / (l * l)).exp();
        if let Some(ls) = self.long_se {
            let d = t1 - t2;
            v *= se_d2(d * d, ls);
        }
        v
    }

    /// `E[f_b(tau) | y]`, including the prior mean.
    pub fn baseline_mean(&self, tau: f64) -> f64 {
        let mut acc = self.prior_mean;
        for (j, &t) in self.obs_times.iter().enumerate() {
            acc += self.baseline_cov(tau, t) * self.weights[j];
        }
        acc
    }

    /// `E[s(delta) | y]`: the shared response shape at relative time
    /// `delta`, zero outside the response window.
    pub fn shape_mean(&self, delta: f64) -> f64 {
        if delta < 0.0 || delta > self.window {
            return 0.0;
        }
        let mut acc = 0.0;
        for (j, &t) in self.obs_times.iter().enumerate() {
            let mut cross = 0.0;
            for a in &self.obs_treatments {
                cross += self.scaling.eval(a.value)
                    * eval_response_kernel(delta, t, 0.0, a.time, self.shape_lengthscale, self.window);
            }
            acc += cross * self.weights[j];
        }
        acc
    }

    /// Posterior-mean response of a treatment set at `tau`.
    pub fn response_mean(&self, treatments: &[Event], tau: f64) -> f64 {
        treatments
            .iter()
            .map(|a| self.scaling.eval(a.value) * self.shape_mean(tau - a.time))
            .sum()
    }

    /// Posterior-mean trajectory under an arbitrary treatment set.
    pub fn trajectory_mean(&self, treatments: &[Event], tau: f64) -> f64 {
        self.baseline_mean(tau) + self.response_mean(treatments, tau)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OutcomeFitOptions {
    pub max_iters: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Freeze the shape lengthscale at this value (a very large value turns
    /// the response into a constant-height window bump with fitted scale).
    pub pin_shape_lengthscale: Option<f64>,
}

impl Default for OutcomeFitOptions {
    fn default() -> Self {
        OutcomeFitOptions {
            max_iters: 200,
            step_size: 0.02,
            seed: 0,
            pin_shape_lengthscale: None,
        }
    }
}

struct PatientBlock {
    id: String,
    treatments: Vec<Event>,
    outcomes: Vec<Event>,
}

fn flatten(record: &PatientRecord) -> PatientBlock {
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    for (d, day) in record.days.iter().enumerate() {
        let off = d as f64 * day.day_length;
        treatments.extend(day.treatments.iter().map(|e| Event::new(off + e.time, e.value)));
        outcomes.extend(day.outcomes.iter().map(|e| Event::new(off + e.time, e.value)));
    }
    PatientBlock {
        id: record.patient_id.clone(),
        treatments,
        outcomes,
    }
}

/// Gaussian marginal log-likelihood of one patient under the model.
fn patient_ll(model: &OutcomeModel, block: &PatientBlock) -> Result<f64> {
    let n = block.outcomes.len();
    if n == 0 {
        return Ok(0.0);
    }
    let times: Vec<f64> = block.outcomes.iter().map(|e| e.time).collect();
    let mut k = model.cov_block(&block.id, &block.treatments, &times, &times)?;
    let s2 = model.noise_std * model.noise_std;
    for i in 0..n {
        k[(i, i)] += s2 + DEFAULT_JITTER;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::numerical("outcome gram not positive definite during fit"))?;
    let mean = model.prior_mean(&block.id)?;
    let resid = DVector::from_iterator(n, block.outcomes.iter().map(|e| e.value - mean));
    let alpha = chol.solve(&resid);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (resid.dot(&alpha) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

fn scaling_log_prior(model: &OutcomeModel, patient: &str) -> f64 {
    let sc = &model.response.scaling[patient];
    let r = &model.response;
    let g = |x: f64, mu: f64, sd: f64| {
        let z = (x - mu) / sd;
        -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    g(sc.intercept, r.prior_intercept_mean, r.prior_intercept_std)
        + g(sc.slope, r.prior_slope_mean, r.prior_slope_std)
}

// Parameter packing for the MAP fit. Positives go through log-space with
// the documented bounds; scaling coefficients and intercepts are free.
const LN_VAR_MIN: f64 = -13.815_510_557_964_274; // ln 1e-6
const LN_LEN_MIN: f64 = -4.605_170_185_988_091; // ln 1e-2
const LN_LEN_MAX: f64 = 6.907_755_278_982_137; // ln 1e3

const PER_PATIENT: usize = 5;
const SHARED: usize = 4;

fn pack(model: &OutcomeModel, ids: &[String]) -> Vec<f64> {
    let mut x = Vec::with_capacity(ids.len() * PER_PATIENT + SHARED);
    for id in ids {
        let b = &model.baselines[id];
        let s = &model.response.scaling[id];
        x.push(b.intercept);
        x.push(b.periodic_variance.max(1e-6).ln());
        x.push(b.periodic_lengthscale.ln());
        x.push(s.intercept);
        x.push(s.slope);
    }
    x.push(model.response.shape_lengthscale.ln());
    x.push(model.response.prior_intercept_mean);
    x.push(model.response.prior_slope_mean);
    x.push(model.noise_std.max(1e-3).ln());
    x
}

fn unpack(x: &[f64], ids: &[String], template: &OutcomeModel) -> OutcomeModel {
    let mut model = template.clone();
    for (p, id) in ids.iter().enumerate() {
        let o = p * PER_PATIENT;
        model.baselines.insert(
            id.clone(),
            BaselineParams {
                intercept: x[o],
                periodic_variance: x[o + 1].clamp(LN_VAR_MIN, LN_LEN_MAX).exp(),
                periodic_lengthscale: x[o + 2].clamp(LN_LEN_MIN, LN_LEN_MAX).exp(),
            },
        );
        model.response.scaling.insert(
            id.clone(),
            ScalingParams {
                intercept: x[o + 3],
                slope: x[o + 4],
            },
        );
    }
    let s = ids.len() * PER_PATIENT;
    model.response.shape_lengthscale = x[s].clamp(LN_LEN_MIN, LN_LEN_MAX).exp();
    model.response.prior_intercept_mean = x[s + 1];
    model.response.prior_slope_mean = x[s + 2];
    model.noise_std = x[s + 3].clamp((1e-3f64).ln(), (1e2f64).ln()).exp();
    model
}

/// Joint MAP objective: marginal likelihood plus scaling priors.
fn objective(x: &[f64], ids: &[String], template: &OutcomeModel, blocks: &[PatientBlock]) -> f64 {
    let model = unpack(x, ids, template);
    let ll: f64 = blocks
        .par_iter()
        .map(|b| patient_ll(&model, b).unwrap_or(f64::NEG_INFINITY))
        .sum();
    let prior: f64 = ids.iter().map(|id| scaling_log_prior(&model, id)).sum();
    ll + prior
}

/// Objective restricted to one patient's terms, for cheap per-patient
/// finite differences.
fn objective_patient(
    x: &[f64],
    ids: &[String],
    template: &OutcomeModel,
    blocks: &[PatientBlock],
    p: usize,
) -> f64 {
    let model = unpack(x, ids, template);
    patient_ll(&model, &blocks[p]).unwrap_or(f64::NEG_INFINITY)
        + scaling_log_prior(&model, &ids[p])
}

/// Fits the outcome model by gradient ascent with a backtracking step.
/// Per-patient parameters, the shared shape lengthscale, the hierarchy
/// means and the noise level are optimized; the prior scales stay fixed.
pub fn fit(
    init: &OutcomeModel,
    dataset: &[PatientRecord],
    opt: &OutcomeFitOptions,
) -> Result<OutcomeModel> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("outcome fit: dataset must be nonempty"));
    }
    for r in dataset {
        let n: usize = r.days.iter().map(|d| d.outcomes.len()).sum();
        if n < 2 {
            return Err(Error::invalid_argument(format!(
                "outcome fit: patient {} has fewer than 2 outcome observations",
                r.patient_id
            )));
        }
    }
    let blocks: Vec<PatientBlock> = dataset.iter().map(flatten).collect();
    let ids: Vec<String> = blocks.iter().map(|b| b.id.clone()).collect();
    for id in &ids {
        if !init.baselines.contains_key(id) || !init.response.scaling.contains_key(id) {
            return Err(Error::invalid_argument(format!(
                "outcome fit: init model lacks parameters for patient {id}"
            )));
        }
    }

    let mut x = pack(init, &ids);
    let dim = x.len();
    let shared_base = ids.len() * PER_PATIENT;
    if let Some(pin) = opt.pin_shape_lengthscale {
        x[shared_base] = pin.clamp(1e-2, 1e3).ln();
    }
    let init_value = objective(&x, &ids, init, &blocks);
    if !init_value.is_finite() {
        return Err(Error::numerical("outcome objective not finite at init"));
    }
    let mut best = (x.clone(), init_value);

    // Adam ascent on finite-difference gradients; per-patient coordinates
    // only touch that patient's likelihood term. The best-scoring iterate
    // is returned, so the objective never falls below the initialization.
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let lr = opt.step_size;
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for iter in 0..opt.max_iters {
        let mut grad = vec![0.0; dim];
        let h = 1e-5;
        let patient_grads: Vec<(usize, f64)> = (0..shared_base)
            .into_par_iter()
            .map(|idx| {
                let p = idx / PER_PATIENT;
                let mut xp = x.clone();
                let mut xm = x.clone();
                let hh = h * x[idx].abs().max(1.0);
                xp[idx] += hh;
                xm[idx] -= hh;
                let fp = objective_patient(&xp, &ids, init, &blocks, p);
                let fm = objective_patient(&xm, &ids, init, &blocks, p);
                (idx, (fp - fm) / (2.0 * hh))
            })
            .collect();
        for (idx, g) in patient_grads {
            grad[idx] = g;
        }
        for idx in shared_base..dim {
            if idx == shared_base && opt.pin_shape_lengthscale.is_some() {
                continue;
            }
            let mut xp = x.clone();
            let mut xm = x.clone();
            let hh = h * x[idx].abs().max(1.0);
            xp[idx] += hh;
            xm[idx] -= hh;
            grad[idx] =
                (objective(&xp, &ids, init, &blocks) - objective(&xm, &ids, init, &blocks))
                    / (2.0 * hh);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("non-finite gradient in outcome fit"));
        }
        let t = (iter + 1) as i32;
        for i in 0..dim {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m1[i] / (1.0 - b1.powi(t));
            let vh = m2[i] / (1.0 - b2.powi(t));
            x[i] += lr * mh / (vh.sqrt() + eps);
        }
        let value = objective(&x, &ids, init, &blocks);
        if value.is_finite() && value > best.1 {
            best = (x.clone(), value);
        }
    }

    let fitted = unpack(&best.0, &ids, init);
    fitted.validate()?;
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn one_patient_model(intercept: f64) -> OutcomeModel {
        let mut baselines = BTreeMap::new();
        baselines.insert(
            "p0".to_string(),
            BaselineParams {
                intercept,
                periodic_variance: 0.4,
                periodic_lengthscale: 1.2,
            },
        );
        let mut scaling = BTreeMap::new();
        scaling.insert(
            "p0".to_string(),
            ScalingParams {
                intercept: 0.3,
                slope: 0.02,
            },
        );
        OutcomeModel {
            baselines,
            response: ResponseParams {
                shape_lengthscale: 0.5,
                window_hours: 3.0,
                scaling,
                prior_intercept_mean: 0.1,
                prior_slope_mean: 0.1,
                prior_intercept_std: 0.1,
                prior_slope_std: 0.1,
            },
            noise_std: 0.3,
            baseline_long_se_lengthscale: None,
        }
    }

    #[test]
    fn response_cov_zero_without_treatments() {
        let m = one_patient_model(5.0);
        assert_eq!(m.response_covariance("p0", &[], 4.0, 6.0).unwrap(), 0.0);
    }

    #[test]
    fn response_cov_single_treatment_self_value() {
        let m = one_patient_model(5.0);
        let a = [Event::new(8.0, 40.0)];
        let fm = 0.3 + 0.02 * 40.0;
        let v = m.response_covariance("p0", &a, 9.0, 9.0).unwrap();
        assert_relative_eq!(v, fm * fm, epsilon = 1e-12);
    }

    #[test]
    fn response_cov_matches_term_enumeration() {
        let m = one_patient_model(5.0);
        let a = [Event::new(8.0, 40.0), Event::new(9.5, 20.0)];
        let (tau, tau2) = (10.0, 10.5);
        let fm = |mark: f64| 0.3 + 0.02 * mark;
        let mut expected = 0.0;
        for i in &a {
            for j in &a {
                expected += fm(i.value)
                    * fm(j.value)
                    * eval_response_kernel(tau, tau2, i.time, j.time, 0.5, 3.0);
            }
        }
        // both times are inside both windows, so all four terms contribute
        assert!(expected > 0.0);
        let v = m.response_covariance("p0", &a, tau, tau2).unwrap();
        assert_relative_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn response_cov_zero_before_first_treatment() {
        let m = one_patient_model(5.0);
        let a = [Event::new(8.0, 40.0)];
        assert_eq!(m.response_covariance("p0", &a, 7.9, 9.0).unwrap(), 0.0);
        assert_eq!(m.response_covariance("p0", &a, 11.1, 9.0).unwrap(), 0.0);
    }

    #[test]
    fn predict_without_observations_returns_prior() {
        let m = one_patient_model(5.3);
        let (mu, cov) = m.predict("p0", &[], &[], &[1.0, 2.0]).unwrap();
        assert_eq!(mu[0], 5.3);
        assert_eq!(mu[1], 5.3);
        assert_relative_eq!(cov[(0, 0)], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn predict_interpolates_with_small_noise() {
        let mut m = one_patient_model(5.0);
        m.noise_std = 1e-4;
        let obs = vec![Event::new(6.0, 5.4), Event::new(9.0, 5.9), Event::new(12.0, 5.1)];
        let (mu, _) = m.predict("p0", &[], &obs, &[9.0]).unwrap();
        assert_relative_eq!(mu[0], 5.9, epsilon = 1e-4);
    }

    #[test]
    fn predict_matches_dense_inverse_oracle() {
        let m = one_patient_model(5.0);
        let a = [Event::new(7.0, 30.0), Event::new(13.0, 55.0)];
        let obs: Vec<Event> = (0..30)
            .map(|i| Event::new(0.5 + i as f64 * 0.77, 5.0 + ((i * 13 % 7) as f64) * 0.1))
            .collect();
        let query = [6.9, 8.2, 14.0, 20.0];
        let (mu, cov) = m.predict("p0", &a, &obs, &query).unwrap();

        // explicit-inverse oracle
        let n = obs.len();
        let times: Vec<f64> = obs.iter().map(|e| e.time).collect();
        let k = |x: f64, y: f64| {
            m.baseline_cov(&m.baselines["p0"], x, y)
                + m.response_covariance("p0", &a, x, y).unwrap()
        };
        let mut koo = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                koo[(i, j)] = k(times[i], times[j]);
            }
            koo[(i, i)] += m.noise_std * m.noise_std;
        }
        let kinv = koo.try_inverse().unwrap();
        let y = DVector::from_iterator(n, obs.iter().map(|e| e.value - 5.0));
        for (qi, &q) in query.iter().enumerate() {
            let kq = DVector::from_iterator(n, times.iter().map(|&t| k(q, t)));
            let mu_o = 5.0 + (kq.transpose() * &kinv * &y)[(0, 0)];
            assert!((mu[qi] - mu_o).abs() <= 1e-8, "mean mismatch at {q}");
            for (qj, &q2) in query.iter().enumerate() {
                let kq2 = DVector::from_iterator(n, times.iter().map(|&t| k(q2, t)));
                let cov_o = k(q, q2) - (kq.transpose() * &kinv * &kq2)[(0, 0)];
                assert!(
                    (cov[(qi, qj)] - cov_o).abs() <= 1e-8,
                    "cov mismatch at ({q},{q2})"
                );
            }
        }
    }

    #[test]
    fn sample_degenerate_gp_is_constant() {
        let mut m = one_patient_model(5.0);
        m.noise_std = 1e-9;
        m.baselines.get_mut("p0").unwrap().periodic_variance = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ys = m
            .sample_trajectory("p0", &[], &[1.0, 5.0, 9.0], TrajectoryNoise::Fresh(&mut rng))
            .unwrap();
        for y in ys {
            assert_relative_eq!(y, 5.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn fixed_zero_noise_returns_mean_function() {
        let m = one_patient_model(5.0);
        let res = vec![0.0; 3];
        let ys = m
            .sample_trajectory(
                "p0",
                &[Event::new(1.0, 30.0)],
                &[1.0, 5.0, 9.0],
                TrajectoryNoise::Fixed(&res),
            )
            .unwrap();
        for y in ys {
            assert_eq!(y, 5.0);
        }
    }

    #[test]
    fn empirical_covariance_matches_analytic() {
        let m = one_patient_model(5.0);
        let a = [Event::new(0.5, 40.0)];
        let times = [1.0, 2.0, 3.0];
        let runs = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut sums = [0.0f64; 3];
        let mut prods = [[0.0f64; 3]; 3];
        for _ in 0..runs {
            let ys = m
                .sample_trajectory("p0", &a, &times, TrajectoryNoise::Fresh(&mut rng))
                .unwrap();
            for i in 0..3 {
                sums[i] += ys[i];
                for j in 0..3 {
                    prods[i][j] += ys[i] * ys[j];
                }
            }
        }
        let k = |x: f64, y: f64| {
            m.baseline_cov(&m.baselines["p0"], x, y)
                + m.response_covariance("p0", &a, x, y).unwrap()
                + if x == y { m.noise_std * m.noise_std } else { 0.0 }
        };
        for i in 0..3 {
            for j in 0..3 {
                let mean_i = sums[i] / runs as f64;
                let mean_j = sums[j] / runs as f64;
                let emp = prods[i][j] / runs as f64 - mean_i * mean_j;
                let analytic = k(times[i], times[j]);
                // 3 SE of a covariance estimate, crudely bounded
                let se = 3.0 * (analytic.abs() + 0.5) / (runs as f64).sqrt() * 3.0;
                assert!(
                    (emp - analytic).abs() < se.max(0.02),
                    "cov({i},{j}): emp {emp} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn noise_posterior_reconstruction_identity() {
        let m = one_patient_model(5.0);
        let a = [Event::new(6.0, 30.0)];
        let obs: Vec<Event> = (0..20)
            .map(|i| Event::new(0.3 + i as f64 * 1.1, 5.0 + (i as f64 * 0.4).sin()))
            .collect();
        let resid = m.noise_posterior("p0", &a, &obs).unwrap();
        let times: Vec<f64> = obs.iter().map(|e| e.time).collect();
        let (mu, _) = m.predict("p0", &a, &obs, &times).unwrap();
        for i in 0..obs.len() {
            assert!((resid[i] + mu[i] - obs[i].value).abs() <= 1e-12);
        }
    }

    #[test]
    fn noise_posterior_small_noise_limit() {
        let mut m = one_patient_model(5.0);
        m.noise_std = 1e-4;
        let obs: Vec<Event> = (0..10)
            .map(|i| Event::new(1.0 + i as f64, 5.0 + (i as f64 * 0.5).cos()))
            .collect();
        let resid = m.noise_posterior("p0", &[], &obs).unwrap();
        for r in resid {
            assert!(r.abs() < 1e-4, "residual {r} should vanish as noise -> 0");
        }
    }

    #[test]
    fn noise_posterior_prior_dominated_limit() {
        let mut m = one_patient_model(5.0);
        m.noise_std = 100.0;
        let obs: Vec<Event> = (0..10)
            .map(|i| Event::new(1.0 + i as f64, 5.0 + (i as f64 * 0.5).cos()))
            .collect();
        let resid = m.noise_posterior("p0", &[], &obs).unwrap();
        for (r, e) in resid.iter().zip(&obs) {
            let expected = e.value - 5.0;
            assert!(
                (r - expected).abs() <= 0.01 * expected.abs().max(1.0),
                "residual {r} vs prior-dominated {expected}"
            );
        }
    }
}
