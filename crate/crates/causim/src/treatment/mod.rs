//! The marked-point-process treatment model.
//!
//! The conditional time intensity is a squared GP,
//! `lambda*(tau) = (beta0 + g_b(tau) + g_a*(tau) + g_o*(tau))^2`, where the
//! latent function takes the regressive input `r(tau)` (absolute time plus
//! the last `Q_a` treatments and `Q_o` outcomes). Inference is sparse
//! variational with inducing points; the ELBO's integral term uses the
//! closed-form kernel integrals in [`elbo`]. Dosages are modeled by an
//! independent GP over time of day.

mod elbo;
mod fit;
mod lookup;

pub use elbo::ElboParts;
pub(crate) use elbo::tll_parts;
pub use fit::{fit, FitOptions, FitResult};
pub use lookup::{expected_log_square, expected_log_square_grad};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use crate::data::{DayTrajectory, EventHistory};
use crate::error::{Error, Result};
use crate::kernels::{
    EventSlot, KernelSpec, RegressiveInput, SlotParams, TreatmentKernel, DEFAULT_JITTER,
};

/// Which latent components enter the intensity. The usual variants are
/// written by their component subscripts: `b`, `ba`, `bo`, `ao`, `bao`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensityComponents {
    pub baseline: bool,
    pub treatments: bool,
    pub outcomes: bool,
}

impl IntensityComponents {
    pub const B: Self = Self {
        baseline: true,
        treatments: false,
        outcomes: false,
    };
    pub const BA: Self = Self {
        baseline: true,
        treatments: true,
        outcomes: false,
    };
    pub const BO: Self = Self {
        baseline: true,
        treatments: false,
        outcomes: true,
    };
    pub const AO: Self = Self {
        baseline: false,
        treatments: true,
        outcomes: true,
    };
    pub const BAO: Self = Self {
        baseline: true,
        treatments: true,
        outcomes: true,
    };

    pub fn code(&self) -> String {
        let mut s = String::new();
        if self.baseline {
            s.push('b');
        }
        if self.treatments {
            s.push('a');
        }
        if self.outcomes {
            s.push('o');
        }
        if s.is_empty() {
            s.push_str("const");
        }
        s
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code {
            "b" => Ok(Self::B),
            "ba" => Ok(Self::BA),
            "bo" => Ok(Self::BO),
            "ao" => Ok(Self::AO),
            "bao" => Ok(Self::BAO),
            "const" => Ok(Self {
                baseline: false,
                treatments: false,
                outcomes: false,
            }),
            other => Err(Error::invalid_argument(format!(
                "unknown intensity components '{other}'"
            ))),
        }
    }
}

/// Kernel hyperparameters of the three intensity components. Lengthscales
/// are the raw SE denominators (`exp(-d^2/l)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentKernelParams {
    pub baseline_variance: f64,
    pub baseline_lengthscale: f64,
    pub treatment_variance: f64,
    pub treatment_time_lengthscale: f64,
    pub treatment_mark_lengthscale: Option<f64>,
    pub outcome_variance: f64,
    pub outcome_time_lengthscale: f64,
    pub outcome_mark_lengthscale: Option<f64>,
}

impl Default for TreatmentKernelParams {
    fn default() -> Self {
        TreatmentKernelParams {
            baseline_variance: 0.1,
            baseline_lengthscale: 7.0,
            treatment_variance: 0.05,
            treatment_time_lengthscale: 1.0,
            treatment_mark_lengthscale: None,
            outcome_variance: 0.15,
            outcome_time_lengthscale: 100.0,
            outcome_mark_lengthscale: Some(2.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentConfig {
    pub components: IntensityComponents,
    pub q_treatments: usize,
    pub q_outcomes: usize,
    pub beta0: f64,
    pub kernel: TreatmentKernelParams,
    pub num_inducing: usize,
}

impl Default for TreatmentConfig {
    fn default() -> Self {
        TreatmentConfig {
            components: IntensityComponents::AO,
            q_treatments: 1,
            q_outcomes: 1,
            beta0: 0.1,
            kernel: TreatmentKernelParams::default(),
            num_inducing: 20,
        }
    }
}

impl TreatmentConfig {
    pub fn with_components(components: IntensityComponents) -> Self {
        TreatmentConfig {
            components,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.treatments && self.q_treatments < 1 {
            return Err(Error::invalid_argument(
                "Q_a must be >= 1 when the treatment-effect component is enabled",
            ));
        }
        if self.components.outcomes && self.q_outcomes < 1 {
            return Err(Error::invalid_argument(
                "Q_o must be >= 1 when the outcome-effect component is enabled",
            ));
        }
        if !(self.beta0 >= 0.0) {
            return Err(Error::invalid_argument("beta0 must be >= 0"));
        }
        let k = &self.kernel;
        for (name, v) in [
            ("baseline_variance", k.baseline_variance),
            ("baseline_lengthscale", k.baseline_lengthscale),
            ("treatment_variance", k.treatment_variance),
            ("treatment_time_lengthscale", k.treatment_time_lengthscale),
            ("outcome_variance", k.outcome_variance),
            ("outcome_time_lengthscale", k.outcome_time_lengthscale),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid_argument(format!("{name} must be > 0")));
            }
        }
        if self.num_inducing < 1 {
            return Err(Error::invalid_argument("num_inducing must be >= 1"));
        }
        Ok(())
    }

    /// Number of treatment slots present in the model inputs (zero when the
    /// component is disabled).
    pub fn slots_treatments(&self) -> usize {
        if self.components.treatments {
            self.q_treatments
        } else {
            0
        }
    }

    pub fn slots_outcomes(&self) -> usize {
        if self.components.outcomes {
            self.q_outcomes
        } else {
            0
        }
    }

    /// Materializes the masked regressive kernel for the enabled components.
    pub fn build_kernel(&self) -> TreatmentKernel {
        let k = &self.kernel;
        TreatmentKernel {
            baseline: self
                .components
                .baseline
                .then_some((k.baseline_variance, k.baseline_lengthscale)),
            treatment_slots: vec![
                SlotParams {
                    variance: k.treatment_variance,
                    time_lengthscale: k.treatment_time_lengthscale,
                    mark_lengthscale: k.treatment_mark_lengthscale,
                };
                self.slots_treatments()
            ],
            outcome_slots: vec![
                SlotParams {
                    variance: k.outcome_variance,
                    time_lengthscale: k.outcome_time_lengthscale,
                    mark_lengthscale: k.outcome_mark_lengthscale,
                };
                self.slots_outcomes()
            ],
        }
    }
}

/// Builds the regressive input `r(tau)` from a history: slot `i` holds the
/// relative time and mark of the `(i+1)`-th most recent event strictly
/// before `tau`, placeholders where fewer past events exist.
pub fn retrieve_inputs(
    history: &EventHistory,
    tau: f64,
    config: &TreatmentConfig,
) -> Result<RegressiveInput> {
    if !history.is_sorted() {
        return Err(Error::invalid_argument(
            "retrieve_inputs: history streams must be strictly increasing",
        ));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid_argument("retrieve_inputs: tau must be >= 0"));
    }
    Ok(retrieve_unchecked(history, tau, config, false))
}

/// Like [`retrieve_inputs`] but treats events at exactly `tau` as past
/// events. Used when freezing the history at an interval's left endpoint.
fn retrieve_unchecked(
    history: &EventHistory,
    tau: f64,
    config: &TreatmentConfig,
    inclusive: bool,
) -> RegressiveInput {
    let slots = |events: &[crate::data::Event], q: usize| -> Vec<EventSlot> {
        let n = if inclusive {
            events.partition_point(|e| e.time <= tau)
        } else {
            events.partition_point(|e| e.time < tau)
        };
        (0..q)
            .map(|i| {
                if i < n {
                    let e = &events[n - 1 - i];
                    EventSlot::Present {
                        rel_time: tau - e.time,
                        mark: e.value,
                    }
                } else {
                    EventSlot::Placeholder
                }
            })
            .collect()
    };
    RegressiveInput {
        absolute_time: tau,
        last_treatments: slots(&history.treatments, config.slots_treatments()),
        last_outcomes: slots(&history.outcomes, config.slots_outcomes()),
    }
}

/// Inducing-point variational state: `q(u) = N(m, S)` with `S = L L^T`
/// parameterized by its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub inducing: Vec<RegressiveInput>,
    pub mean: DVector<f64>,
    pub cov_chol: DMatrix<f64>,
}

impl VariationalState {
    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_chol * self.cov_chol.transpose()
    }
}

pub(crate) struct ModelCache {
    pub kernel: TreatmentKernel,
    pub kzz_chol: Cholesky<f64, Dyn>,
    pub kzz_inv: DMatrix<f64>,
    pub logdet_kzz: f64,
    /// `K_zz^{-1} m`
    pub alpha: DVector<f64>,
}

/// A treatment policy: intensity model plus mark model, labeled.
pub struct TreatmentModel {
    pub config: TreatmentConfig,
    pub vstate: VariationalState,
    pub mark_model: MarkModel,
    pub policy_label: String,
    cache: OnceCell<ModelCache>,
}

impl Clone for TreatmentModel {
    fn clone(&self) -> Self {
        TreatmentModel {
            config: self.config.clone(),
            vstate: self.vstate.clone(),
            mark_model: self.mark_model.clone(),
            policy_label: self.policy_label.clone(),
            cache: OnceCell::new(),
        }
    }
}

impl std::fmt::Debug for TreatmentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TreatmentModel")
            .field("config", &self.config)
            .field("policy_label", &self.policy_label)
            .field("num_inducing", &self.vstate.num_inducing())
            .finish()
    }
}

impl TreatmentModel {
    pub fn new(
        config: TreatmentConfig,
        vstate: VariationalState,
        mark_model: MarkModel,
        policy_label: impl Into<String>,
    ) -> Result<Self> {
        let policy_label = policy_label.into();
        if policy_label.is_empty() {
            return Err(Error::invalid_argument("policy label must be nonempty"));
        }
        config.validate()?;
        if vstate.mean.len() != vstate.num_inducing()
            || vstate.cov_chol.nrows() != vstate.num_inducing()
        {
            return Err(Error::invalid_argument(
                "variational state dimensions do not match inducing count",
            ));
        }
        let model = TreatmentModel {
            config,
            vstate,
            mark_model,
            policy_label,
            cache: OnceCell::new(),
        };
        model.cache()?;
        Ok(model)
    }

    /// Initializes a model from data: inducing grids per active dimension,
    /// `m = 0` and `S = K_zz` (so `q(u)` starts at the prior).
    pub fn init(
        config: TreatmentConfig,
        policy_label: impl Into<String>,
        dataset: &[DayTrajectory],
        mark_model: MarkModel,
    ) -> Result<Self> {
        config.validate()?;
        let inducing = inducing_grid(&config, dataset);
        let kernel = config.build_kernel();
        let m = inducing.len();
        let kzz = crate::kernels::gram_with(
            &inducing,
            |a, b| kernel.eval(a, b).expect("inducing inputs are well-formed"),
            DEFAULT_JITTER,
        );
        let chol = kzz
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("initial K_zz is not positive definite"))?;
        let vstate = VariationalState {
            inducing,
            mean: DVector::zeros(m),
            cov_chol: chol.l(),
        };
        TreatmentModel::new(config, vstate, mark_model, policy_label)
    }

    pub(crate) fn cache(&self) -> Result<&ModelCache> {
        self.cache.get_or_try_init(|| {
            let kernel = self.config.build_kernel();
            let kzz = crate::kernels::gram_with(
                &self.vstate.inducing,
                |a, b| kernel.eval(a, b).expect("inducing inputs are well-formed"),
                DEFAULT_JITTER,
            );
            let kzz_chol = kzz
                .clone()
                .cholesky()
                .ok_or_else(|| Error::numerical("K_zz is not positive definite beyond jitter"))?;
            let logdet_kzz = 2.0 * kzz_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let kzz_inv = kzz_chol.inverse();
            let alpha = kzz_chol.solve(&self.vstate.mean);
            Ok(ModelCache {
                kernel,
                kzz_chol,
                kzz_inv,
                logdet_kzz,
                alpha,
            })
        })
    }

    /// Cross-covariance vector `k(x, Z)`.
    pub(crate) fn kvec(&self, input: &RegressiveInput) -> Result<DVector<f64>> {
        let cache = self.cache()?;
        let mut k = DVector::zeros(self.vstate.num_inducing());
        for (j, z) in self.vstate.inducing.iter().enumerate() {
            k[j] = cache.kernel.eval(input, z)?;
        }
        Ok(k)
    }

    /// Posterior moments of the latent function at one input under `q`:
    /// `mu = k_xz K^{-1} m`,
    /// `var = K_xx - k_xz K^{-1} k_zx + k_xz K^{-1} S K^{-1} k_zx`.
    pub fn latent_moments(&self, input: &RegressiveInput) -> Result<(f64, f64)> {
        let cache = self.cache()?;
        let k = self.kvec(input)?;
        let mean = k.dot(&cache.alpha);
        let w = cache.kzz_chol.solve(&k);
        let lw = self.vstate.cov_chol.transpose() * &w;
        let var = cache.kernel.diag(input) - k.dot(&w) + lw.norm_squared();
        if var < -1e-6 {
            return Err(Error::numerical(format!(
                "latent variance {var} is negative beyond tolerance"
            )));
        }
        Ok((mean, var.max(0.0)))
    }

    /// Plug-in conditional intensity
    /// `E_q[(beta0 + f)^2] = (beta0 + mu)^2 + var`, in events/hour.
    pub fn intensity(&self, history: &EventHistory, tau: f64) -> Result<f64> {
        let input = retrieve_inputs(history, tau, &self.config)?;
        let (mu, var) = self.latent_moments(&input)?;
        let shifted = self.config.beta0 + mu;
        Ok(shifted * shifted + var)
    }

    /// Evidence lower bound over a dataset of day trajectories.
    pub fn elbo(&self, dataset: &[DayTrajectory]) -> Result<ElboParts> {
        elbo::elbo(self, dataset)
    }

    /// Variational lower bound on the held-out log-likelihood: the ELBO's
    /// data and integral parts on the held-out day, without the KL term.
    pub fn test_log_likelihood_bound(&self, heldout: &DayTrajectory) -> Result<f64> {
        let parts = tll_parts(self, heldout)?;
        Ok(parts.data_term - parts.integral_term)
    }

    pub fn phi_vector(&self, t0: f64, t1: f64, history: &EventHistory) -> Result<DVector<f64>> {
        elbo::phi_vector(self, t0, t1, history)
    }

    pub fn psi_matrix(&self, t0: f64, t1: f64, history: &EventHistory) -> Result<DMatrix<f64>> {
        elbo::psi_matrix(self, t0, t1, history)
    }

    pub fn to_json(&self) -> Result<String> {
        let m = self.vstate.num_inducing();
        let mut s_chol = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            for j in 0..=i {
                s_chol.push(self.vstate.cov_chol[(i, j)]);
            }
        }
        crate::jsonfmt::to_string(&SerializedTreatmentModel {
            config: self.config.clone(),
            policy_label: self.policy_label.clone(),
            z: self.vstate.inducing.clone(),
            m_vec: self.vstate.mean.iter().copied().collect(),
            s_chol,
            mark_model: self.mark_model.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SerializedTreatmentModel = crate::jsonfmt::from_str(text)?;
        let m = raw.z.len();
        if raw.m_vec.len() != m || raw.s_chol.len() != m * (m + 1) / 2 {
            return Err(Error::invalid_argument(
                "treatment model json: inconsistent dimensions",
            ));
        }
        let mut chol = DMatrix::zeros(m, m);
        let mut it = raw.s_chol.iter();
        for i in 0..m {
            for j in 0..=i {
                chol[(i, j)] = *it.next().expect("length checked");
            }
        }
        TreatmentModel::new(
            raw.config,
            VariationalState {
                inducing: raw.z,
                mean: DVector::from_vec(raw.m_vec),
                cov_chol: chol,
            },
            raw.mark_model,
            raw.policy_label,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct SerializedTreatmentModel {
    config: TreatmentConfig,
    policy_label: String,
    z: Vec<RegressiveInput>,
    m_vec: Vec<f64>,
    /// Row-major lower triangle of the Cholesky factor of S.
    s_chol: Vec<f64>,
    mark_model: MarkModel,
}

/// Regular inducing grids per active dimension. Relative-time dimensions
/// span `[0, q95]` of the observed event gaps so one huge gap does not
/// stretch the grid; mark dimensions span the observed value range. The
/// mark column of a two-dimensional slot is paired with the time column by
/// a coprime stride so the points cover the slot's plane instead of its
/// diagonal.
fn inducing_grid(config: &TreatmentConfig, dataset: &[DayTrajectory]) -> Vec<RegressiveInput> {
    let m = config.num_inducing;
    let linspace = |lo: f64, hi: f64| -> Vec<f64> {
        let (lo, hi) = if hi - lo > 1e-9 {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        if m == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..m)
            .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
            .collect()
    };
    let day_length = dataset
        .iter()
        .map(|d| d.day_length)
        .fold(24.0, f64::max);

    let gaps_q95 = |select: fn(&DayTrajectory) -> &[crate::data::Event], depth: usize| -> f64 {
        let mut spans: Vec<f64> = Vec::new();
        for day in dataset {
            let ev = select(day);
            // span seen by slot `depth`: from an event to the (depth+1)-th
            // following event, capped by the end of the day
            for k in 0..ev.len() {
                let hi = ev.get(k + depth + 1).map_or(day.day_length, |e| e.time);
                spans.push(hi - ev[k].time);
            }
        }
        if spans.is_empty() {
            return day_length;
        }
        spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((spans.len() as f64 - 1.0) * 0.95).round() as usize;
        spans[idx].max(1e-3)
    };
    let value_range = |select: fn(&DayTrajectory) -> &[crate::data::Event]| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for day in dataset {
            for e in select(day) {
                lo = lo.min(e.value);
                hi = hi.max(e.value);
            }
        }
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    };

    // stride coprime with m, close to the golden ratio, for mark pairing
    let stride = {
        let mut s = ((m as f64) * 0.618).round() as usize;
        s = s.max(1);
        while m > 1 && gcd(s, m) != 1 {
            s += 1;
        }
        s % m.max(1)
    };
    let permuted = |vals: &[f64]| -> Vec<f64> {
        (0..m).map(|j| vals[(j * stride) % m]).collect()
    };

    let baseline_grid = linspace(0.0, day_length);
    let t_sel: fn(&DayTrajectory) -> &[crate::data::Event] = |d| &d.treatments;
    let o_sel: fn(&DayTrajectory) -> &[crate::data::Event] = |d| &d.outcomes;

    let mut treat_cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for i in 0..config.slots_treatments() {
        let rel = linspace(0.0, gaps_q95(t_sel, i));
        let (lo, hi) = value_range(t_sel);
        treat_cols.push((rel, permuted(&linspace(lo, hi))));
    }
    let mut out_cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for i in 0..config.slots_outcomes() {
        let rel = linspace(0.0, gaps_q95(o_sel, i));
        let (lo, hi) = value_range(o_sel);
        out_cols.push((rel, permuted(&linspace(lo, hi))));
    }

    (0..m)
        .map(|j| RegressiveInput {
            absolute_time: baseline_grid[j],
            last_treatments: treat_cols
                .iter()
                .map(|(rel, mark)| EventSlot::Present {
                    rel_time: rel[j],
                    mark: mark[j],
                })
                .collect(),
            last_outcomes: out_cols
                .iter()
                .map(|(rel, mark)| EventSlot::Present {
                    rel_time: rel[j],
                    mark: mark[j],
                })
                .collect(),
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// GP regression of treatment dosages on time of day, used as the mark
/// model `p*(m | t)`. The prior mean is the training mean; the predictive
/// variance includes the observation noise.
#[derive(Debug, Serialize, Deserialize)]
pub struct MarkModel {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub train_times: Vec<f64>,
    pub train_marks: Vec<f64>,
    #[serde(skip)]
    cache: OnceCell<MarkCache>,
}

#[derive(Debug)]
struct MarkCache {
    chol: Cholesky<f64, Dyn>,
    /// `(K + noise I)^{-1} (y - mean)`
    weights: DVector<f64>,
    prior_mean: f64,
}

impl Clone for MarkModel {
    fn clone(&self) -> Self {
        MarkModel {
            kernel: self.kernel.clone(),
            noise_variance: self.noise_variance,
            train_times: self.train_times.clone(),
            train_marks: self.train_marks.clone(),
            cache: OnceCell::new(),
        }
    }
}

impl PartialEq for MarkModel {
    fn eq(&self, other: &Self) -> bool {
        self.kernel == other.kernel
            && self.noise_variance == other.noise_variance
            && self.train_times == other.train_times
            && self.train_marks == other.train_marks
    }
}

impl MarkModel {
    pub fn new(kernel: KernelSpec, noise_variance: f64) -> Result<Self> {
        kernel.validate()?;
        if !(noise_variance > 0.0) {
            return Err(Error::invalid_argument("noise_variance must be > 0"));
        }
        Ok(MarkModel {
            kernel,
            noise_variance,
            train_times: Vec::new(),
            train_marks: Vec::new(),
            cache: OnceCell::new(),
        })
    }

    /// Default mark model: periodic kernel over the 24h day.
    pub fn default_daily(variance: f64, lengthscale: f64, noise_variance: f64) -> Result<Self> {
        MarkModel::new(
            KernelSpec::Periodic {
                variance,
                lengthscale,
                period_hours: 24.0,
            },
            noise_variance,
        )
    }

    pub fn with_training_pairs(mut self, pairs: &[(f64, f64)]) -> Self {
        self.train_times = pairs.iter().map(|(t, _)| t.rem_euclid(24.0)).collect();
        self.train_marks = pairs.iter().map(|(_, m)| *m).collect();
        self.cache = OnceCell::new();
        self
    }

    /// Replaces the training set with all treatment events of a dataset.
    pub fn fit(&self, dataset: &[DayTrajectory]) -> Self {
        let pairs: Vec<(f64, f64)> = dataset
            .iter()
            .flat_map(|d| d.treatments.iter().map(|e| (e.time, e.value)))
            .collect();
        self.clone().with_training_pairs(&pairs)
    }

    fn cache(&self) -> Result<&MarkCache> {
        if self.train_times.is_empty() {
            return Err(Error::invalid_state(
                "mark model has no training data; fit it first",
            ));
        }
        self.cache.get_or_try_init(|| {
            let n = self.train_times.len();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = self.kernel.eval_scalar(self.train_times[i], self.train_times[j])?;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
                k[(i, i)] += self.noise_variance;
            }
            let chol = k
                .cholesky()
                .ok_or_else(|| Error::numerical("mark model gram is not positive definite"))?;
            let prior_mean = self.train_marks.iter().sum::<f64>() / n as f64;
            let centered = DVector::from_iterator(n, self.train_marks.iter().map(|m| m - prior_mean));
            let weights = chol.solve(&centered);
            Ok(MarkCache {
                chol,
                weights,
                prior_mean,
            })
        })
    }

    /// Predictive mean and variance of the dosage at time `tau` (hours,
    /// folded into the day).
    pub fn predict(&self, tau: f64) -> Result<(f64, f64)> {
        let cache = self.cache()?;
        let x = tau.rem_euclid(24.0);
        let n = self.train_times.len();
        let kvec = DVector::from_iterator(
            n,
            self.train_times
                .iter()
                .map(|t| self.kernel.eval_scalar(x, *t).expect("validated kernel")),
        );
        let mean = cache.prior_mean + kvec.dot(&cache.weights);
        let w = cache.chol.solve(&kvec);
        let var = self.kernel.scalar_diag()? + self.noise_variance - kvec.dot(&w);
        Ok((mean, var.max(0.0)))
    }

    pub fn sample(&self, tau: f64, rng: &mut impl rand::Rng) -> Result<f64> {
        let z: f64 = crate::sampler::standard_normal(rng);
        self.sample_with_z(tau, z)
    }

    /// Dosage draw from a shared standard-normal variate, for coupled
    /// sampling across models.
    pub fn sample_with_z(&self, tau: f64, z: f64) -> Result<f64> {
        let (mean, var) = self.predict(tau)?;
        Ok(mean + var.sqrt() * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use approx::assert_relative_eq;

    fn history(treatments: &[(f64, f64)], outcomes: &[(f64, f64)]) -> EventHistory {
        EventHistory {
            treatments: treatments.iter().map(|&(t, v)| Event::new(t, v)).collect(),
            outcomes: outcomes.iter().map(|&(t, v)| Event::new(t, v)).collect(),
        }
    }

    #[test]
    fn retrieve_empty_history_gives_placeholders() {
        let cfg = TreatmentConfig::default();
        let r = retrieve_inputs(&EventHistory::new(), 5.0, &cfg).unwrap();
        assert_eq!(r.last_treatments, vec![EventSlot::Placeholder]);
        assert_eq!(r.last_outcomes, vec![EventSlot::Placeholder]);
    }

    #[test]
    fn retrieve_single_treatment() {
        let cfg = TreatmentConfig::default();
        let h = history(&[(2.0, 35.0)], &[]);
        let r = retrieve_inputs(&h, 5.0, &cfg).unwrap();
        assert_eq!(
            r.last_treatments[0],
            EventSlot::Present {
                rel_time: 3.0,
                mark: 35.0
            }
        );
    }

    #[test]
    fn retrieve_matches_brute_force_scan() {
        let cfg = TreatmentConfig::default();
        let h = history(&[(1.0, 10.0), (2.0, 20.0), (4.0, 40.0)], &[(3.0, 5.5)]);
        let tau = 4.5;
        let r = retrieve_inputs(&h, tau, &cfg).unwrap();

        // brute force: scan the sorted history for the most recent events
        let last_t = h
            .treatments
            .iter()
            .filter(|e| e.time < tau)
            .next_back()
            .unwrap();
        let last_o = h.outcomes.iter().filter(|e| e.time < tau).next_back().unwrap();
        assert_eq!(
            r.last_treatments[0],
            EventSlot::Present {
                rel_time: tau - last_t.time,
                mark: last_t.value
            }
        );
        assert_eq!(
            r.last_outcomes[0],
            EventSlot::Present {
                rel_time: tau - last_o.time,
                mark: last_o.value
            }
        );
        assert_eq!(r.last_treatments[0], EventSlot::Present { rel_time: 0.5, mark: 40.0 });
        assert_eq!(r.last_outcomes[0], EventSlot::Present { rel_time: 1.5, mark: 5.5 });
    }

    #[test]
    fn retrieve_rejects_unsorted_history() {
        let cfg = TreatmentConfig::default();
        let h = history(&[(3.0, 1.0), (2.0, 1.0)], &[]);
        assert!(retrieve_inputs(&h, 5.0, &cfg).is_err());
    }

    #[test]
    fn retrieve_event_at_tau_is_excluded() {
        let cfg = TreatmentConfig::default();
        let h = history(&[(2.0, 35.0)], &[]);
        let r = retrieve_inputs(&h, 2.0, &cfg).unwrap();
        assert_eq!(r.last_treatments[0], EventSlot::Placeholder);
    }

    fn toy_model(components: IntensityComponents) -> TreatmentModel {
        let cfg = TreatmentConfig {
            components,
            num_inducing: 6,
            ..Default::default()
        };
        let day = DayTrajectory {
            day_length: 24.0,
            treatments: vec![Event::new(8.0, 30.0), Event::new(13.0, 50.0)],
            outcomes: (0..8).map(|i| Event::new(3.0 * i as f64, 5.0 + 0.1 * i as f64)).collect(),
        };
        let mark = MarkModel::default_daily(1.0, 1.0, 0.1)
            .unwrap()
            .with_training_pairs(&[(8.0, 30.0), (13.0, 50.0)]);
        TreatmentModel::init(cfg, "pi_test", &[day], mark).unwrap()
    }

    #[test]
    fn prior_state_recovers_prior_moments() {
        // m = 0, S = K_zz: q(f) equals the prior, so mean 0 and var K_xx.
        let model = toy_model(IntensityComponents::BAO);
        let x = RegressiveInput::all_placeholder(5.0, 1, 1);
        let (mu, var) = model.latent_moments(&x).unwrap();
        assert_relative_eq!(mu, 0.0, epsilon = 1e-12);
        let kxx = model.cache().unwrap().kernel.diag(&x);
        assert_relative_eq!(var, kxx, epsilon = 1e-8);
    }

    #[test]
    fn interpolation_limit_at_inducing_point() {
        let mut model = toy_model(IntensityComponents::BAO);
        let m = model.vstate.num_inducing();
        model.vstate.mean = DVector::from_fn(m, |i, _| 0.3 + 0.1 * i as f64);
        model.vstate.cov_chol = DMatrix::identity(m, m) * 1e-8;
        let model = TreatmentModel::new(
            model.config.clone(),
            model.vstate.clone(),
            model.mark_model.clone(),
            "pi_test",
        )
        .unwrap();
        let z3 = model.vstate.inducing[3].clone();
        let (mu, _) = model.latent_moments(&z3).unwrap();
        assert_relative_eq!(mu, model.vstate.mean[3], epsilon = 1e-4);
    }

    #[test]
    fn latent_moments_match_dense_oracle() {
        let model = {
            let mut m = toy_model(IntensityComponents::BAO);
            let n = m.vstate.num_inducing();
            m.vstate.mean = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
            let mut l = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    l[(i, j)] = 0.05 * ((i * 7 + j * 3) as f64).cos();
                }
                l[(i, i)] += 0.4;
            }
            m.vstate.cov_chol = l;
            TreatmentModel::new(m.config.clone(), m.vstate.clone(), m.mark_model.clone(), "pi_test")
                .unwrap()
        };
        let cache = model.cache().unwrap();
        let h = history(&[(2.0, 40.0)], &[(1.0, 5.0)]);
        let x = retrieve_inputs(&h, 4.0, &model.config).unwrap();

        // dense brute force with explicit inverse
        let kern = &cache.kernel;
        let m = model.vstate.num_inducing();
        let mut kzz = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                kzz[(i, j)] = kern
                    .eval(&model.vstate.inducing[i], &model.vstate.inducing[j])
                    .unwrap();
            }
            kzz[(i, i)] += DEFAULT_JITTER;
        }
        let kinv = kzz.try_inverse().unwrap();
        let kx = model.kvec(&x).unwrap();
        let s = model.vstate.cov();
        let mu_expect = (kx.transpose() * &kinv * &model.vstate.mean)[(0, 0)];
        let var_expect = kern.diag(&x) - (kx.transpose() * &kinv * &kx)[(0, 0)]
            + (kx.transpose() * &kinv * &s * &kinv * &kx)[(0, 0)];

        let (mu, var) = model.latent_moments(&x).unwrap();
        assert_relative_eq!(mu, mu_expect, epsilon = 1e-9);
        assert_relative_eq!(var, var_expect, epsilon = 1e-9);
    }

    #[test]
    fn intensity_formula_cases() {
        // mu = 0, var = 0: lambda = beta0^2
        let beta0: f64 = 0.1;
        assert_relative_eq!((beta0 + 0.0f64).powi(2) + 0.0, 0.01);
        // mu = -beta0, var = 0: root of the square
        assert_relative_eq!((beta0 + (-beta0)).powi(2) + 0.0, 0.0);
        // mu = 0.5, var = 0.04
        assert_relative_eq!((0.1f64 + 0.5).powi(2) + 0.04, 0.40, epsilon = 1e-12);
    }

    #[test]
    fn intensity_nonnegative_and_nesting() {
        let bao = toy_model(IntensityComponents::BAO);
        let b = toy_model(IntensityComponents::B);
        let h = history(&[(8.0, 30.0)], &[(6.0, 5.0)]);
        for i in 0..40 {
            let tau = 0.3 + i as f64 * 0.57;
            assert!(bao.intensity(&h, tau).unwrap() >= 0.0);
            assert!(b.intensity(&h, tau).unwrap() >= 0.0);
        }
        // Nesting: with zeroed inducing contribution the BAO model's mean
        // vanishes like the B model's; both reduce to beta0^2 plus prior
        // variance mass from their own kernels. Checked exactly at the level
        // of the mean by the prior-recovery test; here we check the B model
        // equals a BAO model whose treatment/outcome kernels never activate
        // (empty history).
        let empty = EventHistory::new();
        for i in 0..20 {
            let tau = 0.5 + i as f64 * 1.1;
            let lam_bao = bao.intensity(&empty, tau).unwrap();
            let xb = retrieve_inputs(&empty, tau, &b.config).unwrap();
            let (mu_b, var_b) = b.latent_moments(&xb).unwrap();
            // same baseline kernel, same (zero) mean: identical moments
            let xbao = retrieve_inputs(&empty, tau, &bao.config).unwrap();
            let (mu_bao, var_bao) = bao.latent_moments(&xbao).unwrap();
            assert_relative_eq!(mu_b, mu_bao, epsilon = 1e-10);
            assert_relative_eq!(var_b, var_bao, epsilon = 1e-8);
            assert_relative_eq!(
                lam_bao,
                (0.1 + mu_b) * (0.1 + mu_b) + var_b,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn mark_model_interpolates_training_point() {
        let m = MarkModel::default_daily(4.0, 0.5, 1e-10)
            .unwrap()
            .with_training_pairs(&[(8.0, 30.0), (13.0, 55.0), (19.0, 40.0)]);
        let (mean, _) = m.predict(13.0).unwrap();
        assert_relative_eq!(mean, 55.0, epsilon = 1e-4);
    }

    #[test]
    fn mark_model_reverts_to_prior_far_from_data() {
        // SE kernel so "far" exists (a periodic kernel never leaves data)
        let m = MarkModel::new(
            KernelSpec::SquaredExp {
                variance: 4.0,
                lengthscale: 0.01,
            },
            0.25,
        )
        .unwrap()
        .with_training_pairs(&[(6.0, 20.0), (7.0, 60.0)]);
        let (mean, var) = m.predict(18.0).unwrap();
        let prior_mean = 40.0;
        assert_relative_eq!(mean, prior_mean, epsilon = 1e-6);
        assert_relative_eq!(var, 4.0 + 0.25, epsilon = 1e-6);
    }

    #[test]
    fn mark_model_matches_dense_solve_oracle() {
        let pairs = [(6.0, 25.0), (9.5, 42.0), (12.0, 61.0), (18.5, 38.0), (22.0, 30.0)];
        let m = MarkModel::default_daily(9.0, 1.3, 0.6)
            .unwrap()
            .with_training_pairs(&pairs);
        let n = pairs.len();
        let kern = &m.kernel;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = kern.eval_scalar(pairs[i].0, pairs[j].0).unwrap();
            }
            k[(i, i)] += 0.6;
        }
        let kinv = k.try_inverse().unwrap();
        let ybar = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let y = DVector::from_iterator(n, pairs.iter().map(|p| p.1 - ybar));
        for tau in [3.3, 8.8, 15.1] {
            let kvec = DVector::from_iterator(n, pairs.iter().map(|p| kern.eval_scalar(tau, p.0).unwrap()));
            let mean_oracle = ybar + (kvec.transpose() * &kinv * &y)[(0, 0)];
            let var_oracle =
                kern.scalar_diag().unwrap() + 0.6 - (kvec.transpose() * &kinv * &kvec)[(0, 0)];
            let (mean, var) = m.predict(tau).unwrap();
            assert_relative_eq!(mean, mean_oracle, epsilon = 1e-8);
            assert_relative_eq!(var, var_oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn mark_model_without_data_is_invalid_state() {
        let m = MarkModel::default_daily(1.0, 1.0, 0.1).unwrap();
        assert!(matches!(m.predict(8.0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn model_json_roundtrip() {
        let model = toy_model(IntensityComponents::AO);
        let s = model.to_json().unwrap();
        let back = TreatmentModel::from_json(&s).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.vstate.inducing, model.vstate.inducing);
        assert_eq!(back.vstate.mean, model.vstate.mean);
        assert_eq!(back.vstate.cov_chol, model.vstate.cov_chol);
        assert_eq!(back.policy_label, model.policy_label);
    }
}
