//! Query execution against a fitted joint model: observational rollouts,
//! policy interventions and policy counterfactuals.
//!
//! A rollout alternates treatment sampling and outcome prediction over the
//! query grid: treatments in `[q_k, q_{k+1})` are thinned from the active
//! policy's intensity given the history so far, then the outcome at
//! `q_{k+1}` is drawn and appended, so later treatment intervals condition
//! on it. Interventional mode swaps the treatment intensity and keeps the
//! outcome model; counterfactual mode replays abduced thinning noise and
//! reuses abduced outcome residuals.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Event, EventHistory, PatientRecord};
use crate::error::{Error, Result};
use crate::outcome::OutcomeModel;
use crate::sampler::{
    sample_counterfactual_from_record, sample_fixed_noise, sample_ogata, standard_normal,
    stream_rng, NoiseRecord, PointProcess,
};
use crate::treatment::TreatmentModel;

/// A fitted joint model: one treatment model per policy label plus the
/// shared hierarchical outcome model.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub treatments: BTreeMap<String, TreatmentModel>,
    pub outcome: OutcomeModel,
}

impl JointModel {
    pub fn policy(&self, label: &str) -> Result<&TreatmentModel> {
        self.treatments
            .get(label)
            .ok_or_else(|| Error::invalid_argument(format!("unknown policy '{label}'")))
    }
}

/// Which SCM the rollout samples from.
#[derive(Debug, Clone)]
pub enum ScmMode {
    Observational,
    Interventional {
        policy: TreatmentModel,
    },
    Counterfactual {
        policy: TreatmentModel,
        /// Factual events of the query window.
        observed: EventHistory,
        /// Abduced (or generator-retained) thinning noise of the window.
        noise: NoiseRecord,
        /// Abduced outcome residuals at the observed measurement times.
        outcome_residuals: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub patient: String,
    /// Rollout window start (the intervention time).
    pub start: f64,
    pub horizon: f64,
    /// Outcome query times, strictly increasing inside `(start, horizon]`.
    pub query_times: Vec<f64>,
    pub mode: ScmMode,
    pub seed: u64,
}

impl QuerySpec {
    fn validate(&self) -> Result<()> {
        if self.query_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_argument(
                "query times must be strictly increasing",
            ));
        }
        if self
            .query_times
            .iter()
            .any(|&q| q <= self.start || q > self.horizon)
        {
            return Err(Error::invalid_argument(
                "query times must lie in (start, horizon]",
            ));
        }
        Ok(())
    }
}

/// One sampled joint trajectory: treatments in the window and outcomes at
/// the query times.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolloutResult {
    pub treatments: Vec<Event>,
    pub outcomes: Vec<Event>,
}

const TIME_MATCH_TOL: f64 = 1e-5;

/// Live treatment process: a policy model evaluated over a growing history.
/// Accepted candidates draw their dosage from the policy's mark model via a
/// per-candidate noise stream; retained factual points keep their observed
/// marks.
pub struct TreatmentSampler<'a> {
    model: &'a TreatmentModel,
    pub history: EventHistory,
    pub sampled: Vec<Event>,
    mark_seed: u64,
    interval_tag: u64,
    retained_marks: Vec<(f64, f64)>,
}

impl<'a> TreatmentSampler<'a> {
    pub fn new(model: &'a TreatmentModel, history: EventHistory, mark_seed: u64) -> Self {
        TreatmentSampler {
            model,
            history,
            sampled: Vec::new(),
            mark_seed,
            interval_tag: 0,
            retained_marks: Vec::new(),
        }
    }

    /// Marks to reuse for re-accepted factual points (counterfactual mode).
    pub fn with_retained_marks(mut self, observed_treatments: &[Event]) -> Self {
        self.retained_marks = observed_treatments
            .iter()
            .map(|e| (e.time, e.value))
            .collect();
        self
    }

    pub fn set_interval_tag(&mut self, tag: u64) {
        self.interval_tag = tag;
    }

    fn mark_for(&self, t: f64, candidate_index: u64) -> f64 {
        if let Some((_, m)) = self
            .retained_marks
            .iter()
            .find(|(ot, _)| (ot - t).abs() <= TIME_MATCH_TOL)
        {
            return *m;
        }
        let mut rng = stream_rng(self.mark_seed, &[self.interval_tag, candidate_index]);
        let z = standard_normal(&mut rng);
        // dosages are nonnegative by the data contract
        self.model
            .mark_model
            .sample_with_z(t, z)
            .map(|m| m.max(0.0))
            .unwrap_or(0.0)
    }
}

impl PointProcess for TreatmentSampler<'_> {
    fn intensity(&self, t: f64) -> f64 {
        // NaN propagates to a numerical-failure error inside the sampler
        self.model.intensity(&self.history, t).unwrap_or(f64::NAN)
    }

    fn notify_accept(&mut self, t: f64, candidate_index: u64) {
        let mark = self.mark_for(t, candidate_index);
        self.history.push_treatment(t, mark);
        self.sampled.push(Event::new(t, mark));
    }
}

/// Interval function returning the distance to the next event of a frozen
/// timeline (observed events plus window end): the thinning horizon used
/// when abducing over an observed window.
pub fn next_event_horizon(history: &EventHistory, t_end: f64) -> impl Fn(f64) -> f64 + '_ {
    let mut times: Vec<f64> = history
        .treatments
        .iter()
        .chain(history.outcomes.iter())
        .map(|e| e.time)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    move |tau: f64| {
        let idx = times.partition_point(|&t| t <= tau);
        let next = times.get(idx).copied().unwrap_or(t_end).min(t_end);
        if next > tau {
            next - tau
        } else {
            crate::sampler::DEFAULT_STEP_HOURS
        }
    }
}

fn patient_tag(patient: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Samples one joint trajectory under the spec's SCM mode. `policy_label`
/// is the patient's own (observed) policy; `history` holds the events up to
/// `spec.start`.
pub fn rollout(
    joint: &JointModel,
    policy_label: &str,
    history: &EventHistory,
    spec: &QuerySpec,
) -> Result<RolloutResult> {
    spec.validate()?;
    if !history.is_sorted() {
        return Err(Error::invalid_argument("rollout: history must be sorted"));
    }
    if history
        .treatments
        .iter()
        .chain(history.outcomes.iter())
        .any(|e| e.time > spec.start)
    {
        return Err(Error::invalid_argument(
            "rollout: history events must lie within [0, start]",
        ));
    }
    match &spec.mode {
        ScmMode::Observational => {
            let policy = joint.policy(policy_label)?;
            forward_rollout(joint, policy, history, spec)
        }
        ScmMode::Interventional { policy } => forward_rollout(joint, policy, history, spec),
        ScmMode::Counterfactual {
            policy,
            observed,
            noise,
            outcome_residuals,
        } => counterfactual_rollout(joint, policy, observed, noise, outcome_residuals, spec),
    }
}

fn forward_rollout(
    joint: &JointModel,
    policy: &TreatmentModel,
    history: &EventHistory,
    spec: &QuerySpec,
) -> Result<RolloutResult> {
    let tag = patient_tag(&spec.patient);
    let mut proc = TreatmentSampler::new(policy, history.clone(), spec.seed ^ tag);
    let mut rng = stream_rng(spec.seed, &[tag, 1]);
    let mut noise_rng = stream_rng(spec.seed, &[tag, 2]);
    let mut cond_outcomes = history.outcomes.clone();
    let mut outcomes = Vec::with_capacity(spec.query_times.len());

    let mut lo = spec.start;
    for (k, &q) in spec.query_times.iter().enumerate() {
        proc.set_interval_tag(k as u64);
        let l = |tau: f64| q - tau;
        sample_ogata(&mut proc, lo, q, &l, &mut rng)?;
        // the outcome term at q conditions on exactly the events before q
        debug_assert!(proc.history.treatments.iter().all(|e| e.time <= q));
        debug_assert!(cond_outcomes.iter().all(|e| e.time < q));
        let (mu, cov) = joint.outcome.predict(
            &spec.patient,
            &proc.history.treatments,
            &cond_outcomes,
            &[q],
        )?;
        let latent = mu[0] + cov[(0, 0)].max(0.0).sqrt() * standard_normal(&mut noise_rng);
        let y = latent + joint.outcome.noise_std * standard_normal(&mut noise_rng);
        cond_outcomes.push(Event::new(q, y));
        proc.history.push_outcome(q, y);
        outcomes.push(Event::new(q, y));
        lo = q;
    }
    Ok(RolloutResult {
        treatments: proc.sampled,
        outcomes,
    })
}

fn counterfactual_rollout(
    joint: &JointModel,
    policy: &TreatmentModel,
    observed: &EventHistory,
    noise: &NoiseRecord,
    residuals: &[(f64, f64)],
    spec: &QuerySpec,
) -> Result<RolloutResult> {
    // every query time must have an abduced residual
    let mut res_at = Vec::with_capacity(spec.query_times.len());
    for &q in &spec.query_times {
        let r = residuals
            .iter()
            .find(|(t, _)| (t - q).abs() <= TIME_MATCH_TOL)
            .ok_or_else(|| {
                Error::invalid_state(format!(
                    "counterfactual mode lacks an abduced residual at query time {q}"
                ))
            })?;
        res_at.push(r.1);
    }
    if noise.t_start > spec.start || noise.t_end < spec.horizon {
        return Err(Error::invalid_state(
            "counterfactual noise record does not cover the query window",
        ));
    }
    let posterior = joint.outcome.component_posterior(
        &spec.patient,
        &observed.treatments,
        &observed.outcomes,
    )?;
    let tag = patient_tag(&spec.patient);
    let mut proc = TreatmentSampler::new(policy, EventHistory::new(), spec.seed ^ tag)
        .with_retained_marks(&observed.treatments);
    let mut rng = stream_rng(spec.seed, &[tag, 3]);
    let mut outcomes = Vec::with_capacity(spec.query_times.len());

    let mut lo = spec.start;
    for (k, &q) in spec.query_times.iter().enumerate() {
        proc.set_interval_tag(k as u64);
        sample_counterfactual_from_record(&mut proc, noise, lo, q, &mut rng)?;
        let y = posterior.trajectory_mean(&proc.history.treatments, q) + res_at[k];
        proc.history.push_outcome(q, y);
        outcomes.push(Event::new(q, y));
        lo = q;
    }
    Ok(RolloutResult {
        treatments: proc.sampled,
        outcomes,
    })
}

/// Monte-Carlo query result: all sampled trajectories plus the pointwise
/// mean and 10/90% quantiles of the outcome at each query time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResult {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: Vec<RolloutResult>,
}

pub const DEFAULT_QUERY_ROLLOUTS: usize = 100;

fn summarize(query_times: &[f64], samples: Vec<RolloutResult>) -> QueryResult {
    let m = query_times.len();
    let mut mean = vec![0.0; m];
    let mut lo = vec![0.0; m];
    let mut hi = vec![0.0; m];
    for k in 0..m {
        let mut vals: Vec<f64> = samples.iter().map(|s| s.outcomes[k].value).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mean[k] = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let ql = ((vals.len() as f64 - 1.0) * 0.1).round() as usize;
        let qh = ((vals.len() as f64 - 1.0) * 0.9).round() as usize;
        lo[k] = vals.get(ql).copied().unwrap_or(f64::NAN);
        hi[k] = vals.get(qh).copied().unwrap_or(f64::NAN);
    }
    QueryResult {
        times: query_times.to_vec(),
        mean,
        lo,
        hi,
        samples,
    }
}

fn rollout_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1))
}

/// Runs independent rollouts of the spec (parallel, one rng stream per
/// rollout) and summarizes the outcome trajectories.
pub fn run_query(
    joint: &JointModel,
    policy_label: &str,
    history: &EventHistory,
    spec: &QuerySpec,
    n_rollouts: usize,
) -> Result<QueryResult> {
    let samples: Vec<RolloutResult> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.clone();
            s.seed = rollout_seed(spec.seed, i);
            rollout(joint, policy_label, history, &s)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&spec.query_times, samples))
}

/// Flattens a patient record into continuous time: day `d` maps onto
/// `[d*day_length, (d+1)*day_length]`.
pub fn continuous_history(record: &PatientRecord) -> EventHistory {
    let mut h = EventHistory::new();
    for (d, day) in record.days.iter().enumerate() {
        let off = d as f64 * day.day_length;
        for e in &day.treatments {
            h.treatments.push(Event::new(off + e.time, e.value));
        }
        for e in &day.outcomes {
            h.outcomes.push(Event::new(off + e.time, e.value));
        }
    }
    h
}

/// End of the observation period of a record, in continuous hours.
pub fn observation_end(record: &PatientRecord) -> f64 {
    record.days.iter().map(|d| d.day_length).sum()
}

/// Policy intervention query: from the end of the observation period, roll
/// the future out under `new_policy` while the outcome model stays fixed.
pub fn policy_intervention_query(
    joint: &JointModel,
    record: &PatientRecord,
    new_policy: &TreatmentModel,
    query_times: Vec<f64>,
    n_rollouts: usize,
    seed: u64,
) -> Result<QueryResult> {
    let start = observation_end(record);
    let horizon = query_times.last().copied().unwrap_or(start);
    let history = continuous_history(record);
    let spec = QuerySpec {
        patient: record.patient_id.clone(),
        start,
        horizon,
        query_times,
        mode: ScmMode::Interventional {
            policy: new_policy.clone(),
        },
        seed,
    };
    run_query(joint, &record.policy_label, &history, &spec, n_rollouts)
}

/// Policy counterfactual query over the observed window: abduce outcome
/// residuals and treatment thinning noise, then re-thin under the new
/// policy with the noise posteriors. Abduction of the thinning noise is
/// redrawn per rollout; the outcome residuals use the posterior mean.
pub fn policy_counterfactual_query(
    joint: &JointModel,
    record: &PatientRecord,
    new_policy: &TreatmentModel,
    n_rollouts: usize,
    seed: u64,
) -> Result<QueryResult> {
    let observed = continuous_history(record);
    let t_end = observation_end(record);
    let own_policy = joint.policy(&record.policy_label)?;
    let residuals: Vec<(f64, f64)> = {
        let r = joint.outcome.noise_posterior(
            &record.patient_id,
            &observed.treatments,
            &observed.outcomes,
        )?;
        observed.outcomes.iter().map(|e| e.time).zip(r).collect()
    };
    let query_times: Vec<f64> = observed.outcomes.iter().map(|e| e.time).collect();
    let obs_times: Vec<f64> = observed.treatments.iter().map(|e| e.time).collect();
    let tag = patient_tag(&record.patient_id);

    let samples: Vec<RolloutResult> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| -> Result<RolloutResult> {
            let sub_seed = rollout_seed(seed, i);
            let obs_proc = TreatmentSampler::new(own_policy, observed.clone(), 0);
            let cf_bound_proc = TreatmentSampler::new(new_policy, observed.clone(), 0);
            let l = next_event_horizon(&observed, t_end);
            let mut ab_rng = stream_rng(sub_seed, &[tag, 4]);
            let noise = crate::sampler::abduce_noise(
                &obs_proc,
                &obs_times,
                0.0,
                t_end,
                &l,
                &mut ab_rng,
                Some(&cf_bound_proc),
            )?;
            let spec = QuerySpec {
                patient: record.patient_id.clone(),
                start: 0.0,
                horizon: t_end,
                query_times: query_times.clone(),
                mode: ScmMode::Counterfactual {
                    policy: new_policy.clone(),
                    observed: observed.clone(),
                    noise,
                    outcome_residuals: residuals.clone(),
                },
                seed: sub_seed,
            };
            rollout(joint, &record.policy_label, &EventHistory::new(), &spec)
        })
        .collect::<Result<_>>()?;

    Ok(summarize(&query_times, samples))
}

/// A joint process taking part in a coupled fixed-noise rollout: the
/// treatment side is a `PointProcess`; `record_outcome` draws the process's
/// own outcome at a grid time and appends it to its history.
pub trait RolloutAgent: PointProcess {
    fn record_outcome(&mut self, q: f64) -> Result<f64>;
}

/// Rolls several joint processes forward against one shared thinning-noise
/// stream (candidate times, acceptance uniforms, mark draws), while each
/// process keeps its own history and its own outcome noise.
pub fn paired_rollout(
    agents: &mut [&mut dyn RolloutAgent],
    start: f64,
    query_times: &[f64],
    rng: &mut impl Rng,
) -> Result<()> {
    let mut lo = start;
    for &q in query_times {
        {
            let mut procs: Vec<&mut dyn PointProcess> = agents
                .iter_mut()
                .map(|a| &mut **a as &mut dyn PointProcess)
                .collect();
            let l = |tau: f64| q - tau;
            sample_fixed_noise(&mut procs, lo, q, &l, rng)?;
        }
        for a in agents.iter_mut() {
            a.record_outcome(q)?;
        }
        lo = q;
    }
    Ok(())
}

/// A fitted joint model participating in a coupled rollout. Its structural
/// outcome functions are the component-posterior means given the patient's
/// conditioning window (the fitted patient-specific model); only the
/// observation noise is drawn fresh.
pub struct FittedAgent<'a> {
    pub sampler: TreatmentSampler<'a>,
    posterior: crate::outcome::ComponentPosterior,
    noise_std: f64,
    noise_rng: ChaCha12Rng,
    interval: u64,
    pub outcomes: Vec<Event>,
}

impl<'a> FittedAgent<'a> {
    /// `conditioning` is the factual window the fitted functions are read
    /// off; `history` seeds the rollout world (it may be empty when
    /// re-simulating the conditioning window itself).
    pub fn new(
        treatment: &'a TreatmentModel,
        outcome: &'a OutcomeModel,
        patient: impl Into<String>,
        conditioning: &EventHistory,
        history: EventHistory,
        mark_seed: u64,
        noise_seed: u64,
    ) -> Result<Self> {
        let patient = patient.into();
        let posterior = outcome.component_posterior(
            &patient,
            &conditioning.treatments,
            &conditioning.outcomes,
        )?;
        let tag = patient_tag(&patient);
        Ok(FittedAgent {
            sampler: TreatmentSampler::new(treatment, history, mark_seed),
            posterior,
            noise_std: outcome.noise_std,
            noise_rng: stream_rng(noise_seed, &[tag, 5]),
            interval: 0,
            outcomes: Vec::new(),
        })
    }
}

impl PointProcess for FittedAgent<'_> {
    fn intensity(&self, t: f64) -> f64 {
        self.sampler.intensity(t)
    }

    fn notify_accept(&mut self, t: f64, candidate_index: u64) {
        self.sampler.notify_accept(t, candidate_index);
    }
}

impl RolloutAgent for FittedAgent<'_> {
    fn record_outcome(&mut self, q: f64) -> Result<f64> {
        self.interval += 1;
        self.sampler.set_interval_tag(self.interval);
        let y = self
            .posterior
            .trajectory_mean(&self.sampler.history.treatments, q)
            + self.noise_std * standard_normal(&mut self.noise_rng);
        self.sampler.history.push_outcome(q, y);
        self.outcomes.push(Event::new(q, y));
        Ok(y)
    }
}
