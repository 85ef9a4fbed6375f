//! Ground-truth simulator construction and semi-synthetic dataset
//! generation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DayTrajectory, Event, EventHistory, PatientRecord};
use crate::engine::{RolloutAgent, TreatmentSampler};
use crate::error::Result;
use crate::kernels::{EventSlot, RegressiveInput};
use crate::outcome::ScalingParams;
use crate::sampler::{
    sample_counterfactual_from_record, sample_ogata, standard_normal, stream_rng, NoiseRecord,
    PointProcess,
};
use crate::treatment::{
    IntensityComponents, MarkModel, TreatmentConfig, TreatmentModel, VariationalState,
};

use super::{ExperimentConfig, POLICY_LABELS};

/// One outcome group: a deterministic daily baseline profile and a shared
/// response bump, both realizable by the outcome model class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimGroup {
    pub label: String,
    pub baseline_level: f64,
    pub baseline_amplitude: f64,
    pub baseline_phase: f64,
    /// Group-level dose scaling; patients add a small jitter on top.
    pub scaling: ScalingParams,
    pub shape_peak: f64,
    pub shape_width: f64,
    pub window_hours: f64,
}

impl SimGroup {
    pub fn baseline(&self, tau: f64) -> f64 {
        self.baseline_level
            + self.baseline_amplitude
                * (2.0 * std::f64::consts::PI * (tau - self.baseline_phase) / 24.0).sin()
    }

    /// Unit-amplitude response shape, zero outside `[0, window]`.
    pub fn shape(&self, delta: f64) -> f64 {
        if delta < 0.0 || delta > self.window_hours {
            return 0.0;
        }
        let z = (delta - self.shape_peak) / self.shape_width;
        (-0.5 * z * z).exp()
    }

    pub fn response(&self, scaling: &ScalingParams, treatments: &[Event], tau: f64) -> f64 {
        treatments
            .iter()
            .map(|a| scaling.eval(a.value) * self.shape(tau - a.time))
            .sum()
    }

    pub fn trajectory(&self, scaling: &ScalingParams, treatments: &[Event], tau: f64) -> f64 {
        self.baseline(tau) + self.response(scaling, treatments, tau)
    }
}

#[derive(Debug, Clone)]
pub struct SimPatient {
    pub id: String,
    pub policy: String,
    pub group: usize,
    pub scaling: ScalingParams,
}

/// The ground-truth joint simulator: one history-dependent treatment model
/// per policy, three outcome groups, per-patient dose scalings and the
/// outcome noise level.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub policies: BTreeMap<String, TreatmentModel>,
    pub groups: Vec<SimGroup>,
    pub patients: Vec<SimPatient>,
    pub noise_std: f64,
    pub config: ExperimentConfig,
}

impl Simulator {
    pub fn patient(&self, id: &str) -> Option<&SimPatient> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn group_of(&self, patient: &SimPatient) -> &SimGroup {
        &self.groups[patient.group]
    }
}

/// Shape of one ground-truth policy intensity, interpolated through the
/// inducing values of a treatment-and-outcome dependent model.
struct PolicyShape {
    beta0: f64,
    /// post-meal suppression depth and decay (hours)
    suppress_depth: f64,
    suppress_decay: f64,
    /// recovery bump height, location and squared width
    recover_height: f64,
    recover_peak: f64,
    recover_width: f64,
    /// outcome effect: slope * (reference - glucose)
    glucose_slope: f64,
    glucose_ref: f64,
    mark_anchors: Vec<(f64, f64)>,
}

impl PolicyShape {
    fn g_treatment(&self, delta: f64) -> f64 {
        -self.suppress_depth * (-delta / self.suppress_decay).exp()
            + self.recover_height
                * (-(delta - self.recover_peak) * (delta - self.recover_peak)
                    / self.recover_width)
                    .exp()
    }

    fn g_outcome(&self, y: f64) -> f64 {
        self.glucose_slope * (self.glucose_ref - y)
    }
}

fn build_policy_model(label: &str, shape: &PolicyShape) -> Result<TreatmentModel> {
    let config = TreatmentConfig {
        components: IntensityComponents::AO,
        beta0: shape.beta0,
        num_inducing: 20,
        ..Default::default()
    };
    let m = config.num_inducing;
    let linspace = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (m - 1) as f64;
    // coprime stride pairs the glucose column against the relative-time
    // columns so inducing points cover the slot planes
    let stride = 13;
    let inducing: Vec<RegressiveInput> = (0..m)
        .map(|j| RegressiveInput {
            absolute_time: linspace(0.0, 24.0, j),
            last_treatments: vec![EventSlot::Present {
                rel_time: linspace(0.0, 8.0, j),
                mark: 0.0,
            }],
            last_outcomes: vec![EventSlot::Present {
                rel_time: linspace(0.0, 0.7, j),
                mark: linspace(3.5, 9.5, (j * stride) % m),
            }],
        })
        .collect();
    let targets = nalgebra::DVector::from_iterator(
        m,
        inducing.iter().map(|z| {
            let EventSlot::Present { rel_time, .. } = z.last_treatments[0] else {
                unreachable!()
            };
            let EventSlot::Present { mark, .. } = z.last_outcomes[0] else {
                unreachable!()
            };
            shape.g_treatment(rel_time) + shape.g_outcome(mark)
        }),
    );
    let kernel = config.build_kernel();
    let kzz = crate::kernels::gram_with(
        &inducing,
        |a, b| kernel.eval(a, b).expect("well-formed inducing inputs"),
        crate::kernels::DEFAULT_JITTER,
    );
    let chol = kzz
        .cholesky()
        .ok_or_else(|| crate::Error::numerical("simulator K_zz not positive definite"))?;
    // near-deterministic latent state interpolating the targets
    let vstate = VariationalState {
        inducing,
        mean: targets,
        cov_chol: chol.l() * 1e-2,
    };
    let mark_model = MarkModel::default_daily(120.0, 1.0, 30.0)?
        .with_training_pairs(&shape.mark_anchors);
    TreatmentModel::new(config, vstate, mark_model, label)
}

/// Builds the ground-truth simulator for a config: two policies with
/// visibly different daily meal counts and mark profiles, three outcome
/// groups with distinct baselines and response magnitudes, and per-patient
/// dose scalings jittered around their group's values.
pub fn build_simulator(config: &ExperimentConfig, seed: u64) -> Result<Simulator> {
    config.validate()?;
    let shape_a = PolicyShape {
        beta0: 0.38,
        suppress_depth: 0.38,
        suppress_decay: 1.3,
        recover_height: 0.36,
        recover_peak: 3.2,
        recover_width: 2.4,
        glucose_slope: 0.06,
        glucose_ref: 5.6,
        mark_anchors: vec![
            (6.5, 40.0),
            (9.0, 47.0),
            (12.5, 54.0),
            (16.0, 44.0),
            (19.5, 56.0),
            (22.0, 40.0),
        ],
    };
    let shape_b = PolicyShape {
        beta0: 0.41,
        suppress_depth: 0.41,
        suppress_decay: 1.6,
        recover_height: 0.28,
        recover_peak: 5.5,
        recover_width: 3.0,
        glucose_slope: 0.22,
        glucose_ref: 5.0,
        mark_anchors: vec![(7.0, 64.0), (12.0, 56.0), (17.0, 60.0), (21.0, 52.0)],
    };
    let mut policies = BTreeMap::new();
    policies.insert(
        POLICY_LABELS[0].to_string(),
        build_policy_model(POLICY_LABELS[0], &shape_a)?,
    );
    policies.insert(
        POLICY_LABELS[1].to_string(),
        build_policy_model(POLICY_LABELS[1], &shape_b)?,
    );

    let groups = vec![
        SimGroup {
            label: "gr0".into(),
            baseline_level: 5.1,
            baseline_amplitude: 0.30,
            baseline_phase: 2.0,
            scaling: ScalingParams {
                intercept: 0.10,
                slope: 0.022,
            },
            shape_peak: 1.3,
            shape_width: 0.5,
            window_hours: 3.0,
        },
        SimGroup {
            label: "gr1".into(),
            baseline_level: 5.7,
            baseline_amplitude: 0.40,
            baseline_phase: 9.0,
            scaling: ScalingParams {
                intercept: 0.12,
                slope: 0.028,
            },
            shape_peak: 1.55,
            shape_width: 0.5,
            window_hours: 3.0,
        },
        SimGroup {
            label: "gr2".into(),
            baseline_level: 4.6,
            baseline_amplitude: 0.20,
            baseline_phase: 15.0,
            scaling: ScalingParams {
                intercept: 0.08,
                slope: 0.034,
            },
            shape_peak: 1.15,
            shape_width: 0.5,
            window_hours: 3.0,
        },
    ];

    let patients = (0..config.n_patients)
        .map(|idx| {
            let group = config.group_of(idx);
            let mut jrng = stream_rng(seed, &[idx as u64, 7]);
            let base = groups[group].scaling;
            SimPatient {
                id: config.patient_id(idx),
                policy: config.policy_of(idx).to_string(),
                group,
                scaling: ScalingParams {
                    intercept: base.intercept + 0.015 * standard_normal(&mut jrng),
                    slope: base.slope + 0.0015 * standard_normal(&mut jrng),
                },
            }
        })
        .collect();

    Ok(Simulator {
        policies,
        groups,
        patients,
        noise_std: 0.25,
        config: config.clone(),
    })
}

/// One simulated day: local-time trajectory plus the retained thinning
/// noise and outcome residuals that make exact counterfactual replay
/// possible.
pub struct SimulatedDay {
    pub day: DayTrajectory,
    pub noise: NoiseRecord,
    pub residuals: Vec<f64>,
}

/// Simulates one day `(day_start, day_start + day_length]` of a patient
/// under `policy_model`, alternating thinning between grid points and
/// outcome evaluation at them. `history` holds continuous-time events
/// before `day_start`.
pub fn simulate_day(
    sim: &Simulator,
    patient: &SimPatient,
    policy_model: &TreatmentModel,
    history: EventHistory,
    day_start: f64,
    rng_seed: u64,
) -> Result<SimulatedDay> {
    let grid = sim.config.grid_times(day_start);
    let group = sim.group_of(patient);
    let mut proc = TreatmentSampler::new(policy_model, history, rng_seed ^ 0x6d61726b);
    let mut rng = stream_rng(rng_seed, &[1]);
    let mut noise_rng = stream_rng(rng_seed, &[2]);
    let mut merged = NoiseRecord {
        t_start: day_start,
        t_end: day_start + sim.config.day_length,
        exact_heights: true,
        candidates: Vec::new(),
        steps: Vec::new(),
    };
    let mut outcomes = Vec::with_capacity(grid.len());
    let mut residuals = Vec::with_capacity(grid.len());
    let mut lo = day_start;
    for (k, &q) in grid.iter().enumerate() {
        proc.set_interval_tag(k as u64);
        let l = |tau: f64| q - tau;
        let (_, rec) = sample_ogata(&mut proc, lo, q, &l, &mut rng)?;
        merged.candidates.extend(rec.candidates);
        merged.steps.extend(rec.steps);
        let eps = sim.noise_std * standard_normal(&mut noise_rng);
        let y = group.trajectory(&patient.scaling, &proc.history.treatments, q) + eps;
        residuals.push(eps);
        outcomes.push(Event::new(q, y));
        proc.history.push_outcome(q, y);
        lo = q;
    }
    let day = DayTrajectory {
        day_length: sim.config.day_length,
        treatments: proc
            .sampled
            .iter()
            .map(|e| Event::new(e.time - day_start, e.value))
            .collect(),
        outcomes: outcomes
            .iter()
            .map(|e| Event::new(e.time - day_start, e.value))
            .collect(),
    };
    Ok(SimulatedDay {
        day,
        noise: merged,
        residuals,
    })
}

/// Replays one day under a different policy with the generator's retained
/// noise: thinning candidates keep their exact heights, re-accepted factual
/// meals keep their marks, and the outcome residuals are reused verbatim.
pub fn replay_day_counterfactual(
    sim: &Simulator,
    patient: &SimPatient,
    cf_policy: &TreatmentModel,
    factual: &SimulatedDay,
    day_start: f64,
    rng_seed: u64,
) -> Result<DayTrajectory> {
    let grid = sim.config.grid_times(day_start);
    let group = sim.group_of(patient);
    let observed_continuous: Vec<Event> = factual
        .day
        .treatments
        .iter()
        .map(|e| Event::new(day_start + e.time, e.value))
        .collect();
    let mut proc = TreatmentSampler::new(cf_policy, EventHistory::new(), rng_seed ^ 0x6366)
        .with_retained_marks(&observed_continuous);
    let mut rng = stream_rng(rng_seed, &[3]);
    let mut outcomes = Vec::with_capacity(grid.len());
    let mut lo = day_start;
    for (k, &q) in grid.iter().enumerate() {
        proc.set_interval_tag(k as u64);
        sample_counterfactual_from_record(&mut proc, &factual.noise, lo, q, &mut rng)?;
        let y = group.trajectory(&patient.scaling, &proc.history.treatments, q)
            + factual.residuals[k];
        outcomes.push(Event::new(q, y));
        proc.history.push_outcome(q, y);
        lo = q;
    }
    Ok(DayTrajectory {
        day_length: sim.config.day_length,
        treatments: proc
            .sampled
            .iter()
            .map(|e| Event::new(e.time - day_start, e.value))
            .collect(),
        outcomes: outcomes
            .iter()
            .map(|e| Event::new(e.time - day_start, e.value))
            .collect(),
    })
}

/// The three semi-synthetic splits plus everything needed to evaluate
/// against exact ground truth.
pub struct SemiSyntheticData {
    /// Day 1 under each patient's own policy.
    pub observational: Vec<PatientRecord>,
    /// Day 1 (factual) plus day 2 under the switched policy.
    pub interventional: Vec<PatientRecord>,
    /// Day 1 replayed under the switched policy with retained noise.
    pub counterfactual: Vec<PatientRecord>,
    /// Intervened policy per patient.
    pub switched_policy: BTreeMap<String, String>,
    /// Retained day-1 thinning noise per patient.
    pub noise: BTreeMap<String, NoiseRecord>,
    /// Retained day-1 outcome residuals per patient (one per grid point).
    pub residuals: BTreeMap<String, Vec<f64>>,
}

/// Generates the observational, interventional and counterfactual splits
/// from the ground-truth simulator.
pub fn generate_datasets(sim: &Simulator, seed: u64) -> Result<SemiSyntheticData> {
    let mut observational = Vec::new();
    let mut interventional = Vec::new();
    let mut counterfactual = Vec::new();
    let mut switched_policy = BTreeMap::new();
    let mut noise = BTreeMap::new();
    let mut residuals = BTreeMap::new();

    for (idx, patient) in sim.patients.iter().enumerate() {
        let own = &sim.policies[&patient.policy];
        let switched_label = sim.config.switched_policy_of(idx).to_string();
        let switched = &sim.policies[&switched_label];
        let day_seed = stream_rng(seed, &[idx as u64, 10]).next_u64();

        let factual = simulate_day(sim, patient, own, EventHistory::new(), 0.0, day_seed)?;

        let group_label = sim.groups[patient.group].label.clone();
        observational.push(PatientRecord {
            patient_id: patient.id.clone(),
            policy_label: patient.policy.clone(),
            group_id: group_label.clone(),
            days: vec![factual.day.clone()],
        });

        // interventional: day 2 under the switched policy, day-1 history kept
        let mut hist = EventHistory::new();
        for e in &factual.day.treatments {
            hist.push_treatment(e.time, e.value);
        }
        for e in &factual.day.outcomes {
            hist.push_outcome(e.time, e.value);
        }
        let int_seed = stream_rng(seed, &[idx as u64, 11]).next_u64();
        let day2 = simulate_day(sim, patient, switched, hist, sim.config.day_length, int_seed)?;
        interventional.push(PatientRecord {
            patient_id: patient.id.clone(),
            policy_label: patient.policy.clone(),
            group_id: group_label.clone(),
            days: vec![factual.day.clone(), day2.day],
        });

        // counterfactual: day 1 replayed under the switched policy
        let cf_seed = stream_rng(seed, &[idx as u64, 12]).next_u64();
        let cf_day = replay_day_counterfactual(sim, patient, switched, &factual, 0.0, cf_seed)?;
        counterfactual.push(PatientRecord {
            patient_id: patient.id.clone(),
            policy_label: switched_label.clone(),
            group_id: group_label,
            days: vec![cf_day],
        });

        switched_policy.insert(patient.id.clone(), switched_label);
        noise.insert(patient.id.clone(), factual.noise);
        residuals.insert(patient.id.clone(), factual.residuals);
    }

    Ok(SemiSyntheticData {
        observational,
        interventional,
        counterfactual,
        switched_policy,
        noise,
        residuals,
    })
}

use rand::RngCore;
use rand_chacha::ChaCha12Rng;

/// The ground-truth simulator as a coupled-rollout participant.
pub struct SimAgent<'a> {
    pub sampler: TreatmentSampler<'a>,
    group: &'a SimGroup,
    scaling: ScalingParams,
    noise_std: f64,
    noise_rng: ChaCha12Rng,
    pub outcomes: Vec<Event>,
    interval: u64,
}

impl<'a> SimAgent<'a> {
    pub fn new(
        sim: &'a Simulator,
        patient: &SimPatient,
        policy_model: &'a TreatmentModel,
        history: EventHistory,
        mark_seed: u64,
        noise_seed: u64,
    ) -> Self {
        SimAgent {
            sampler: TreatmentSampler::new(policy_model, history, mark_seed),
            group: sim.group_of(patient),
            scaling: patient.scaling,
            noise_std: sim.noise_std,
            noise_rng: stream_rng(noise_seed, &[6]),
            outcomes: Vec::new(),
            interval: 0,
        }
    }
}

impl PointProcess for SimAgent<'_> {
    fn intensity(&self, t: f64) -> f64 {
        self.sampler.intensity(t)
    }

    fn notify_accept(&mut self, t: f64, candidate_index: u64) {
        self.sampler.notify_accept(t, candidate_index);
    }
}

impl RolloutAgent for SimAgent<'_> {
    fn record_outcome(&mut self, q: f64) -> Result<f64> {
        self.interval += 1;
        self.sampler.set_interval_tag(self.interval);
        let y = self
            .group
            .trajectory(&self.scaling, &self.sampler.history.treatments, q)
            + self.noise_std * standard_normal(&mut self.noise_rng);
        self.sampler.history.push_outcome(q, y);
        self.outcomes.push(Event::new(q, y));
        Ok(y)
    }
}
