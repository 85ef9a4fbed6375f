//! Model fitting, paired MSE evaluation and the benchmark grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DayTrajectory, EventHistory, PatientRecord};
use crate::engine::{
    continuous_history, paired_rollout, policy_counterfactual_query, FittedAgent, JointModel,
    RolloutAgent, TreatmentSampler,
};
use crate::error::{Error, Result};
use crate::outcome::{self, OutcomeFitOptions, OutcomeModel};
use crate::sampler::{rethin_record, standard_normal, stream_rng, RecordNoise};
use crate::treatment::{
    self, FitOptions, IntensityComponents, MarkModel, TreatmentConfig, TreatmentModel,
};

use super::simulator::{generate_datasets, SemiSyntheticData, SimAgent, Simulator};
use super::{
    build_simulator, ExperimentConfig, ResponseKind, RosterEntry, TreatmentKind, POLICY_LABELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Observational,
    Interventional,
    Counterfactual,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [
        QueryKind::Observational,
        QueryKind::Interventional,
        QueryKind::Counterfactual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QueryKind::Observational => "observational",
            QueryKind::Interventional => "interventional",
            QueryKind::Counterfactual => "counterfactual",
        }
    }
}

/// The SCM the estimated model is run as: observational (ignore the
/// intervention), interventional (swap the policy, prior noise) or
/// counterfactual (swap the policy, posterior noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmFlavor {
    Obs,
    Int,
    Cf,
}

impl ScmFlavor {
    pub const ALL: [ScmFlavor; 3] = [ScmFlavor::Obs, ScmFlavor::Int, ScmFlavor::Cf];

    pub fn name(&self) -> &'static str {
        match self {
            ScmFlavor::Obs => "obs",
            ScmFlavor::Int => "int",
            ScmFlavor::Cf => "cf",
        }
    }
}

/// One roster model fitted on the observational split.
pub struct EstimatedModels {
    pub entry: RosterEntry,
    pub joint: JointModel,
}

fn mark_model_for(dataset: &[DayTrajectory]) -> Result<MarkModel> {
    let marks: Vec<f64> = dataset
        .iter()
        .flat_map(|d| d.treatments.iter().map(|e| e.value))
        .collect();
    let (var, noise) = if marks.len() > 1 {
        let mean = marks.iter().sum::<f64>() / marks.len() as f64;
        let var = marks.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / (marks.len() - 1) as f64;
        (var.max(1.0), (var / 4.0).max(1.0))
    } else {
        (100.0, 25.0)
    };
    Ok(MarkModel::default_daily(var, 1.0, noise)?.fit(dataset))
}

fn fit_treatment_model(
    kind: TreatmentKind,
    label: &str,
    dataset: &[DayTrajectory],
    opts: &FitOptions,
) -> Result<TreatmentModel> {
    let mark = mark_model_for(dataset)?;
    match kind {
        TreatmentKind::GpPp => {
            let config = TreatmentConfig::with_components(IntensityComponents::AO);
            let init = TreatmentModel::init(config, label, dataset, mark)?;
            Ok(treatment::fit(&init, dataset, opts)?.model)
        }
        TreatmentKind::Nhpp => {
            let config = TreatmentConfig::with_components(IntensityComponents::B);
            let init = TreatmentModel::init(config, label, dataset, mark)?;
            Ok(treatment::fit(&init, dataset, opts)?.model)
        }
        TreatmentKind::ConstantRate => {
            // Poisson MLE: beta0 = sqrt(N / T)
            let n: usize = dataset.iter().map(|d| d.treatments.len()).sum();
            let t: f64 = dataset.iter().map(|d| d.day_length).sum();
            let config = TreatmentConfig {
                components: IntensityComponents {
                    baseline: false,
                    treatments: false,
                    outcomes: false,
                },
                beta0: (n as f64 / t.max(1e-9)).sqrt(),
                ..Default::default()
            };
            TreatmentModel::init(config, label, dataset, mark)
        }
    }
}

/// Fits one roster entry on the observational split: a treatment model per
/// policy (on the patients following it) and the hierarchical outcome model
/// on everyone.
pub fn fit_roster_entry(
    entry: RosterEntry,
    observational: &[PatientRecord],
    treatment_opts: &FitOptions,
    outcome_opts: &OutcomeFitOptions,
) -> Result<EstimatedModels> {
    let mut treatments = BTreeMap::new();
    for label in POLICY_LABELS {
        let days: Vec<DayTrajectory> = observational
            .iter()
            .filter(|r| r.policy_label == label)
            .flat_map(|r| r.days.iter().cloned())
            .collect();
        if days.is_empty() {
            return Err(Error::invalid_argument(format!(
                "no observational patients follow policy {label}"
            )));
        }
        treatments.insert(
            label.to_string(),
            fit_treatment_model(entry.treatment, label, &days, treatment_opts)?,
        );
    }
    let mut oopts = *outcome_opts;
    if entry.response == ResponseKind::ConstantResponse {
        oopts.pin_shape_lengthscale = Some(1e3);
    }
    let outcome = outcome::fit(&OutcomeModel::init(observational), observational, &oopts)?;
    Ok(EstimatedModels {
        entry,
        joint: JointModel {
            treatments,
            outcome,
        },
    })
}

fn mse(gt: &[f64], est: &[f64]) -> f64 {
    debug_assert_eq!(gt.len(), est.len());
    let n = gt.len().max(1);
    gt.iter()
        .zip(est)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64
}

/// Paired evaluation of all three SCM flavors of one estimated model on
/// one query kind: per replication and patient, the ground truth and every
/// flavor roll the query window out against one shared thinning-noise
/// stream, and the squared errors are averaged over patients, grid times
/// and replications.
///
/// For the counterfactual query the ground truth is the retained-noise
/// replay; the flavors answer by abduction plus counterfactual re-thinning
/// (cf), or by re-simulating the window against the same candidate stream
/// with fresh acceptance noise under the switched (int) or factual (obs)
/// policy.
pub fn evaluate_all_flavors(
    sim: &Simulator,
    data: &SemiSyntheticData,
    est: &EstimatedModels,
    kind: QueryKind,
    seed: u64,
    replications: usize,
) -> Result<[f64; 3]> {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for rep in 0..replications.max(1) {
        let rep_seed = stream_rng(seed, &[rep as u64, 99]).next_u64();
        for (idx, patient) in sim.patients.iter().enumerate() {
            let day1 = &data.observational[idx];
            debug_assert_eq!(day1.patient_id, patient.id);
            let switched = data.switched_policy[&patient.id].clone();
            match kind {
                QueryKind::Observational | QueryKind::Interventional => {
                    let query_policy = match kind {
                        QueryKind::Observational => patient.policy.clone(),
                        _ => switched.clone(),
                    };
                    let history = continuous_history(day1);
                    let grid = sim.config.grid_times(sim.config.day_length);
                    let gt_model = &sim.policies[&query_policy];
                    let mark = stream_rng(rep_seed, &[idx as u64, 20]).next_u64();
                    let mut gt_agent = SimAgent::new(
                        sim,
                        patient,
                        gt_model,
                        history.clone(),
                        mark,
                        stream_rng(rep_seed, &[idx as u64, 21]).next_u64(),
                    );
                    // obs flavor believes the factual policy; int and cf
                    // flavors believe the query policy
                    let mut obs_agent = FittedAgent::new(
                        est.joint.policy(&patient.policy)?,
                        &est.joint.outcome,
                        patient.id.clone(),
                        &history,
                        history.clone(),
                        mark,
                        stream_rng(rep_seed, &[idx as u64, 22]).next_u64(),
                    )?;
                    let mut int_agent = FittedAgent::new(
                        est.joint.policy(&query_policy)?,
                        &est.joint.outcome,
                        patient.id.clone(),
                        &history,
                        history.clone(),
                        mark,
                        stream_rng(rep_seed, &[idx as u64, 23]).next_u64(),
                    )?;
                    {
                        let mut agents: Vec<&mut dyn RolloutAgent> =
                            vec![&mut gt_agent, &mut obs_agent, &mut int_agent];
                        let mut rng = stream_rng(rep_seed, &[idx as u64, 24]);
                        paired_rollout(&mut agents, sim.config.day_length, &grid, &mut rng)?;
                    }
                    for (f, agent) in [(0usize, &obs_agent), (1, &int_agent), (2, &int_agent)] {
                        sums[f] += gt_agent
                            .outcomes
                            .iter()
                            .zip(&agent.outcomes)
                            .map(|(a, b)| (a.value - b.value) * (a.value - b.value))
                            .sum::<f64>();
                    }
                    count += gt_agent.outcomes.len();
                }
                QueryKind::Counterfactual => {
                    let gt_values: Vec<f64> = data.counterfactual[idx].days[0]
                        .outcomes
                        .iter()
                        .map(|e| e.value)
                        .collect();
                    let cf_values: Vec<f64> = {
                        let res = policy_counterfactual_query(
                            &est.joint,
                            day1,
                            est.joint.policy(&switched)?,
                            1,
                            stream_rng(rep_seed, &[idx as u64, 25]).next_u64(),
                        )?;
                        res.samples[0].outcomes.iter().map(|e| e.value).collect()
                    };
                    let fresh = |policy_label: &str, tag: u64| -> Result<Vec<f64>> {
                        // re-simulation of the window with prior noise: the
                        // thinning candidates are shared with the generator
                        // (fixed-noise comparability), acceptance heights
                        // and outcome noise are fresh
                        let policy = est.joint.policy(policy_label)?;
                        let observed = continuous_history(day1);
                        let posterior = est.joint.outcome.component_posterior(
                            &patient.id,
                            &observed.treatments,
                            &observed.outcomes,
                        )?;
                        let record = &data.noise[&patient.id];
                        let mut proc = TreatmentSampler::new(
                            policy,
                            EventHistory::new(),
                            stream_rng(rep_seed, &[idx as u64, tag, 26]).next_u64(),
                        );
                        let mut rng = stream_rng(rep_seed, &[idx as u64, tag, 27]);
                        let mut noise_rng = stream_rng(rep_seed, &[idx as u64, tag, 28]);
                        let mut values = Vec::new();
                        let mut lo = 0.0;
                        for (k, &q) in sim.config.grid_times(0.0).iter().enumerate() {
                            proc.set_interval_tag(k as u64);
                            rethin_record(&mut proc, record, lo, q, RecordNoise::Prior, &mut rng)?;
                            let y = posterior.trajectory_mean(&proc.history.treatments, q)
                                + est.joint.outcome.noise_std * standard_normal(&mut noise_rng);
                            proc.history.push_outcome(q, y);
                            values.push(y);
                            lo = q;
                        }
                        Ok(values)
                    };
                    let obs_values = fresh(&patient.policy, 1)?;
                    let int_values = fresh(&switched, 2)?;
                    for (f, vals) in [(0usize, &obs_values), (1, &int_values), (2, &cf_values)] {
                        sums[f] += gt_values
                            .iter()
                            .zip(vals.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                    }
                    count += gt_values.len();
                }
            }
        }
    }
    Ok([
        sums[0] / count.max(1) as f64,
        sums[1] / count.max(1) as f64,
        sums[2] / count.max(1) as f64,
    ])
}

/// Single-flavor wrapper around [`evaluate_all_flavors`].
pub fn evaluate_mse(
    sim: &Simulator,
    data: &SemiSyntheticData,
    est: &EstimatedModels,
    kind: QueryKind,
    flavor: ScmFlavor,
    seed: u64,
) -> Result<f64> {
    let all = evaluate_all_flavors(sim, data, est, kind, seed, sim.config.eval_replications)?;
    Ok(match flavor {
        ScmFlavor::Obs => all[0],
        ScmFlavor::Int => all[1],
        ScmFlavor::Cf => all[2],
    })
}

/// MSE of the ground-truth simulator against an independent copy of itself
/// under fixed-noise pairing: identical treatments, independent outcome
/// noise, so the expected value is `2 sigma_eps^2`.
pub fn noise_floor_mse(sim: &Simulator, data: &SemiSyntheticData, seed: u64) -> Result<f64> {
    let mut a_all = Vec::new();
    let mut b_all = Vec::new();
    for (idx, patient) in sim.patients.iter().enumerate() {
        let day1 = &data.observational[idx];
        let history = continuous_history(day1);
        let grid = sim.config.grid_times(sim.config.day_length);
        let switched = &data.switched_policy[&patient.id];
        let model = &sim.policies[switched];
        let mark = stream_rng(seed, &[idx as u64, 30]).next_u64();
        let mut a = SimAgent::new(
            sim,
            patient,
            model,
            history.clone(),
            mark,
            stream_rng(seed, &[idx as u64, 31]).next_u64(),
        );
        let mut b = SimAgent::new(
            sim,
            patient,
            model,
            history,
            mark,
            stream_rng(seed, &[idx as u64, 32]).next_u64(),
        );
        {
            let mut agents: Vec<&mut dyn RolloutAgent> = vec![&mut a, &mut b];
            let mut rng = stream_rng(seed, &[idx as u64, 33]);
            paired_rollout(&mut agents, sim.config.day_length, &grid, &mut rng)?;
        }
        a_all.extend(a.outcomes.iter().map(|e| e.value));
        b_all.extend(b.outcomes.iter().map(|e| e.value));
    }
    Ok(mse(&a_all, &b_all))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub treatment: TreatmentKind,
    pub response: ResponseKind,
    pub flavor: ScmFlavor,
    pub query: QueryKind,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TllRow {
    pub components: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub tll: Vec<TllRow>,
    pub anomalies: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl BenchmarkResult {
    pub fn row(
        &self,
        treatment: TreatmentKind,
        response: ResponseKind,
        flavor: ScmFlavor,
        query: QueryKind,
    ) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| {
            r.treatment == treatment
                && r.response == response
                && r.flavor == flavor
                && r.query == query
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("treatment,response,flavor,query,mse_mean,mse_std,per_seed\n");
        for r in &self.rows {
            let seeds = r
                .per_seed
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{:?},{:?},{},{},{:.6},{:.6},{}\n",
                r.treatment,
                r.response,
                r.flavor.name(),
                r.query.name(),
                r.mse_mean,
                r.mse_std,
                seeds
            ));
        }
        out
    }

    pub fn tll_csv(&self) -> String {
        let mut out = String::from("components,tll_mean,tll_std,per_seed\n");
        for r in &self.tll {
            let seeds = r
                .per_seed
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.components, r.mean, r.std, seeds
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        crate::jsonfmt::to_string(self)
    }
}

/// Default fit budgets of the benchmark pipeline.
pub fn default_fit_options() -> (FitOptions, OutcomeFitOptions) {
    (
        FitOptions {
            max_iters: 250,
            step_size: 0.05,
            seed: 0,
        },
        OutcomeFitOptions {
            max_iters: 200,
            step_size: 0.02,
            seed: 0,
            pin_shape_lengthscale: None,
        },
    )
}

/// Held-out test log-likelihood comparison of the intensity variants
/// (`b`, `ba`, `bo`, `ao`, `bao`) on data generated by the `ao`-form
/// simulator: per seed, a small cohort sharing one policy contributes two
/// training days and one held-out day each.
pub fn tll_comparison(
    n_patients: usize,
    seeds: &[u64],
    treatment_opts: &FitOptions,
) -> Result<Vec<TllRow>> {
    let variants = ["b", "ba", "bo", "ao", "bao"];
    let mut per_variant: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let config = ExperimentConfig {
            n_patients,
            ..Default::default()
        };
        let sim = build_simulator(&config, seed)?;
        let policy = &sim.policies[POLICY_LABELS[0]];
        // three iid days per patient under one shared policy
        let mut train: Vec<DayTrajectory> = Vec::new();
        let mut test: Vec<DayTrajectory> = Vec::new();
        for (idx, patient) in sim.patients.iter().enumerate() {
            for day in 0..3 {
                let day_seed = stream_rng(seed, &[idx as u64, 40 + day]).next_u64();
                let sd = super::simulator::simulate_day(
                    &sim,
                    patient,
                    policy,
                    EventHistory::new(),
                    0.0,
                    day_seed,
                )?;
                if day < 2 {
                    train.push(sd.day);
                } else {
                    test.push(sd.day);
                }
            }
        }
        for code in variants {
            let components = IntensityComponents::from_code(code)?;
            let config = TreatmentConfig::with_components(components);
            let mark = mark_model_for(&train)?;
            let init = TreatmentModel::init(config, "pi_tll", &train, mark)?;
            let fitted = treatment::fit(&init, &train, treatment_opts)?.model;
            let mut tll = 0.0;
            for day in &test {
                tll += fitted.test_log_likelihood_bound(day)?;
            }
            per_variant
                .entry(code)
                .or_default()
                .push(tll / test.len() as f64);
        }
    }
    Ok(variants
        .iter()
        .map(|code| {
            let per_seed = per_variant[code].clone();
            let (mean, std) = mean_std(&per_seed);
            TllRow {
                components: code.to_string(),
                mean,
                std,
                per_seed,
            }
        })
        .collect())
}

/// Runs the full benchmark grid: per seed, build the simulator, generate
/// the three splits, fit every roster entry on the observational split and
/// evaluate all three queries in all three SCM flavors. Per-model failures
/// are recorded as anomalies and do not abort the grid.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let (topts, oopts) = default_fit_options();
    let mut grid: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    let mut anomalies = Vec::new();

    for &seed in &config.seeds {
        let sim = build_simulator(config, seed)?;
        let data = generate_datasets(&sim, seed)?;
        for (e_idx, entry) in config.roster.iter().enumerate() {
            let est = match fit_roster_entry(*entry, &data.observational, &topts, &oopts) {
                Ok(est) => est,
                Err(err) => {
                    anomalies.push(format!(
                        "seed {seed}: roster entry {entry:?} failed to fit: {err}"
                    ));
                    continue;
                }
            };
            for (q_idx, kind) in QueryKind::ALL.iter().enumerate() {
                match evaluate_all_flavors(&sim, &data, &est, *kind, seed, config.eval_replications)
                {
                    Ok(values) => {
                        for f_idx in 0..3 {
                            grid.entry((e_idx, q_idx, f_idx))
                                .or_default()
                                .push(values[f_idx]);
                        }
                    }
                    Err(err) => anomalies.push(format!(
                        "seed {seed}: {entry:?} {} failed: {err}",
                        kind.name()
                    )),
                }
            }
        }
    }

    let mut rows = Vec::new();
    for ((e_idx, q_idx, f_idx), per_seed) in &grid {
        let (mse_mean, mse_std) = mean_std(per_seed);
        rows.push(BenchmarkRow {
            treatment: config.roster[*e_idx].treatment,
            response: config.roster[*e_idx].response,
            flavor: ScmFlavor::ALL[*f_idx],
            query: QueryKind::ALL[*q_idx],
            mse_mean,
            mse_std,
            per_seed: per_seed.clone(),
        });
    }

    // conditioning on the right policy can only help: flag seeds where a
    // model's observational-query error exceeds its interventional-query
    // error as anomalies rather than asserting
    for entry in &config.roster {
        let obs = rows.iter().find(|r| {
            r.treatment == entry.treatment
                && r.response == entry.response
                && r.flavor == ScmFlavor::Int
                && r.query == QueryKind::Observational
        });
        let int = rows.iter().find(|r| {
            r.treatment == entry.treatment
                && r.response == entry.response
                && r.flavor == ScmFlavor::Int
                && r.query == QueryKind::Interventional
        });
        if let (Some(o), Some(i)) = (obs, int) {
            if o.mse_mean > i.mse_mean * 1.05 {
                anomalies.push(format!(
                    "{:?}/{:?}: observational-query MSE {:.4} exceeds interventional {:.4}",
                    entry.treatment, entry.response, o.mse_mean, i.mse_mean
                ));
            }
        }
    }

    let tll = tll_comparison(5.min(config.n_patients), &config.seeds, &topts)?;
    Ok(BenchmarkResult {
        rows,
        tll,
        anomalies,
    })
}

use rand::RngCore;
