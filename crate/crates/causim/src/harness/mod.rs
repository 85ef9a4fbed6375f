//! Semi-synthetic experiment pipeline: ground-truth simulator construction,
//! observational/interventional/counterfactual dataset generation, model
//! fitting, paired MSE metrics and the benchmark grid.
//!
//! The ground-truth simulator plays the role of the fitted clinical models:
//! two treatment policies with history-dependent intensities (one eats about
//! five meals a day, the other about four) and three outcome groups with
//! distinct baselines and response magnitudes. Because the generator owns
//! its thinning noise and outcome residuals, exact ground-truth
//! counterfactuals exist by construction.

mod benchmark;
mod simulator;

pub use benchmark::{
    default_fit_options, evaluate_mse, fit_roster_entry, noise_floor_mse, run_benchmark,
    tll_comparison, BenchmarkResult, BenchmarkRow, EstimatedModels, QueryKind, ScmFlavor, TllRow,
};
pub use simulator::{
    build_simulator, generate_datasets, replay_day_counterfactual, simulate_day, SemiSyntheticData,
    SimAgent, SimGroup, SimPatient, SimulatedDay, Simulator,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_POLICIES: usize = 2;
pub const N_GROUPS: usize = 3;
pub const POLICY_LABELS: [&str; N_POLICIES] = ["pi_A", "pi_B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    /// History-dependent squared-GP intensity (treatment + outcome effects).
    GpPp,
    /// Non-homogeneous Poisson baseline, no history dependence.
    Nhpp,
    /// Constant-rate Poisson process.
    ConstantRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    /// Shared-shape GP response.
    GpResponse,
    /// Constant-height 3h bump with a fitted scalar.
    ConstantResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub treatment: TreatmentKind,
    pub response: ResponseKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_patients: usize,
    pub day_length: f64,
    /// Outcome measurements per day.
    pub outcome_grid: usize,
    pub seeds: Vec<u64>,
    pub roster: Vec<RosterEntry>,
    /// Monte-Carlo rollouts per engine query.
    pub query_rollouts: usize,
    /// Paired evaluation replications averaged per seed.
    pub eval_replications: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults (10 patients, 3 seeds) keep the full pipeline
    /// inside CI budgets; `paper_scale` restores the larger setup.
    fn default() -> Self {
        ExperimentConfig {
            n_patients: 10,
            day_length: 24.0,
            outcome_grid: 40,
            seeds: vec![11, 12, 13],
            roster: vec![
                RosterEntry {
                    treatment: TreatmentKind::GpPp,
                    response: ResponseKind::GpResponse,
                },
                RosterEntry {
                    treatment: TreatmentKind::Nhpp,
                    response: ResponseKind::GpResponse,
                },
                RosterEntry {
                    treatment: TreatmentKind::GpPp,
                    response: ResponseKind::ConstantResponse,
                },
                RosterEntry {
                    treatment: TreatmentKind::ConstantRate,
                    response: ResponseKind::ConstantResponse,
                },
            ],
            query_rollouts: 100,
            eval_replications: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn paper_scale() -> Self {
        ExperimentConfig {
            n_patients: 50,
            seeds: (11..21).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 1 {
            return Err(Error::invalid_argument("n_patients must be >= 1"));
        }
        if self.outcome_grid < 2 {
            return Err(Error::invalid_argument("outcome_grid must be >= 2"));
        }
        if !(self.day_length > 0.0) {
            return Err(Error::invalid_argument("day_length must be > 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid_argument("seeds must be nonempty"));
        }
        Ok(())
    }

    /// The outcome measurement grid of one day, offset by `day_start`.
    pub fn grid_times(&self, day_start: f64) -> Vec<f64> {
        (1..=self.outcome_grid)
            .map(|i| day_start + self.day_length * i as f64 / self.outcome_grid as f64)
            .collect()
    }

    pub fn policy_of(&self, patient_index: usize) -> &'static str {
        POLICY_LABELS[patient_index % N_POLICIES]
    }

    pub fn switched_policy_of(&self, patient_index: usize) -> &'static str {
        POLICY_LABELS[(patient_index + 1) % N_POLICIES]
    }

    pub fn group_of(&self, patient_index: usize) -> usize {
        patient_index % N_GROUPS
    }

    pub fn patient_id(&self, patient_index: usize) -> String {
        format!("p{patient_index:03}")
    }
}
