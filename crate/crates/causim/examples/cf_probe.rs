//! Scratch: per-patient counterfactual-query breakdown.

use causim::engine::*;
use causim::harness::*;
use causim::sampler::{rethin_record, stream_rng, RecordNoise};
use causim::data::EventHistory;
use rand::RngCore;

fn main() {
    let config = ExperimentConfig { n_patients: 6, seeds: vec![21], ..Default::default() };
    let sim = build_simulator(&config, 21).unwrap();
    let data = generate_datasets(&sim, 21).unwrap();
    let (topts, oopts) = default_fit_options();
    let entry = RosterEntry { treatment: TreatmentKind::GpPp, response: ResponseKind::GpResponse };
    let est = fit_roster_entry(entry, &data.observational, &topts, &oopts).unwrap();

    for (idx, patient) in sim.patients.iter().enumerate() {
        let day1 = &data.observational[idx];
        let gt_cf = &data.counterfactual[idx].days[0];
        let switched = &data.switched_policy[&patient.id];
        let obs_meals: Vec<f64> = day1.days[0].treatments.iter().map(|e| (e.time*10.).round()/10.).collect();
        let cf_meals: Vec<f64> = gt_cf.treatments.iter().map(|e| (e.time*10.).round()/10.).collect();

        // int flavor, one rep
        let policy = est.joint.policy(switched).unwrap();
        let observed = continuous_history(day1);
        let posterior = est.joint.outcome.component_posterior(&patient.id, &observed.treatments, &observed.outcomes).unwrap();
        let record = &data.noise[&patient.id];
        let mut proc = TreatmentSampler::new(policy, EventHistory::new(), 7);
        let mut rng = stream_rng(900, &[idx as u64]);
        let mut sq = 0.0;
        let mut lo = 0.0;
        let grid = sim.config.grid_times(0.0);
        for (k, &q) in grid.iter().enumerate() {
            proc.set_interval_tag(k as u64);
            rethin_record(&mut proc, record, lo, q, RecordNoise::Prior, &mut rng).unwrap();
            let y = posterior.trajectory_mean(&proc.history.treatments, q);
            let gt_y = gt_cf.outcomes[k].value;
            sq += (y - gt_y) * (y - gt_y);
            proc.history.push_outcome(q, y);
            lo = q;
        }
        let int_meals: Vec<f64> = proc.sampled.iter().map(|e| (e.time*10.).round()/10.).collect();
        let int_doses: Vec<f64> = proc.sampled.iter().map(|e| e.value.round()).collect();
        println!(
            "{} {}→{}: mse_int {:.3}  obs_meals {:?}  gtcf {:?}  est_int {:?} doses {:?}  f_m est(45/65): {:.2}/{:.2}",
            patient.id, patient.policy, switched, sq / grid.len() as f64,
            obs_meals, cf_meals, int_meals, int_doses,
            est.joint.outcome.response.scaling[&patient.id].eval(45.0),
            est.joint.outcome.response.scaling[&patient.id].eval(65.0),
        );
    }
}
