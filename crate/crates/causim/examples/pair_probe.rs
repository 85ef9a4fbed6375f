//! Scratch: per-patient paired day-2 rollout inspection.

use causim::engine::*;
use causim::harness::*;
use causim::sampler::stream_rng;
use rand::RngCore;

fn main() {
    let config = ExperimentConfig { n_patients: 10, seeds: vec![21], ..Default::default() };
    let sim = build_simulator(&config, 21).unwrap();
    let data = generate_datasets(&sim, 21).unwrap();
    let (topts, oopts) = default_fit_options();
    let entry = RosterEntry { treatment: TreatmentKind::GpPp, response: ResponseKind::GpResponse };
    let est = fit_roster_entry(entry, &data.observational, &topts, &oopts).unwrap();

    // response amplitude check: posterior-mean response to a 50g meal at noon
    for pid in ["p000", "p003"] {
        let day1 = data.observational.iter().find(|r| r.patient_id == pid).unwrap();
        let h = continuous_history(day1);
        let post = est.joint.outcome.component_posterior(pid, &h.treatments, &h.outcomes).unwrap();
        let pat = sim.patient(pid).unwrap();
        let grp = sim.group_of(pat);
        print!("{pid} est bump: ");
        for dt in [0.6, 1.2, 1.8, 2.4] {
            let tr = vec![causim::data::Event::new(30.0, 50.0)];
            print!("{:.2} ", post.response_mean(&tr, 30.0 + dt));
        }
        print!("| gt bump: ");
        for dt in [0.6, 1.2, 1.8, 2.4] {
            print!("{:.2} ", pat.scaling.eval(50.0) * grp.shape(dt));
        }
        println!();
    }

    // paired day-2: gt under switched policy vs est int/obs
    let seed = 77u64;
    for idx in [0usize, 1] {
        let patient = &sim.patients[idx];
        let day1 = &data.observational[idx];
        let history = continuous_history(day1);
        let grid = sim.config.grid_times(24.0);
        let switched = &data.switched_policy[&patient.id];
        for (mode, label) in [(switched.clone(), "int"), (patient.policy.clone(), "obs")] {
            let gt_model = &sim.policies[switched.as_str()];
            let mut gt_agent = SimAgent::new(&sim, patient, gt_model, history.clone(),
                stream_rng(seed, &[idx as u64, 20]).next_u64(), stream_rng(seed, &[idx as u64, 21]).next_u64());
            let est_model = est.joint.policy(&mode).unwrap();
            let mut est_agent = FittedAgent::new(est_model, &est.joint.outcome, patient.id.clone(),
                &history, history.clone(),
                stream_rng(seed, &[idx as u64, 20]).next_u64(), stream_rng(seed, &[idx as u64, 22]).next_u64()).unwrap();
            {
                let mut agents: Vec<&mut dyn RolloutAgent> = vec![&mut gt_agent, &mut est_agent];
                let mut rng = stream_rng(seed, &[idx as u64, 23]);
                paired_rollout(&mut agents, 24.0, &grid, &mut rng).unwrap();
            }
            let gt_t: Vec<f64> = gt_agent.sampler.sampled.iter().map(|e| (e.time*10.0).round()/10.0).collect();
            let et: Vec<f64> = est_agent.sampler.sampled.iter().map(|e| (e.time*10.0).round()/10.0).collect();
            let mse: f64 = gt_agent.outcomes.iter().zip(&est_agent.outcomes)
                .map(|(a, b)| (a.value - b.value).powi(2)).sum::<f64>() / grid.len() as f64;
            println!("{} {} [{label}]: mse {:.3} gt meals {:?} est meals {:?}", patient.id, patient.policy, mse, gt_t, et);
        }
    }
}
