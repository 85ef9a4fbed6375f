//! Scratch calibration: daily meal counts per policy and sample trajectories.

use causim::data::EventHistory;
use causim::harness::{build_simulator, ExperimentConfig};
use causim::harness::generate_datasets;

fn main() {
    let config = ExperimentConfig::default();
    let sim = build_simulator(&config, 1).unwrap();
    for label in ["pi_A", "pi_B"] {
        let model = &sim.policies[label];
        // quick mean-count estimate over simulated days
        let mut total = 0usize;
        let days = 400;
        for d in 0..days {
            let pat = &sim.patients[0];
            let sd = causim::harness::simulate_day(&sim, pat, model, EventHistory::new(), 0.0, 1000 + d)
                .unwrap();
            total += sd.day.treatments.len();
        }
        println!("{label}: mean meals/day = {:.2}", total as f64 / days as f64);
        // intensity profile after a meal at t=12 with glucose 5.4
        let mut h = EventHistory::new();
        h.push_outcome(11.9, 5.4);
        h.push_treatment(12.0, 50.0);
        for dt in [0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0] {
            let lam = model.intensity(&h, 12.0 + dt).unwrap();
            print!(" l({dt})={lam:.3}");
        }
        println!();
    }
    let data = generate_datasets(&sim, 2).unwrap();
    for r in data.observational.iter().take(4) {
        let d = &r.days[0];
        println!(
            "{} {} meals={} times={:?} marks={:?} y[0..4]={:?}",
            r.patient_id,
            r.policy_label,
            d.treatments.len(),
            d.treatments.iter().map(|e| (e.time * 10.0).round() / 10.0).collect::<Vec<_>>(),
            d.treatments.iter().map(|e| e.value.round()).collect::<Vec<_>>(),
            d.outcomes.iter().take(4).map(|e| (e.value * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}
