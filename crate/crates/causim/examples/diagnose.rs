//! Scratch: inspect fitted model quality on a generated split.

use causim::data::EventHistory;
use causim::harness::*;
use causim::treatment::{FitOptions, IntensityComponents, TreatmentConfig, TreatmentModel};

fn main() {
    let config = ExperimentConfig {
        n_patients: 10,
        seeds: vec![21],
        ..Default::default()
    };
    let sim = build_simulator(&config, 21).unwrap();
    let data = generate_datasets(&sim, 21).unwrap();
    let (topts, oopts) = default_fit_options();

    for r in &data.observational {
        println!("{} {} meals={}", r.patient_id, r.policy_label, r.days[0].treatments.len());
    }

    let entry = RosterEntry { treatment: TreatmentKind::GpPp, response: ResponseKind::GpResponse };
    let est = fit_roster_entry(entry, &data.observational, &topts, &oopts).unwrap();
    println!("fitted noise_std = {:.3} (gt {:.3})", est.joint.outcome.noise_std, sim.noise_std);
    println!("shape lengthscale = {:.3}", est.joint.outcome.response.shape_lengthscale);
    for (id, b) in est.joint.outcome.baselines.iter().take(3) {
        println!("{id}: intercept {:.2} pvar {:.3} plen {:.2} scaling {:?}",
            b.intercept, b.periodic_variance, b.periodic_lengthscale,
            est.joint.outcome.response.scaling[id]);
    }

    // compare gt vs fitted intensity profiles
    for label in ["pi_A", "pi_B"] {
        let gt = &sim.policies[label];
        let est_m = est.joint.policy(label).unwrap();
        let mut h = EventHistory::new();
        h.push_outcome(11.9, 5.4);
        h.push_treatment(12.0, 50.0);
        print!("{label} gt : ");
        for dt in [0.5, 1.0, 2.0, 3.0, 4.0, 6.0] {
            print!("l({dt})={:.3} ", gt.intensity(&h, 12.0 + dt).unwrap());
        }
        println!();
        print!("{label} fit: ");
        for dt in [0.5, 1.0, 2.0, 3.0, 4.0, 6.0] {
            print!("l({dt})={:.3} ", est_m.intensity(&h, 12.0 + dt).unwrap());
        }
        println!();
        // empty-history intensity at a few times of day
        let empty = {
            let mut e = EventHistory::new();
            e.push_outcome(0.3, 5.2);
            e
        };
        print!("{label} fit flat: ");
        for t in [2.0, 8.0, 14.0, 20.0] {
            print!("l({t})={:.3} ", est_m.intensity(&empty, t).unwrap());
        }
        println!();
    }

    // ELBO fitting trace for one policy
    let days: Vec<_> = data.observational.iter()
        .filter(|r| r.policy_label == "pi_A")
        .flat_map(|r| r.days.iter().cloned()).collect();
    let cfg = TreatmentConfig::with_components(IntensityComponents::AO);
    let mark = causim::treatment::MarkModel::default_daily(100.0, 1.0, 25.0).unwrap().fit(&days);
    let init = TreatmentModel::init(cfg, "pi_A", &days, mark).unwrap();
    let res = causim::treatment::fit(&init, &days, &FitOptions { max_iters: 300, ..Default::default() }).unwrap();
    println!("elbo trace: first {:.2} last {:.2} len {}", res.trace[0], res.trace.last().unwrap(), res.trace.len());
}
