//! Scratch: tiny benchmark run for timing and sanity.

use causim::harness::{run_benchmark, ExperimentConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let config = ExperimentConfig {
        n_patients: 6,
        seeds: vec![21, 22],
        ..Default::default()
    };
    let res = run_benchmark(&config).unwrap();
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    print!("{}", res.to_csv());
    print!("{}", res.tll_csv());
    for a in &res.anomalies {
        println!("anomaly: {a}");
    }
}
