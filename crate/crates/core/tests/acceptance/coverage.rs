use stvisit_core::model::Variant;

use crate::support::{benchmark, serial, verdict, BENCHMARK_SEEDS};

#[test]
fn criterion_03_conformal_coverage() {
    let _serial = serial();
    let runs: Vec<_> = BENCHMARK_SEEDS
        .iter()
        .map(|&s| benchmark(s, Variant::Full))
        .collect();
    let n = runs.len() as f64;
    let coverage = runs.iter().map(|r| r.coverage).sum::<f64>() / n;
    let raw = runs.iter().map(|r| r.raw_coverage).sum::<f64>() / n;
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    let n_cal = runs.iter().map(|r| r.n_cal).min().unwrap();
    let n_test = runs.iter().map(|r| r.n_test).min().unwrap();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(BENCHMARK_SEEDS)
        .map(|(r, s)| format!("seed {} {:.2}/{:.2}", s, r.coverage, r.raw_coverage))
        .collect();

    let pass = coverage >= 87.0 && n_cal >= 500 && n_test >= 2000 && secs < 1800.0;
    verdict(
        3,
        "conformal coverage",
        pass,
        &format!(
            "mean calibrated coverage {:.2}% (>= 87), uncalibrated {:.2}%; [{}]; min cal points {}, min test points {}; {:.0}s (< 1800s)",
            coverage,
            raw,
            per_seed.join(", "),
            n_cal,
            n_test,
            secs
        ),
    );
    assert!(pass);
}
