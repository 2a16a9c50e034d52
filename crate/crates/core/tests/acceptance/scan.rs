use std::time::Instant;

use stvisit_core::diff::{Tape, Tensor};

use crate::support::{oracle_scan, rand_tensor, rng, serial, verdict};

/// Rows `[T][width]` of batch entry `b` from a `[B, T, width]` tensor.
fn rows(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (len, width) = (s[1], s[2]);
    (0..len)
        .map(|i| t.data()[(b * len + i) * width..(b * len + i + 1) * width].to_vec())
        .collect()
}

fn scan_inputs(seed: u64, batch: usize, len: usize, d: usize, ns: usize) -> [Tensor; 6] {
    let mut r = rng(seed);
    [
        rand_tensor(&mut r, &[batch, len, d], -1.0, 1.0),
        rand_tensor(&mut r, &[batch, len, d], 0.01, 1.0),
        rand_tensor(&mut r, &[d, ns], -2.0, -0.05),
        rand_tensor(&mut r, &[batch, len, ns], -1.0, 1.0),
        rand_tensor(&mut r, &[batch, len, ns], -1.0, 1.0),
        rand_tensor(&mut r, &[d], -1.0, 1.0),
    ]
}

fn run_scan(inputs: &[Tensor; 6]) -> Tensor {
    let tape = Tape::new();
    let v: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = tape
        .selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
        .unwrap();
    tape.value(y)
}

fn median_secs(inputs: &[Tensor; 6], runs: usize) -> f64 {
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(run_scan(inputs));
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[runs / 2]
}

#[test]
fn criterion_02_scan_matches_recurrence() {
    let _serial = serial();
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        for len in 1..=16 {
            let inputs = scan_inputs(seed * 101 + len as u64, 2, len, 3, 4);
            let y = run_scan(&inputs);
            let a = rows(&inputs[2].clone().reshape(&[1, 3, 4]).unwrap(), 0);
            for b in 0..2 {
                let expect = oracle_scan(
                    &rows(&inputs[0], b),
                    &rows(&inputs[1], b),
                    &a,
                    &rows(&inputs[3], b),
                    &rows(&inputs[4], b),
                    inputs[5].data(),
                );
                for (got, want) in rows(&y, b).iter().flatten().zip(expect.iter().flatten()) {
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }

    let short = scan_inputs(7, 4, 128, 16, 8);
    let long = scan_inputs(7, 4, 256, 16, 8);
    median_secs(&long, 3);
    let ratio = median_secs(&long, 20) / median_secs(&short, 20);

    let pass = worst <= 1e-12 && ratio <= 2.5;
    verdict(
        2,
        "scan equals sequential recurrence",
        pass,
        &format!("max abs err {:.2e} over 50 seeds x T=1..16 (tol 1e-12); time ratio T256/T128 {:.2} (<= 2.5)", worst, ratio),
    );
    assert!(pass);
}
