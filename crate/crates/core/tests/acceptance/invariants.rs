use stvisit_core::backbone::ladder_shapes;
use stvisit_core::data::generate_synthetic;
use stvisit_core::diff::{DropoutStream, Tape, Tensor};
use stvisit_core::metrics::ForecastSet;
use stvisit_core::model::Variant;
use stvisit_core::nn::Bound;
use stvisit_core::pipeline::{ablation_run, forecast, model_spec, prepare, ForecastOptions};
use stvisit_core::training::init_model;

use crate::support::{rand_tensor, rng, serial, small_run, tiny_model, verdict};

/// Entries where `ℓ ≤ m ≤ u` fails or any bound is negative or non-finite.
fn violations(set: &ForecastSet) -> usize {
    (0..set.target.len())
        .filter(|&i| {
            let (l, m, u) = (set.lower[i], set.median[i], set.upper[i]);
            !(l.is_finite() && u.is_finite() && l >= 0.0 && l <= m && m <= u)
        })
        .count()
}

/// Moves node `i` of every `[B, N, ...]` block to position `perm[i]`.
fn permute_nodes(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (b, n) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; t.len()];
    for bi in 0..b {
        for (i, &p) in perm.iter().enumerate() {
            let src = (bi * n + i) * inner;
            let dst = (bi * n + p) * inner;
            out[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    Tensor::new(s, out).unwrap()
}

fn permute_square(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[perm[i], perm[j]], a.at(&[i, j]));
        }
    }
    out
}

#[test]
fn criterion_10_structural_invariants() {
    let _serial = serial();
    // non-crossing and non-negative output for every variant, trained and not
    let mut crossing = Vec::new();
    let mut checked = 0usize;
    for (k, &variant) in Variant::ALL.iter().enumerate() {
        let run = small_run(20 + k as u64);
        let bundle = generate_synthetic(&run.data).unwrap();
        let data = prepare(&bundle, &run).unwrap();
        let all: Vec<usize> = (0..data.windows.len()).collect();
        let fresh = init_model(model_spec(&bundle, &run, variant), &data, run.seed).unwrap();
        let raw = forecast(&fresh, &data, &all, ForecastOptions::from_run(&run)).unwrap();
        let trained = ablation_run(variant, &bundle, &run).unwrap();
        for set in [&raw.set, &trained.evaluation.forecast.set] {
            checked += set.target.len();
            let bad = violations(set);
            if bad > 0 {
                crossing.push(format!("{}: {}", variant, bad));
            }
        }
    }

    // backbone node-permutation equivariance
    let tiny = tiny_model(Variant::Full, 5, 0.1, 2);
    let perm = [2usize, 0, 3, 1];
    let mut r = rng(77);
    let x = rand_tensor(&mut r, &[2, 4, 8, 8], -1.0, 1.0);
    let mut prior = rand_tensor(&mut r, &[4, 4], 0.0, 1.0);
    for i in 0..4 {
        for j in 0..i {
            prior.set(&[i, j], prior.at(&[j, i]));
        }
        prior.set(&[i, i], 0.0);
    }
    let run_backbone = |x: &Tensor, prior: &Tensor| {
        let tape = Tape::new();
        let bp = Bound::new(&tape, &tiny.model.store, false);
        let (xv, pv) = (tape.constant(x.clone()), tape.constant(prior.clone()));
        let z = tiny
            .model
            .backbone
            .forward(&bp, xv, Some(pv), DropoutStream::eval())
            .unwrap();
        tape.value(z)
    };
    let base = run_backbone(&x, &prior);
    let moved = run_backbone(&permute_nodes(&x, &perm), &permute_square(&prior, &perm));
    let equivariance = permute_nodes(&base, &perm).max_abs_diff(&moved);

    // shape ladder
    let mut ladder_ok = true;
    let mut ladder_report = Vec::new();
    for stages in 0..=2usize {
        let t = tiny_model(Variant::Full, 9, 0.0, stages);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &t.model.store, false);
        let x = tape.constant(rand_tensor(&mut r, &[2, 4, 8, 8], -1.0, 1.0));
        let prior = tape.constant(t.ctx.prior.clone());
        let ladder = t
            .model
            .backbone
            .forward_ladder(&bp, x, Some(prior), DropoutStream::eval())
            .unwrap();
        let shapes = ladder_shapes(&tape, &ladder);
        let level = |s: usize| vec![2, 4, 8 >> s, 8 << s];
        let mut expect: Vec<Vec<usize>> = (0..stages).map(level).collect();
        expect.push(level(stages));
        expect.extend((0..stages).rev().map(level));
        ladder_ok &= shapes == expect;
        ladder_report.push(format!("S={} {:?}", stages, shapes));
    }

    let pass = crossing.is_empty() && equivariance <= 1e-12 && ladder_ok;
    verdict(
        10,
        "structural invariants",
        pass,
        &format!(
            "ordering/sign violations {:?} over {} predictions from 7 variants; permutation max abs diff {:.1e} (tol 1e-12); ladders {}",
            crossing,
            checked,
            equivariance,
            ladder_report.join(" | ")
        ),
    );
    assert!(pass);
}
