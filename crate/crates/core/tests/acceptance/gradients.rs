use std::time::Instant;

use stvisit_core::diff::{DropoutStream, GradCheck, Tape, Tensor, Unary, Var};
use stvisit_core::model::Variant;
use stvisit_core::nn::Bound;
use stvisit_core::uncertainty::UqConfig;
use stvisit_core::Result;

use crate::support::{rand_tensor, rng, serial, tiny_model, verdict};

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    f64,
    f64,
    fn(&Tape, &[Var]) -> Result<Var>,
);

fn op_catalog() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], -1.0, 1.0, |t, v| {
            t.matmul(v[0], v[1])
        }),
        (
            "matmul_batched",
            vec![vec![2, 3, 3], vec![2, 3, 5]],
            -1.0,
            1.0,
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            "matmul_shared",
            vec![vec![3, 3], vec![2, 3, 5]],
            -1.0,
            1.0,
            |t, v| t.matmul(v[0], v[1]),
        ),
        ("add", vec![vec![2, 3, 4], vec![3, 1]], -1.0, 1.0, |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![3]], -1.0, 1.0, |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3, 4], vec![4]], -1.0, 1.0, |t, v| {
            t.mul(v[0], v[1])
        }),
        ("div", vec![vec![2, 3], vec![2, 3]], 0.5, 2.0, |t, v| {
            t.div(v[0], v[1])
        }),
        ("scale", vec![vec![5]], -1.0, 1.0, |t, v| {
            t.scale(v[0], -2.5)
        }),
        ("add_scalar", vec![vec![5]], -1.0, 1.0, |t, v| {
            t.add_scalar(v[0], 0.7)
        }),
        ("neg", vec![vec![5]], -1.0, 1.0, |t, v| t.neg(v[0])),
        ("exp", vec![vec![7]], -2.0, 2.0, |t, v| t.exp(v[0])),
        ("log", vec![vec![7]], 0.2, 3.0, |t, v| t.log(v[0])),
        ("softplus", vec![vec![7]], -3.0, 3.0, |t, v| {
            t.softplus(v[0])
        }),
        ("sigmoid", vec![vec![7]], -3.0, 3.0, |t, v| t.sigmoid(v[0])),
        ("relu", vec![vec![7]], -3.0, 3.0, |t, v| t.relu(v[0])),
        ("leaky_relu", vec![vec![7]], -3.0, 3.0, |t, v| {
            t.leaky_relu(v[0], 0.2)
        }),
        ("silu", vec![vec![7]], -3.0, 3.0, |t, v| t.silu(v[0])),
        ("gelu", vec![vec![7]], -3.0, 3.0, |t, v| t.gelu(v[0])),
        ("tanh", vec![vec![7]], -3.0, 3.0, |t, v| t.tanh(v[0])),
        ("sqrt", vec![vec![7]], 0.3, 3.0, |t, v| t.sqrt(v[0])),
        ("square", vec![vec![7]], -3.0, 3.0, |t, v| t.square(v[0])),
        ("rsqrt_or_one", vec![vec![7]], 0.3, 3.0, |t, v| {
            t.unary(v[0], Unary::RsqrtOrOne)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], -1.0, 1.0, |t, v| {
            t.concat(&[v[0], v[1]])
        }),
        ("slice_last", vec![vec![3, 6]], -1.0, 1.0, |t, v| {
            t.slice_last(v[0], 2, 3)
        }),
        ("split_last", vec![vec![3, 6]], -1.0, 1.0, |t, v| {
            let parts = t.split_last(v[0], &[2, 4])?;
            t.mul(parts[0], t.slice_last(parts[1], 1, 2)?)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], -1.0, 1.0, |t, v| {
            t.sum_axis(v[0], 1)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], -1.0, 1.0, |t, v| {
            t.mean_axis(v[0], 0)
        }),
        ("sum_all", vec![vec![2, 3]], -1.0, 1.0, |t, v| {
            t.square(t.sum_all(v[0])?)
        }),
        ("mean_all", vec![vec![2, 3]], -1.0, 1.0, |t, v| {
            t.square(t.mean_all(v[0])?)
        }),
        ("reshape", vec![vec![2, 6]], -1.0, 1.0, |t, v| {
            t.reshape(v[0], &[3, 4])
        }),
        ("expand", vec![vec![1, 3]], -1.0, 1.0, |t, v| {
            t.expand(v[0], &[4, 3])
        }),
        ("transpose_last2", vec![vec![2, 3, 4]], -1.0, 1.0, |t, v| {
            t.transpose_last2(v[0])
        }),
        ("softmax", vec![vec![3, 5]], -2.0, 2.0, |t, v| {
            t.softmax(v[0])
        }),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            -2.0,
            2.0,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "depthwise_conv_time",
            vec![vec![2, 6, 3], vec![3, 3]],
            -1.0,
            1.0,
            |t, v| t.depthwise_conv_time(v[0], v[1]),
        ),
        (
            "conv_time",
            vec![vec![2, 8, 3], vec![4, 3, 5]],
            -1.0,
            1.0,
            |t, v| t.conv_time(v[0], v[1], 2),
        ),
        (
            "conv_transpose_time",
            vec![vec![2, 4, 5], vec![4, 5, 3]],
            -1.0,
            1.0,
            |t, v| t.conv_transpose_time(v[0], v[1], 2, 8),
        ),
        ("dropout", vec![vec![4, 5]], -1.0, 1.0, |t, v| {
            t.dropout(v[0], 0.3, DropoutStream::train(3, 1, 0), 9)
        }),
        (
            "selective_scan",
            vec![
                vec![2, 5, 3],
                vec![2, 5, 3],
                vec![3, 2],
                vec![2, 5, 2],
                vec![2, 5, 2],
                vec![3],
            ],
            -1.0,
            1.0,
            |t, v| {
                let delta = t.softplus(v[1])?;
                let a = t.neg(t.softplus(v[2])?)?;
                t.selective_scan(v[0], delta, a, v[3], v[4], v[5])
            },
        ),
    ]
}

/// `sum(w ⊙ y)` with a fixed random weight so no gradient cancels by symmetry.
fn weighted_sum(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xABCD);
    let w = tape.constant(rand_tensor(&mut r, &tape.shape(y), -1.0, 1.0));
    tape.sum_all(tape.mul(y, w)?)
}

#[test]
fn criterion_01_gradient_correctness() {
    let _serial = serial();
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut worst_op = 0.0f64;
    let cases = op_catalog();
    for (name, shapes, lo, hi, f) in &cases {
        for seed in 0..10u64 {
            let mut r = rng(seed * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| rand_tensor(&mut r, s, *lo, *hi))
                .collect();
            let rep = GradCheck::new(1e-5, 1e-4)
                .run(|tape, v| weighted_sum(tape, f(tape, v)?, seed), &inputs)
                .unwrap();
            worst_op = rep.max_rel_err.iter().fold(worst_op, |m, &e| m.max(e));
            if !rep.passed {
                failures.push(format!("{} seed {}: {:?}", name, seed, rep.max_rel_err));
            }
        }
    }

    // End to end on every parameter. Roundoff in an O(10) output swamps
    // h = 1e-5 differences for gradients near zero (some are exactly zero
    // because node mixing preserves the sum), so the primary step is 1e-4,
    // gradients under 1e-5 are compared absolutely, and elements with a ReLU
    // kink within 1e-4 are retried at 1e-5.
    let e2e = GradCheck::new(1e-4, 1e-4).floor(1e-5).fallback(1e-5);
    let tiny = tiny_model(Variant::Full, 3, 0.1, 1);
    let (model, ctx, batch) = (&tiny.model, &tiny.ctx, &tiny.batch);
    let z0 = e2e
        .run(
            |tape, vars| {
                let bp = Bound::from_vars(tape, &model.store, vars);
                let z = model.backbone_output(&bp, ctx, batch, DropoutStream::train(5, 0, 0))?;
                tape.sum_all(z)
            },
            model.store.values(),
        )
        .unwrap();
    let uq = UqConfig::default();
    let streams = [DropoutStream::train(5, 0, 0), DropoutStream::train(5, 0, 1)];
    let total = e2e
        .run(
            |tape, vars| {
                let bp = Bound::from_vars(tape, &model.store, vars);
                Ok(model.loss(&bp, ctx, batch, &uq, &streams)?.0)
            },
            model.store.values(),
        )
        .unwrap();
    let worst = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    if !z0.passed {
        failures.push(format!("sum(Z0): worst {:.2e}", worst(&z0.max_rel_err)));
    }
    if !total.passed {
        failures.push(format!("L_total: worst {:.2e}", worst(&total.max_rel_err)));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} ops x 10 seeds worst {:.1e}; sum(Z0) worst {:.1e} over {} params; L_total worst {:.1e}; tol 1e-4; {:.1}s (< 120s)",
            cases.len(),
            worst_op,
            worst(&z0.max_rel_err),
            z0.checked.iter().sum::<usize>(),
            worst(&total.max_rel_err),
            secs
        ),
    );
    assert!(pass, "{:?}", failures);
}
