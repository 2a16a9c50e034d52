use rand::Rng;

use stvisit_core::diff::{Tape, Tensor};
use stvisit_core::metrics::{coverage, interval_score, mae, mpiw, rmse};
use stvisit_core::uncertainty::{calib_loss, fit_calibration, nll_loss, param_loss, pinball_loss};

use crate::support::*;

fn scalar(tape: &Tape, v: stvisit_core::diff::Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn criterion_04_loss_and_metric_oracles() {
    let _serial = serial();
    let names = [
        "pinball",
        "nll",
        "param",
        "calib",
        "mae",
        "rmse",
        "mpiw",
        "interval_score",
        "coverage",
    ];
    let mut worst = [0.0f64; 9];
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..40usize);
        let y = rand_vec(&mut r, n, 0.0, 50.0);
        let constant =
            |tape: &Tape, v: &[f64]| tape.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap());

        let levels = [0.05, 0.5, 0.95];
        let preds: Vec<Vec<f64>> = levels
            .iter()
            .map(|_| rand_vec(&mut r, n, 0.0, 50.0))
            .collect();
        let mu = rand_vec(&mut r, n, 0.0, 50.0);
        let var = rand_vec(&mut r, n, 0.1, 30.0);
        let sigma: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let m = r.random_range(2..8usize);
        let passes: Vec<Vec<f64>> = (0..m).map(|_| rand_vec(&mut r, n, -3.0, 3.0)).collect();

        let tape = Tape::new();
        let yv = constant(&tape, &y);
        let pv: Vec<_> = levels
            .iter()
            .zip(&preds)
            .map(|(&q, p)| (q, constant(&tape, p)))
            .collect();
        let got = [
            scalar(&tape, pinball_loss(&tape, &pv, yv).unwrap()),
            scalar(
                &tape,
                nll_loss(&tape, constant(&tape, &mu), constant(&tape, &var), yv).unwrap(),
            ),
            scalar(
                &tape,
                param_loss(
                    &tape,
                    &passes
                        .iter()
                        .map(|p| constant(&tape, p))
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
            ),
            scalar(
                &tape,
                calib_loss(
                    &tape,
                    constant(&tape, &mu),
                    constant(&tape, &sigma),
                    yv,
                    1e-6,
                )
                .unwrap(),
            ),
        ];
        let want = [
            oracle_pinball(&levels, &preds, &y),
            oracle_nll(&mu, &var, &y),
            oracle_param(&passes),
            oracle_calib(&mu, &sigma, &y, 1e-6),
        ];

        let lo = rand_vec(&mut r, n, 0.0, 30.0);
        let hi: Vec<f64> = lo.iter().map(|l| l + r.random_range(0.0..20.0)).collect();
        let point = &preds[1];
        let alpha = r.random_range(0.01..0.5);
        let metric_got = [
            mae(&y, point).unwrap(),
            rmse(&y, point).unwrap(),
            mpiw(&lo, &hi).unwrap(),
            interval_score(&lo, &hi, &y, alpha).unwrap(),
            coverage(&lo, &hi, &y).unwrap(),
        ];
        let metric_want = [
            oracle_mae(&y, point),
            oracle_rmse(&y, point),
            oracle_mpiw(&lo, &hi),
            oracle_interval_score(&lo, &hi, &y, alpha),
            oracle_coverage(&lo, &hi, &y),
        ];
        for (k, (g, w)) in got
            .iter()
            .chain(&metric_got)
            .zip(want.iter().chain(&metric_want))
            .enumerate()
        {
            worst[k] = worst[k].max((g - w).abs() / w.abs().max(1.0));
        }
    }

    let is_example = interval_score(&[0.0], &[1.0], &[1.5], 0.1).unwrap();
    let margin = fit_calibration(&[0.0; 3], &[1.0; 3], &[0.5, 1.2, 2.0], 0.1)
        .unwrap()
        .margin_c;

    let oracle_ok = worst.iter().all(|&e| e <= 1e-12);
    let pass = oracle_ok && is_example == 11.0 && margin == 1.0;
    let detail: Vec<String> = names
        .iter()
        .zip(&worst)
        .map(|(n, e)| format!("{} {:.1e}", n, e))
        .collect();
    verdict(
        4,
        "loss and metric oracles",
        pass,
        &format!(
            "worst rel err over 100 instances [{}] (tol 1e-12); IS example {} (want 11); margin example {} (want 1)",
            detail.join(", "),
            is_example,
            margin
        ),
    );
    assert!(pass);
}
