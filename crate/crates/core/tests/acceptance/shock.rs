use stvisit_core::data::{generate_synthetic, Shock, ShockKind};
use stvisit_core::metrics::coverage;
use stvisit_core::model::Variant;
use stvisit_core::pipeline::ablation_run;

use crate::support::{benchmark_run, serial, verdict};

/// Strict coverage in percent over the entries selected by `keep`.
fn coverage_where(lo: &[f64], hi: &[f64], y: &[f64], keep: impl Fn(usize) -> bool) -> (f64, usize) {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| keep(i)).collect();
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    (coverage(&pick(lo), &pick(hi), &pick(y)).unwrap(), idx.len())
}

#[test]
fn criterion_07_shock_robustness() {
    let _serial = serial();
    let mut run = benchmark_run(1);
    // test targets span steps 539..600; the shock sits inside them
    let shock = 560..570;
    run.data.shocks = vec![Shock {
        kind: ShockKind::Drop,
        start: shock.start,
        duration: shock.len(),
        multiplier: 0.3,
        nodes: Vec::new(),
        categories: Vec::new(),
    }];
    let bundle = generate_synthetic(&run.data).unwrap();
    let out = ablation_run(Variant::Full, &bundle, &run).unwrap();
    let f = &out.evaluation.forecast;
    let first_test_target = out.evaluation.forecast.time.iter().min().copied().unwrap();
    let t_in = run.window.t_in;

    let (lo, hi, y) = (&f.set.lower, &f.set.upper, &f.set.target);
    let in_shock = |t: usize| shock.contains(&t);
    let input_touches = |start: usize| start < shock.end && start + t_in > shock.start;
    let (on_shock, n_shock) = coverage_where(lo, hi, y, |i| in_shock(f.time[i]));
    let (clean, n_clean) = coverage_where(lo, hi, y, |i| {
        !in_shock(f.time[i]) && !input_touches(f.window[i])
    });
    let (recovery, n_recovery) = coverage_where(lo, hi, y, |i| {
        !in_shock(f.time[i]) && input_touches(f.window[i])
    });
    // how far the forecast follows the drop once every input step is shocked
    let settled = |i: usize| in_shock(f.time[i]) && f.window[i] >= shock.start;
    let (on_settled, n_settled) = coverage_where(lo, hi, y, settled);
    let ratio = |keep: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| keep(i)).collect();
        idx.iter().map(|&i| f.set.median[i]).sum::<f64>() / idx.iter().map(|&i| y[i]).sum::<f64>()
    };
    let follow = ratio(&settled);

    let pass = first_test_target <= shock.start && on_shock >= 75.0 && clean >= 87.0;
    verdict(
        7,
        "shock robustness",
        pass,
        &format!(
            "drop x0.3 over steps {}..{}: coverage on shock targets {:.2}% of {} (>= 75), on clean test targets {:.2}% of {} (>= 87); post-shock targets with shocked inputs {:.2}% of {} (reported only); shock targets with fully shocked inputs {:.2}% of {}, median/target {:.2}; margin c {:.3}",
            shock.start,
            shock.end,
            on_shock,
            n_shock,
            clean,
            n_clean,
            recovery,
            n_recovery,
            on_settled,
            n_settled,
            follow,
            out.calibration.as_ref().map(|c| c.margin_c).unwrap_or(0.0)
        ),
    );
    assert!(pass);
}
