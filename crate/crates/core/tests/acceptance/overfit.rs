use std::time::Instant;

use stvisit_core::data::generate_synthetic;
use stvisit_core::model::Batch;
use stvisit_core::pipeline::{prepare, train_variant};

use crate::support::{run_config, serial, verdict};

/// Mean over (node, category) series of the population standard deviation.
fn mean_series_std(visits: &[f64], n: usize, t: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c {
            let s: Vec<f64> = (0..t).map(|tt| visits[(i * t + tt) * c + k]).collect();
            let m = s.iter().sum::<f64>() / t as f64;
            total += (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / t as f64).sqrt();
        }
    }
    total / (n * c) as f64
}

#[test]
fn criterion_06_overfit_tiny_dataset() {
    let _serial = serial();
    let started = Instant::now();
    // Noise, drift, weather and the monthly cycle are switched off so the
    // targets are a function of the inputs and can be fit.
    let run = run_config(
        r#"{"seed": 1,
            "data": {"seed": 1, "n_nodes": 8, "n_steps": 200, "d_dem": 4, "d_ext": 4,
                     "noise_dispersion": 0.0, "drift_scale": 0.0, "weather_effect": 0.0,
                     "monthly_amplitude": 0.0},
            "model": {"d_model": 12, "dropout": 0.0, "encoder": {"d_hid": 12},
                      "backbone": {"stages": 1, "blocks_per_stage": 1}},
            "uq": {"mc_passes": 1, "train_passes": 1},
            "train": {"max_epochs": 500, "batch_size": 16, "lr": 0.01, "weight_decay": 0.0,
                      "lr_decay": 0.5, "lr_decay_every": 75, "clip_norm": 5.0,
                      "patience": 500, "restore_best": false}}"#,
    );
    let bundle = generate_synthetic(&run.data).unwrap();
    let data = prepare(&bundle, &run).unwrap();
    let (model, outcome) = train_variant(&bundle, &data, &run, run.variant).unwrap();

    let idx: Vec<usize> = data.splits.train.clone().collect();
    let (mut abs_err, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(64) {
        let batch = Batch::from_windows(&data.windows, chunk).unwrap();
        let f = model.predict(&data.ctx, &batch, 1, 0).unwrap();
        for (m, y) in f.median.iter().zip(batch.raw_targets.data()) {
            abs_err += (m.exp_m1().max(0.0) - y).abs();
            count += 1;
        }
    }
    let mae = abs_err / count as f64;
    let std = mean_series_std(
        bundle.visits.data(),
        bundle.n_nodes(),
        bundle.n_steps(),
        bundle.n_categories(),
    );
    let secs = started.elapsed().as_secs_f64();

    let pass = mae < 0.05 * std && outcome.history.len() <= 500 && secs < 300.0;
    verdict(
        6,
        "overfit tiny dataset",
        pass,
        &format!(
            "median-head train MAE {:.3} = {:.2}% of mean per-series std {:.2} (< 5%) after {} epochs; {:.0}s (< 300s)",
            mae,
            100.0 * mae / std,
            std,
            outcome.history.len(),
            secs
        ),
    );
    assert!(pass);
}
