//! End-to-end steps shared by the command line and the tests: windowing a
//! bundle, training a variant, conformal calibration and evaluation.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{build_windows, split_dataset, DatasetBundle};
use crate::error::{Error, Result};
use crate::metrics::{
    gaussian_reliability, selective_regression_curve, EvalReport, ForecastSet, ReliabilityPoint,
};
use crate::model::{Batch, LogForecast, Model, ModelSpec, StaticContext, Variant};
use crate::training::{init_model, train, EpochRecord, TrainData, TrainOutcome};
use crate::uncertainty::{apply_calibration, fit_calibration, normal_quantile, CalibrationRecord};

pub fn prepare(bundle: &DatasetBundle, run: &RunConfig) -> Result<TrainData> {
    let windows = build_windows(bundle, &run.window)?;
    let splits = split_dataset(windows.len(), run.window.ratios, run.window.cal_fraction)?;
    Ok(TrainData {
        ctx: StaticContext::new(bundle, run.model.encoder.spatial_norm),
        windows,
        splits,
    })
}

pub fn model_spec(bundle: &DatasetBundle, run: &RunConfig, variant: Variant) -> ModelSpec {
    ModelSpec {
        n_categories: bundle.n_categories(),
        d_dem: bundle.d_dem(),
        d_ext: bundle.d_ext(),
        t_len: run.window.padded_len(),
        t_out: run.window.t_out,
        config: run.model.clone(),
        variant,
        sigma_floor: run.uq.sigma_floor,
        input_norm: None,
    }
}

/// Forecasts on the original count scale, one entry per
/// (window, node, horizon step, category) in that order.
#[derive(Clone, Debug)]
pub struct SplitForecast {
    /// Intervals before conformal widening in `lower`/`upper`.
    pub set: ForecastSet,
    pub window: Vec<usize>,
    pub node: Vec<usize>,
    /// Absolute time index of the target.
    pub time: Vec<usize>,
    /// Count-scale variance parts; zero epistemic without MC passes.
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

fn to_counts(x: f64) -> f64 {
    x.exp_m1().max(0.0)
}

/// How to run the model over a split.
#[derive(Clone, Copy, Debug)]
pub struct ForecastOptions {
    /// MC-dropout passes for the Gaussian moments.
    pub passes: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Miscoverage for Gaussian-derived intervals.
    pub alpha: f64,
    /// Unpadded input length, to place targets in time.
    pub t_in: usize,
}

impl ForecastOptions {
    pub fn from_run(run: &RunConfig) -> Self {
        ForecastOptions {
            passes: run.uq.mc_passes,
            batch_size: run.train.batch_size,
            seed: run.seed,
            alpha: run.uq.alpha,
            t_in: run.window.t_in,
        }
    }
}

/// Runs the model over windows `idx`.
pub fn forecast(
    model: &Model,
    data: &TrainData,
    idx: &[usize],
    opt: ForecastOptions,
) -> Result<SplitForecast> {
    let variant = model.spec.variant;
    let (n_out, t_out) = (model.spec.n_categories, model.spec.t_out);
    let mut set = ForecastSet::default();
    let mut mu_o = Vec::new();
    let mut var_o = Vec::new();
    let mut out = SplitForecast {
        set: ForecastSet::default(),
        window: Vec::new(),
        node: Vec::new(),
        time: Vec::new(),
        aleatoric: Vec::new(),
        epistemic: Vec::new(),
    };
    let z = normal_quantile(1.0 - opt.alpha / 2.0);
    for chunk in idx.chunks(opt.batch_size.max(1)) {
        let batch = Batch::from_windows(&data.windows, chunk)?;
        let f: LogForecast = model.predict(&data.ctx, &batch, opt.passes, opt.seed)?;
        let total = f.total_var();
        let n_nodes = batch.targets.shape()[1];
        for (k, &target) in batch.raw_targets.data().iter().enumerate() {
            let c = k % n_out;
            let h = (k / n_out) % t_out;
            let node = (k / (n_out * t_out)) % n_nodes;
            let b = k / (n_out * t_out * n_nodes);
            let (mu, var) = (f.mu[k], total[k]);
            if variant.gaussian_intervals() {
                let s = var.sqrt();
                set.lower.push(to_counts(mu - z * s));
                set.upper.push(to_counts(mu + z * s));
                set.median.push(to_counts(mu));
            } else {
                set.lower.push(to_counts(f.lower[k]));
                set.upper.push(to_counts(f.upper[k]));
                set.median.push(to_counts(f.median[k]));
            }
            set.target.push(target);
            set.category.push(c);
            set.horizon.push(h);
            // delta-method moments on the count scale
            mu_o.push(to_counts(mu));
            var_o.push((2.0 * mu).exp() * var);
            out.window.push(batch.starts[b]);
            out.node.push(node);
            out.time.push(batch.starts[b] + opt.t_in + h);
            out.aleatoric.push(f.aleatoric[k] * (2.0 * mu).exp());
            out.epistemic.push(f.epistemic[k] * (2.0 * mu).exp());
        }
    }
    if variant.has_gaussian() {
        set.mu = Some(mu_o);
        set.var = Some(var_o);
    }
    out.set = set;
    Ok(out)
}

/// Rejects a checkpoint whose shapes disagree with the data or windowing.
pub fn check_compatible(spec: &ModelSpec, bundle: &DatasetBundle, run: &RunConfig) -> Result<()> {
    let pairs = [
        (
            "data.n_categories",
            spec.n_categories,
            bundle.n_categories(),
        ),
        ("data.d_dem", spec.d_dem, bundle.d_dem()),
        ("data.d_ext", spec.d_ext, bundle.d_ext()),
        ("window.pad_to", spec.t_len, run.window.padded_len()),
        ("window.t_out", spec.t_out, run.window.t_out),
    ];
    for (field, want, got) in pairs {
        if want != got {
            return Err(Error::config(
                field,
                format!("checkpoint was trained with {}, run has {}", want, got),
            ));
        }
    }
    Ok(())
}

/// Split-conformal margin fitted on the calibration windows.
pub fn calibrate(
    model: &Model,
    data: &TrainData,
    run: &RunConfig,
    alpha: f64,
) -> Result<CalibrationRecord> {
    let idx: Vec<usize> = data.splits.cal.clone().collect();
    if idx.is_empty() {
        return Err(Error::config(
            "window.cal_fraction",
            "calibration split is empty",
        ));
    }
    let f = forecast(model, data, &idx, ForecastOptions::from_run(run))?;
    fit_calibration(&f.set.lower, &f.set.upper, &f.set.target, alpha)
}

pub const SELECTIVE_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const RELIABILITY_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub selective: Vec<(f64, f64)>,
    pub reliability: Vec<ReliabilityPoint>,
    /// Forecast with conformal widening applied to `set.lower`/`set.upper`.
    pub forecast: SplitForecast,
}

/// Scores windows `idx`; `calibration` widens the intervals when the
/// variant supports it.
pub fn evaluate(
    model: &Model,
    data: &TrainData,
    run: &RunConfig,
    split: &str,
    idx: &[usize],
    calibration: Option<&CalibrationRecord>,
) -> Result<Evaluation> {
    let alpha = calibration.map(|c| c.alpha).unwrap_or(run.uq.alpha);
    let mut f = forecast(model, data, idx, ForecastOptions::from_run(run))?;
    let raw = (f.set.lower.clone(), f.set.upper.clone());
    let calibrated = match calibration {
        Some(rec) if model.spec.variant.calibrates() => {
            let (lo, hi) = apply_calibration(&raw.0, &raw.1, rec.margin_c)?;
            f.set.lower = lo;
            f.set.upper = hi;
            true
        }
        _ => false,
    };
    let report = EvalReport::build(
        split,
        &f.set,
        (&raw.0, &raw.1),
        alpha,
        calibrated,
        model.spec.n_categories,
        model.spec.t_out,
    )?;
    let point: Vec<f64> = f
        .set
        .lower
        .iter()
        .zip(&f.set.upper)
        .map(|(l, u)| 0.5 * (l + u))
        .collect();
    let width: Vec<f64> = f
        .set
        .lower
        .iter()
        .zip(&f.set.upper)
        .map(|(l, u)| u - l)
        .collect();
    let selective = selective_regression_curve(&point, &width, &f.set.target, &SELECTIVE_GRID)?;
    let mut reliability = match (&f.set.mu, &f.set.var) {
        (Some(mu), Some(var)) => gaussian_reliability(mu, var, &f.set.target, &RELIABILITY_GRID)?,
        _ => Vec::new(),
    };
    reliability.push(ReliabilityPoint {
        nominal: 1.0 - alpha,
        empirical: report.headline.coverage / 100.0,
        source: if calibrated {
            "quantile_calibrated".into()
        } else {
            "quantile_raw".into()
        },
    });
    Ok(Evaluation {
        report,
        selective,
        reliability,
        forecast: f,
    })
}

/// Result of training, calibrating and testing one variant.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: Variant,
    pub model: Model,
    pub training: TrainOutcome,
    pub calibration: Option<CalibrationRecord>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn train_variant(
    bundle: &DatasetBundle,
    data: &TrainData,
    run: &RunConfig,
    variant: Variant,
) -> Result<(Model, TrainOutcome)> {
    let mut model = init_model(model_spec(bundle, run, variant), data, run.seed)?;
    let outcome = train(&mut model, data, &run.train, &run.uq, run.seed)?;
    Ok((model, outcome))
}

/// Trains `variant` on the bundle, calibrates on the calibration split
/// and scores the test split.
pub fn ablation_run(
    variant: Variant,
    bundle: &DatasetBundle,
    run: &RunConfig,
) -> Result<AblationOutcome> {
    let data = prepare(bundle, run)?;
    let (model, training) = train_variant(bundle, &data, run, variant)?;
    let calibration = if variant.calibrates() {
        Some(calibrate(&model, &data, run, run.uq.alpha)?)
    } else {
        None
    };
    let test: Vec<usize> = data.splits.test.clone().collect();
    let evaluation = evaluate(&model, &data, run, "test", &test, calibration.as_ref())?;
    Ok(AblationOutcome {
        variant,
        model,
        training,
        calibration,
        evaluation,
    })
}
