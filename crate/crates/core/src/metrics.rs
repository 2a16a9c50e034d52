//! Point and interval forecast scores, breakdown reports and diagnostic
//! curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::gaussian_interval;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Contract(format!("{} over an empty sample set", op)));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

fn check_intervals(op: &'static str, lo: &[f64], hi: &[f64]) -> Result<()> {
    check_pair(op, lo, hi)?;
    if let Some(i) = lo.iter().zip(hi).position(|(l, u)| u < l) {
        return Err(Error::Contract(format!(
            "{}: interval {} is crossed ({} > {})",
            op, i, lo[i], hi[i]
        )));
    }
    Ok(())
}

pub fn mae(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair("mae", y, pred)?;
    Ok(y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair("rmse", y, pred)?;
    Ok((y
        .iter()
        .zip(pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.len() as f64)
        .sqrt())
}

/// Mean interval width.
pub fn mpiw(lo: &[f64], hi: &[f64]) -> Result<f64> {
    check_intervals("mpiw", lo, hi)?;
    Ok(lo.iter().zip(hi).map(|(l, u)| u - l).sum::<f64>() / lo.len() as f64)
}

/// Width plus `(2/α)` times the distance by which `y` falls outside.
pub fn interval_score(lo: &[f64], hi: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    check_intervals("interval_score", lo, hi)?;
    check_pair("interval_score", lo, y)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {} outside (0, 1)", alpha)));
    }
    let k = 2.0 / alpha;
    let total: f64 = lo
        .iter()
        .zip(hi)
        .zip(y)
        .map(|((&l, &u), &t)| {
            let mut s = u - l;
            if t < l {
                s += k * (l - t);
            }
            if t > u {
                s += k * (t - u);
            }
            s
        })
        .sum();
    Ok(total / lo.len() as f64)
}

/// Percentage of targets strictly inside their interval; boundary hits
/// count as misses.
pub fn coverage(lo: &[f64], hi: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("coverage", lo, y)?;
    check_pair("coverage", hi, y)?;
    let hits = lo
        .iter()
        .zip(hi)
        .zip(y)
        .filter(|((&l, &u), &t)| l < t && t < u)
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

/// For each kept fraction `f`, the MAE over the `⌈f n⌉` least uncertain
/// samples (ties by index).
pub fn selective_regression_curve(
    pred: &[f64],
    uncertainty: &[f64],
    y: &[f64],
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_pair("selective_regression", pred, y)?;
    check_pair("selective_regression", uncertainty, y)?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    grid.iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Parameter(format!(
                    "kept fraction {} outside (0, 1]",
                    f
                )));
            }
            let k = ((f * y.len() as f64).ceil() as usize).clamp(1, y.len());
            let err: f64 = order[..k].iter().map(|&i| (y[i] - pred[i]).abs()).sum();
            Ok((f, err / k as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub nominal: f64,
    pub empirical: f64,
    pub source: String,
}

/// Empirical coverage at each nominal level, with intervals produced by
/// `intervals(nominal)`.
pub fn reliability_curve<F>(
    y: &[f64],
    grid: &[f64],
    source: &str,
    mut intervals: F,
) -> Result<Vec<ReliabilityPoint>>
where
    F: FnMut(f64) -> Result<(Vec<f64>, Vec<f64>)>,
{
    grid.iter()
        .map(|&nominal| {
            let (lo, hi) = intervals(nominal)?;
            Ok(ReliabilityPoint {
                nominal,
                empirical: coverage(&lo, &hi, y)? / 100.0,
                source: source.to_string(),
            })
        })
        .collect()
}

/// Reliability of analytic Gaussian intervals `μ ± z σ`.
pub fn gaussian_reliability(
    mu: &[f64],
    var: &[f64],
    y: &[f64],
    grid: &[f64],
) -> Result<Vec<ReliabilityPoint>> {
    reliability_curve(y, grid, "gaussian", |nominal| {
        gaussian_interval(mu, var, 1.0 - nominal)
    })
}

// ----------------------------------------------------------------- report

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub mpiw: f64,
    pub interval_score: f64,
    pub coverage: f64,
}

impl MetricSet {
    pub fn compute(lo: &[f64], hi: &[f64], y: &[f64], alpha: f64) -> Result<Self> {
        let point: Vec<f64> = lo.iter().zip(hi).map(|(l, u)| 0.5 * (l + u)).collect();
        Ok(MetricSet {
            mae: mae(y, &point)?,
            rmse: rmse(y, &point)?,
            mpiw: mpiw(lo, hi)?,
            interval_score: interval_score(lo, hi, y, alpha)?,
            coverage: coverage(lo, hi, y)?,
        })
    }
}

/// Flat forecast arrays on the original scale, with the category and
/// horizon step of each entry.
#[derive(Clone, Debug, Default)]
pub struct ForecastSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub median: Vec<f64>,
    pub target: Vec<f64>,
    pub category: Vec<usize>,
    pub horizon: Vec<usize>,
    pub mu: Option<Vec<f64>>,
    pub var: Option<Vec<f64>>,
}

impl ForecastSet {
    fn select(&self, keep: impl Fn(usize) -> bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.target.len()).filter(|&i| keep(i)).collect();
        (
            idx.iter().map(|&i| self.lower[i]).collect(),
            idx.iter().map(|&i| self.upper[i]).collect(),
            idx.iter().map(|&i| self.target[i]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub split: String,
    pub category: String,
    pub horizon: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub alpha: f64,
    pub calibrated: bool,
    pub headline: MetricSet,
    pub coverage_pass: bool,
    pub median_mae: f64,
    /// Metrics of the raw quantile intervals before conformal widening.
    pub uncalibrated: MetricSet,
    /// Analytic Gaussian intervals; absent when the variant has no
    /// Gaussian head.
    pub gaussian: Option<MetricSet>,
    pub per_category: Vec<MetricSet>,
    pub per_horizon: Vec<MetricSet>,
    pub rows: Vec<BreakdownRow>,
}

/// Coverage target in percent, rounded to tame `100 (1 - α)` float noise.
pub fn coverage_target(alpha: f64) -> f64 {
    (100.0 * (1.0 - alpha) * 1e9).round() / 1e9
}

impl EvalReport {
    pub fn build(
        split: &str,
        set: &ForecastSet,
        raw: (&[f64], &[f64]),
        alpha: f64,
        calibrated: bool,
        n_categories: usize,
        n_horizons: usize,
    ) -> Result<Self> {
        let headline = MetricSet::compute(&set.lower, &set.upper, &set.target, alpha)?;
        let uncalibrated = MetricSet::compute(raw.0, raw.1, &set.target, alpha)?;
        let gaussian = match (&set.mu, &set.var) {
            (Some(mu), Some(var)) => {
                let (lo, hi) = gaussian_interval(mu, var, alpha)?;
                Some(MetricSet::compute(&lo, &hi, &set.target, alpha)?)
            }
            _ => None,
        };
        let mut rows = vec![BreakdownRow {
            split: split.into(),
            category: "all".into(),
            horizon: "all".into(),
            metrics: headline,
        }];
        let mut per_category = Vec::new();
        for c in 0..n_categories {
            let (lo, hi, y) = set.select(|i| set.category[i] == c);
            let m = MetricSet::compute(&lo, &hi, &y, alpha)?;
            per_category.push(m);
            rows.push(BreakdownRow {
                split: split.into(),
                category: c.to_string(),
                horizon: "all".into(),
                metrics: m,
            });
        }
        let mut per_horizon = Vec::new();
        for h in 0..n_horizons {
            let (lo, hi, y) = set.select(|i| set.horizon[i] == h);
            let m = MetricSet::compute(&lo, &hi, &y, alpha)?;
            per_horizon.push(m);
            rows.push(BreakdownRow {
                split: split.into(),
                category: "all".into(),
                horizon: (h + 1).to_string(),
                metrics: m,
            });
        }
        for c in 0..n_categories {
            for h in 0..n_horizons {
                let (lo, hi, y) = set.select(|i| set.category[i] == c && set.horizon[i] == h);
                rows.push(BreakdownRow {
                    split: split.into(),
                    category: c.to_string(),
                    horizon: (h + 1).to_string(),
                    metrics: MetricSet::compute(&lo, &hi, &y, alpha)?,
                });
            }
        }
        Ok(EvalReport {
            split: split.into(),
            alpha,
            calibrated,
            coverage_pass: headline.coverage >= coverage_target(alpha),
            median_mae: mae(&set.target, &set.median)?,
            headline,
            uncalibrated,
            gaussian,
            per_category,
            per_horizon,
            rows,
        })
    }

    /// One row per (split, category, horizon) with the five metrics.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "split",
            "category",
            "horizon",
            "mae",
            "rmse",
            "mpiw",
            "interval_score",
            "coverage",
        ])?;
        for r in &self.rows {
            let m = &r.metrics;
            wr.write_record([
                r.split.clone(),
                r.category.clone(),
                r.horizon.clone(),
                m.mae.to_string(),
                m.rmse.to_string(),
                m.mpiw.to_string(),
                m.interval_score.to_string(),
                m.coverage.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
