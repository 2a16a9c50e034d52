//! Quantile and Gaussian heads, their training losses, MC-dropout variance
//! decomposition, analytic Gaussian intervals and split-conformal widening.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Linear, ParamStore};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const RESIDUAL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqConfig {
    pub alpha: f64,
    pub mc_passes: usize,
    pub train_passes: usize,
    pub sigma_floor: f64,
    pub residual_epsilon: f64,
    pub weights: LossWeights,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig {
            alpha: 0.1,
            mc_passes: 20,
            train_passes: 2,
            sigma_floor: SIGMA_FLOOR,
            residual_epsilon: RESIDUAL_EPS,
            weights: LossWeights::default(),
        }
    }
}

impl UqConfig {
    /// Lower, median and upper quantile levels.
    pub fn levels(&self) -> [f64; 3] {
        [self.alpha / 2.0, 0.5, 1.0 - self.alpha / 2.0]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("uq.alpha", "must lie in (0, 1)"));
        }
        // 1 disables MC dropout; decomposition itself needs 2 or more
        if self.mc_passes < 1 {
            return Err(Error::config("uq.mc_passes", "must be at least 1"));
        }
        if self.train_passes < 1 {
            return Err(Error::config("uq.train_passes", "must be at least 1"));
        }
        if !(self.sigma_floor > 0.0) || !(self.residual_epsilon > 0.0) {
            return Err(Error::config("uq.sigma_floor", "floors must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub quant: f64,
    pub nll: f64,
    pub param: f64,
    pub calib: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            quant: 1.0,
            nll: 1.0,
            param: 1.0,
            calib: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("quant", self.quant),
            ("nll", self.nll),
            ("param", self.param),
            ("calib", self.calib),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(
                    format!("uq.weights.{}", name),
                    "must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ heads

/// Lower/median/upper heads with softplus gaps, so `ℓ ≤ m ≤ u` by
/// construction; a final ReLU keeps everything non-negative.
#[derive(Clone, Debug)]
pub struct QuantileHeads {
    pub median: Linear,
    pub lower_gap: Linear,
    pub upper_gap: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct QuantileOutputs {
    pub lower: Var,
    pub median: Var,
    pub upper: Var,
}

impl QuantileHeads {
    pub fn new(b: &mut Builder, d_head: usize, n_out: usize) -> Self {
        b.push("quantile");
        let median = b.linear("median", d_head, n_out);
        let lower_gap = b.linear("lower_gap", d_head, n_out);
        let upper_gap = b.linear("upper_gap", d_head, n_out);
        b.pop();
        QuantileHeads {
            median,
            lower_gap,
            upper_gap,
        }
    }

    pub fn forward(&self, bp: &Bound, features: Var) -> Result<QuantileOutputs> {
        let tape = bp.tape;
        let m = self.median.forward(bp, features)?;
        let gl = tape.softplus(self.lower_gap.forward(bp, features)?)?;
        let gu = tape.softplus(self.upper_gap.forward(bp, features)?)?;
        Ok(QuantileOutputs {
            lower: tape.relu(tape.sub(m, gl)?)?,
            median: tape.relu(m)?,
            upper: tape.relu(tape.add(m, gu)?)?,
        })
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.median.zero(store);
        self.lower_gap.zero(store);
        self.upper_gap.zero(store);
    }
}

/// Heteroscedastic Gaussian head: `μ = ReLU(·)`, `σ² = softplus(·) + floor`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Linear,
    pub var: Linear,
    pub floor: f64,
}

impl GaussianHead {
    pub fn new(b: &mut Builder, d_head: usize, n_out: usize, floor: f64) -> Self {
        b.push("gaussian");
        let mean = b.linear("mean", d_head, n_out);
        let var = b.linear("var", d_head, n_out);
        b.pop();
        GaussianHead { mean, var, floor }
    }

    pub fn forward(&self, bp: &Bound, features: Var) -> Result<(Var, Var)> {
        let tape = bp.tape;
        let mu = tape.relu(self.mean.forward(bp, features)?)?;
        let var = tape.add_scalar(tape.softplus(self.var.forward(bp, features)?)?, self.floor)?;
        Ok((mu, var))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.mean.zero(store);
        self.var.zero(store);
    }
}

// ----------------------------------------------------------------- losses

/// Mean over levels and samples of `ρ_q(y - q̂)`, `ρ_q(z) = q z + max(-z, 0)`.
pub fn pinball_loss(tape: &Tape, preds: &[(f64, Var)], y: Var) -> Result<Var> {
    if preds.is_empty() || tape.shape(y).iter().product::<usize>() == 0 {
        return Err(Error::Contract(
            "pinball loss over an empty sample set".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for &(q, pred) in preds {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Parameter(format!(
                "quantile level {} outside (0, 1)",
                q
            )));
        }
        let z = tape.sub(y, pred)?;
        let rho = tape.add(tape.scale(z, q)?, tape.relu(tape.neg(z)?)?)?;
        let m = tape.mean_all(rho)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    tape.scale(total.unwrap(), 1.0 / preds.len() as f64)
}

/// Mean of `½ log σ² + (y - μ)² / (2σ²)`.
pub fn nll_loss(tape: &Tape, mu: Var, var: Var, y: Var) -> Result<Var> {
    if tape.value(var).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("Gaussian variance must be positive".into()));
    }
    let half_log = tape.scale(tape.log(var)?, 0.5)?;
    let sq = tape.square(tape.sub(y, mu)?)?;
    let quad = tape.div(sq, tape.scale(var, 2.0)?)?;
    tape.mean_all(tape.add(half_log, quad)?)
}

/// Spread of the per-pass means around their average:
/// mean over samples of `(1/M) Σ_m (μ_m - μ̄)²`.
pub fn param_loss(tape: &Tape, passes: &[Var]) -> Result<Var> {
    if passes.len() < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 passes, got {}",
            passes.len()
        )));
    }
    let m = passes.len() as f64;
    let mut sum = passes[0];
    for &p in &passes[1..] {
        sum = tape.add(sum, p)?;
    }
    let mean = tape.scale(sum, 1.0 / m)?;
    let mut acc: Option<Var> = None;
    for &p in passes {
        let d = tape.square(tape.sub(p, mean)?)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, d)?,
            None => d,
        });
    }
    tape.mean_all(tape.scale(acc.unwrap(), 1.0 / m)?)
}

/// Standardized-residual moment matching: with `r = (y - μ)/(σ + ε)`,
/// `(mean r)² + (mean r² - 1)²`.
pub fn calib_loss(tape: &Tape, mu: Var, sigma: Var, y: Var, eps: f64) -> Result<Var> {
    let r = tape.div(tape.sub(y, mu)?, tape.add_scalar(sigma, eps)?)?;
    let m1 = tape.mean_all(r)?;
    let m2 = tape.mean_all(tape.square(r)?)?;
    tape.add(tape.square(m1)?, tape.square(tape.add_scalar(m2, -1.0)?)?)
}

/// Weighted sum of named scalar components; zero weights drop a component.
pub fn total_loss(tape: &Tape, parts: &[(&str, Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(name, v, w) in parts {
        let val = tape.value(v);
        if val.len() != 1 {
            return Err(Error::Contract(format!(
                "loss component {} is not a scalar",
                name
            )));
        }
        if !val.item().is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
            });
        }
        if w == 0.0 {
            continue;
        }
        let term = tape.scale(v, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

// ------------------------------------------------------ plain-value tools

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `μ ± z_{1-α/2} σ`, lower bound clipped at 0.
pub fn gaussian_interval(mu: &[f64], var: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {} outside (0, 1)", alpha)));
    }
    if mu.len() != var.len() {
        return Err(Error::shape(
            "gaussian_interval",
            "mean and variance lengths differ",
        ));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let (lo, hi) = mu
        .iter()
        .zip(var)
        .map(|(&m, &v)| {
            let s = v.max(0.0).sqrt();
            ((m - z * s).max(0.0), m + z * s)
        })
        .unzip();
    Ok((lo, hi))
}

/// Moments of an MC-dropout ensemble, reduced in pass order.
#[derive(Clone, Debug, PartialEq)]
pub struct McDecomposition {
    pub mean: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
}

pub fn decompose(mus: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<McDecomposition> {
    let m = mus.len();
    if m < 2 {
        return Err(Error::Parameter(format!(
            "MC dropout needs at least 2 passes, got {}",
            m
        )));
    }
    if vars.len() != m || mus.iter().chain(vars).any(|p| p.len() != mus[0].len()) {
        return Err(Error::shape("decompose", "ragged pass outputs"));
    }
    let n = mus[0].len();
    let mf = m as f64;
    // mean as an offset from the first pass, so identical passes give
    // exactly zero spread
    let mut shift = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for (mu, var) in mus.iter().zip(vars) {
        for i in 0..n {
            shift[i] += mu[i] - mus[0][i];
            aleatoric[i] += var[i];
        }
    }
    let mean: Vec<f64> = (0..n).map(|i| mus[0][i] + shift[i] / mf).collect();
    aleatoric.iter_mut().for_each(|v| *v /= mf);
    let mut epistemic = vec![0.0; n];
    for mu in mus {
        for i in 0..n {
            epistemic[i] += (mu[i] - mean[i]).powi(2);
        }
    }
    epistemic.iter_mut().for_each(|v| *v /= mf);
    let total = aleatoric
        .iter()
        .zip(&epistemic)
        .map(|(a, e)| a + e)
        .collect();
    Ok(McDecomposition {
        mean,
        aleatoric,
        epistemic,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub alpha: f64,
    pub n_cal: usize,
    pub coverage_gap: f64,
    pub margin_c: f64,
    pub score_quantiles: [f64; 3],
    /// Empirical coverage of the raw intervals on the calibration set, %.
    pub raw_coverage: f64,
}

/// `max{ℓ - y, y - u, 0}` per sample.
pub fn nonconformity_scores(lo: &[f64], hi: &[f64], y: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .zip(y)
        .map(|((&l, &u), &t)| (l - t).max(t - u).max(0.0))
        .collect()
}

/// `k`-th smallest (1-based) with `k = ⌈p n⌉` clamped to `[1, n]`.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Split-conformal margin: the `⌈(n+1)(1-α)⌉`-th smallest score, or the
/// largest score when that rank exceeds `n`.
pub fn fit_calibration(lo: &[f64], hi: &[f64], y: &[f64], alpha: f64) -> Result<CalibrationRecord> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Contract("empty calibration set".into()));
    }
    if lo.len() != n || hi.len() != n {
        return Err(Error::shape(
            "fit_calibration",
            "interval and target lengths differ",
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {} outside (0, 1)", alpha)));
    }
    let mut scores = nonconformity_scores(lo, hi, y);
    scores.sort_by(f64::total_cmp);
    let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    let margin_c = scores[rank.clamp(1, n) - 1];
    let covered = crate::metrics::coverage(lo, hi, y)?;
    Ok(CalibrationRecord {
        alpha,
        n_cal: n,
        coverage_gap: (1.0 - alpha) - covered / 100.0,
        margin_c,
        score_quantiles: [
            nearest_rank(&scores, 0.5),
            nearest_rank(&scores, 0.9),
            nearest_rank(&scores, 0.99),
        ],
        raw_coverage: covered,
    })
}

/// `[ℓ - c, u + c]` with the lower end clipped at 0.
pub fn apply_calibration(lo: &[f64], hi: &[f64], c: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(c >= 0.0) {
        return Err(Error::Parameter(format!(
            "margin {} must be non-negative",
            c
        )));
    }
    Ok((
        lo.iter().map(|l| (l - c).max(0.0)).collect(),
        hi.iter().map(|u| u + c).collect(),
    ))
}
