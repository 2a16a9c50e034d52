//! Synthetic multi-category visit counts with covariates and shocks, the
//! log transform, sliding windows, chronological splits and the on-disk
//! bundle format.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{build_gaussian_adjacency, median_pairwise_distance, GraphSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockKind {
    Drop,
    Surge,
}

/// Multiplicative change of the latent intensity over `[start, start +
/// duration)`. Empty node or category lists mean "all".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shock {
    pub kind: ShockKind,
    pub start: usize,
    pub duration: usize,
    pub multiplier: f64,
    #[serde(default)]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub categories: Vec<usize>,
}

impl Shock {
    pub fn covers(&self, node: usize, t: usize, cat: usize) -> bool {
        (self.start..self.start + self.duration).contains(&t)
            && (self.nodes.is_empty() || self.nodes.contains(&node))
            && (self.categories.is_empty() || self.categories.contains(&cat))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub n_categories: usize,
    pub seed: u64,
    /// Mean daily visits per category at an average node.
    pub base_rates: Vec<f64>,
    pub weekly_amplitude: f64,
    pub monthly_amplitude: f64,
    /// Side of the square the nodes are scattered over.
    pub area: f64,
    /// Length scale of the spatial covariance of node effects and noise.
    pub correlation_length: f64,
    /// Stationary standard deviation of the log-scale regional drift.
    pub drift_scale: f64,
    pub drift_persistence: f64,
    /// Share of each drift update that comes from graph neighbours.
    pub drift_spillover: f64,
    /// Log-scale effect of recent weather on visits.
    pub weather_effect: f64,
    /// Log-normal observation dispersion.
    pub noise_dispersion: f64,
    pub d_dem: usize,
    pub d_ext: usize,
    pub graph_sigma: Option<f64>,
    pub graph_epsilon: f64,
    pub shocks: Vec<Shock>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_nodes: 20,
            n_steps: 600,
            n_categories: 4,
            seed: 0,
            base_rates: vec![80.0, 150.0, 40.0, 25.0],
            weekly_amplitude: 0.35,
            monthly_amplitude: 0.3,
            area: 10.0,
            correlation_length: 3.0,
            drift_scale: 0.25,
            drift_persistence: 0.95,
            drift_spillover: 0.6,
            weather_effect: 0.25,
            noise_dispersion: 0.12,
            d_dem: 32,
            d_ext: 16,
            graph_sigma: None,
            graph_epsilon: 0.1,
            shocks: Vec::new(),
        }
    }
}

/// Relative weekly strength per category: ambulatory, hospitals, nursing,
/// social assistance.
const WEEKLY_SHAPE: [f64; 4] = [1.0, 0.5, 0.08, 0.6];
const WEEKLY_PHASE: [f64; 4] = [0.0, 0.8, 0.3, 2.0];

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Parameter(format!("data.{}: {}", field, reason)))
        };
        if self.n_nodes < 2 {
            return bad("n_nodes", format!("need at least 2, got {}", self.n_nodes));
        }
        if self.n_categories == 0 {
            return bad("n_categories", "must be positive".into());
        }
        if self.base_rates.len() != self.n_categories || self.base_rates.iter().any(|&r| !(r > 0.0))
        {
            return bad(
                "base_rates",
                format!("need {} positive rates", self.n_categories),
            );
        }
        if self.d_dem < 1 || self.d_ext < 1 {
            return bad("d_dem", "covariate widths must be positive".into());
        }
        for (name, v) in [
            ("weekly_amplitude", self.weekly_amplitude),
            ("monthly_amplitude", self.monthly_amplitude),
            ("drift_scale", self.drift_scale),
            ("weather_effect", self.weather_effect),
            ("noise_dispersion", self.noise_dispersion),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and non-negative".into());
            }
        }
        if !(0.0..1.0).contains(&self.drift_persistence)
            || !(0.0..=1.0).contains(&self.drift_spillover)
        {
            return bad(
                "drift_persistence",
                "persistence in [0, 1), spillover in [0, 1]".into(),
            );
        }
        if !(self.area > 0.0) || !(self.correlation_length > 0.0) {
            return bad(
                "area",
                "area and correlation length must be positive".into(),
            );
        }
        for (k, s) in self.shocks.iter().enumerate() {
            let ok = match s.kind {
                ShockKind::Drop => s.multiplier > 0.0 && s.multiplier < 1.0,
                ShockKind::Surge => s.multiplier > 1.0,
            };
            if !ok {
                return bad(
                    "shocks",
                    format!(
                        "shock {} has multiplier {} inconsistent with {:?}",
                        k, s.multiplier, s.kind
                    ),
                );
            }
            if s.start + s.duration > self.n_steps || s.duration == 0 {
                return bad("shocks", format!("shock {} does not fit in the series", k));
            }
            if s.nodes.iter().any(|&i| i >= self.n_nodes)
                || s.categories.iter().any(|&c| c >= self.n_categories)
            {
                return bad(
                    "shocks",
                    format!("shock {} names an unknown node or category", k),
                );
            }
        }
        Ok(())
    }
}

/// Index ranges over window starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub cal: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        match name {
            "train" => Some(self.train.clone()),
            "val" => Some(self.val.clone()),
            "cal" => Some(self.cal.clone()),
            "test" => Some(self.test.clone()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub t_in: usize,
    pub t_out: usize,
    /// Padded input length; derived from the backbone depth when absent.
    pub pad_to: Option<usize>,
    pub ratios: [f64; 3],
    pub cal_fraction: f64,
}

impl WindowConfig {
    pub fn padded_len(&self) -> usize {
        self.pad_to.unwrap_or(self.t_in).max(self.t_in)
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            t_in: 7,
            t_out: 3,
            pad_to: None,
            ratios: [0.8, 0.1, 0.1],
            cal_fraction: 0.5,
        }
    }
}

/// Generated (or loaded) data set. Arrays are row-major: `visits` and
/// `intensity` are `[N, T, C]`, `demographics` `[N, d_dem]`, `externals`
/// `[N, T, d_ext]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: SyntheticConfig,
    pub visits: Tensor,
    pub demographics: Tensor,
    pub externals: Tensor,
    pub graph: GraphSpec,
    /// Latent intensity behind the counts; not persisted.
    pub intensity: Option<Tensor>,
}

impl DatasetBundle {
    pub fn n_nodes(&self) -> usize {
        self.visits.shape()[0]
    }
    pub fn n_steps(&self) -> usize {
        self.visits.shape()[1]
    }
    pub fn n_categories(&self) -> usize {
        self.visits.shape()[2]
    }
    pub fn d_dem(&self) -> usize {
        self.demographics.shape()[1]
    }
    pub fn d_ext(&self) -> usize {
        self.externals.shape()[2]
    }
}

fn spatial_cholesky(coords: &[[f64; 2]], length: f64) -> Result<DMatrix<f64>> {
    let n = coords.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d2 = (coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2);
        (-d2 / (length * length)).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    k.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Parameter("spatial covariance is not positive definite".into()))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn correlated(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> Vec<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| gauss(rng));
    (chol * z).iter().copied().collect()
}

/// Innovation multiplier that gives the recursion `d ← M d + s L z`
/// (`L Lᵀ` the spatial kernel) a stationary covariance whose mean diagonal
/// is `scale²`. The covariance `Σ_k Mᵏ K Mᵏᵀ` is summed by doubling.
fn drift_innovation_scale(m: &DMatrix<f64>, chol: &DMatrix<f64>, scale: f64) -> f64 {
    let mut sigma = chol * chol.transpose();
    let mut power = m.clone();
    for _ in 0..64 {
        sigma = &sigma + &power * &sigma * power.transpose();
        power = &power * &power;
        if power.amax() < 1e-15 {
            break;
        }
    }
    scale / (sigma.trace() / m.nrows() as f64).sqrt()
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
}

/// Builds counts from a latent intensity of base rate × node size ×
/// demographic loading × seasonality × regional drift × weather × shocks.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (n, steps, cats) = (cfg.n_nodes, cfg.n_steps, cfg.n_categories);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let u: [f64; 2] = [rand::Rng::random(&mut rng), rand::Rng::random(&mut rng)];
            [u[0] * cfg.area, u[1] * cfg.area]
        })
        .collect();
    let sigma = cfg
        .graph_sigma
        .unwrap_or_else(|| median_pairwise_distance(&coords));
    let graph = build_gaussian_adjacency(&coords, sigma, cfg.graph_epsilon)?;
    let chol = spatial_cholesky(&coords, cfg.correlation_length)?;

    // static node effects
    let log_size: Vec<f64> = correlated(&mut rng, &chol)
        .iter()
        .map(|v| 0.35 * v)
        .collect();
    let mut traits: Vec<Vec<f64>> = (0..3).map(|_| correlated(&mut rng, &chol)).collect();
    traits.iter_mut().for_each(|t| standardize(t));
    // category c loads on trait c % 3 (nursing on the elderly share, etc.)
    let loading = |i: usize, c: usize| 0.2 * traits[(c + 2) % 3][i];

    let mut demographics = Tensor::zeros(&[n, cfg.d_dem]);
    for i in 0..n {
        let noise = 0.05 * gauss(&mut rng);
        demographics.set(&[i, 0], log_size[i] + noise);
    }
    for col in 1..cfg.d_dem {
        let v = if col <= 3 {
            traits[col - 1].clone()
        } else {
            correlated(&mut rng, &chol)
        };
        for i in 0..n {
            let jitter = 0.1 * gauss(&mut rng);
            demographics.set(&[i, col], v[i] + jitter);
        }
    }

    // drift update M = ρ((1 - κ) I + κ R) with R the row-normalized graph
    let rho = cfg.drift_persistence;
    let kappa = cfg.drift_spillover;
    let update = DMatrix::from_fn(n, n, |i, j| {
        let row = &graph.adjacency[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        let spill = if s > 0.0 { row[j] / s } else { 0.0 };
        rho * (kappa * spill + if i == j { 1.0 - kappa } else { 0.0 })
    });
    let innov = drift_innovation_scale(&update, &chol, cfg.drift_scale);
    let step_drift = |d: &DVector<f64>, rng: &mut ChaCha8Rng| -> DVector<f64> {
        &update * d + DVector::from_vec(correlated(rng, &chol)) * innov
    };
    // burn in so the drift starts near its stationary law
    let mut drift = DVector::zeros(n);
    for _ in 0..(5.0 / (1.0 - rho)).ceil() as usize {
        drift = step_drift(&drift, &mut rng);
    }
    let mut weather = vec![0.0; n];
    let mut weather_hist: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut visits = Tensor::zeros(&[n, steps, cats]);
    let mut intensity = Tensor::zeros(&[n, steps, cats]);
    let mut externals = Tensor::zeros(&[n, steps, cfg.d_ext]);
    let tau = std::f64::consts::TAU;
    for t in 0..steps {
        drift = step_drift(&drift, &mut rng);
        let wz = correlated(&mut rng, &chol);
        for i in 0..n {
            weather[i] = 0.5 * weather[i] + 0.85 * wz[i];
        }
        weather_hist.push(weather.clone());
        let recent = |i: usize| -> f64 {
            let lags: Vec<f64> = (1..=2)
                .filter(|&l| t >= l)
                .map(|l| weather_hist[t - l][i])
                .collect();
            if lags.is_empty() {
                0.0
            } else {
                lags.iter().sum::<f64>() / lags.len() as f64
            }
        };
        let dow = t % 7;
        for i in 0..n {
            let w_eff = -cfg.weather_effect * recent(i);
            for c in 0..cats {
                let shape = WEEKLY_SHAPE[c % 4];
                let mut log_season = cfg.weekly_amplitude
                    * shape
                    * (tau * t as f64 / 7.0 + WEEKLY_PHASE[c % 4]).sin();
                if c % 4 == 3 {
                    log_season += cfg.monthly_amplitude * (tau * t as f64 / 30.0).sin();
                }
                let mut lam = cfg.base_rates[c]
                    * (log_size[i] + loading(i, c) + log_season + drift[i] + w_eff).exp();
                for s in &cfg.shocks {
                    if s.covers(i, t, c) {
                        lam *= s.multiplier;
                    }
                }
                intensity.set(&[i, t, c], lam);
                let obs = if cfg.noise_dispersion > 0.0 {
                    lam * (cfg.noise_dispersion * gauss(&mut rng)).exp()
                } else {
                    lam
                };
                visits.set(&[i, t, c], obs.round().max(0.0));
            }
            let mut row = vec![0.0; cfg.d_ext];
            let mut fixed = vec![weather[i]];
            fixed.extend((0..7).map(|d| if d == dow { 1.0 } else { 0.0 }));
            fixed.extend([
                (tau * t as f64 / 7.0).sin(),
                (tau * t as f64 / 7.0).cos(),
                (tau * t as f64 / 30.0).sin(),
                (tau * t as f64 / 30.0).cos(),
            ]);
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k < fixed.len() {
                    fixed[k]
                } else {
                    gauss(&mut rng)
                };
            }
            for (k, v) in row.into_iter().enumerate() {
                externals.set(&[i, t, k], v);
            }
        }
    }
    Ok(DatasetBundle {
        config: cfg.clone(),
        visits,
        demographics,
        externals,
        graph,
        intensity: Some(intensity),
    })
}

// -------------------------------------------------------------- transform

/// `ln(x + 1)`; counts must be non-negative.
pub fn log_transform(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = v.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Contract(format!(
            "log transform needs non-negative input, got {}",
            x
        )));
    }
    Ok(v.iter().map(|x| x.ln_1p()).collect())
}

pub fn inverse_transform(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.exp_m1()).collect()
}

// ---------------------------------------------------------------- windows

/// One forecasting example on the original count scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    /// `[N, pad_to, C]`, earliest frame repeated on the left.
    pub visits: Tensor,
    /// `[N, pad_to, d_ext]`.
    pub externals: Tensor,
    /// `[N, T_out, C]`.
    pub targets: Tensor,
}

pub fn window_count(n_steps: usize, t_in: usize, t_out: usize) -> usize {
    (n_steps + 1).saturating_sub(t_in + t_out)
}

fn frames(
    src: &Tensor,
    i: usize,
    width: usize,
    times: impl Iterator<Item = usize>,
    out: &mut Vec<f64>,
) {
    let steps = src.shape()[1];
    for t in times {
        let off = (i * steps + t) * width;
        out.extend_from_slice(&src.data()[off..off + width]);
    }
}

pub fn build_window(bundle: &DatasetBundle, start: usize, w: &WindowConfig) -> Result<Window> {
    let (n, c, e) = (bundle.n_nodes(), bundle.n_categories(), bundle.d_ext());
    if start + w.t_in + w.t_out > bundle.n_steps() {
        return Err(Error::Contract(format!(
            "window at {} runs past the series",
            start
        )));
    }
    let pad = w.padded_len() - w.t_in;
    let input_times = || std::iter::repeat_n(start, pad).chain(start..start + w.t_in);
    let (mut v, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        frames(&bundle.visits, i, c, input_times(), &mut v);
        frames(&bundle.externals, i, e, input_times(), &mut x);
        frames(
            &bundle.visits,
            i,
            c,
            start + w.t_in..start + w.t_in + w.t_out,
            &mut y,
        );
    }
    let len = pad + w.t_in;
    Ok(Window {
        start,
        visits: Tensor::new(&[n, len, c], v)?,
        externals: Tensor::new(&[n, len, e], x)?,
        targets: Tensor::new(&[n, w.t_out, c], y)?,
    })
}

/// All stride-1 windows in chronological order.
pub fn build_windows(bundle: &DatasetBundle, w: &WindowConfig) -> Result<Vec<Window>> {
    if w.t_in == 0 || w.t_out == 0 || w.pad_to.is_some_and(|p| p < w.t_in) {
        return Err(Error::Contract(
            "need t_in, t_out >= 1 and pad_to >= t_in".into(),
        ));
    }
    let count = window_count(bundle.n_steps(), w.t_in, w.t_out);
    if count == 0 {
        return Err(Error::Contract(format!(
            "series of length {} is shorter than t_in + t_out = {}",
            bundle.n_steps(),
            w.t_in + w.t_out
        )));
    }
    (0..count).map(|s| build_window(bundle, s, w)).collect()
}

/// Contiguous train | val | cal | test blocks; the calibration block is the
/// trailing `cal_fraction` of the validation share.
pub fn split_dataset(n_windows: usize, ratios: [f64; 3], cal_fraction: f64) -> Result<Splits> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::config(
            "window.ratios",
            format!("{:?} must be positive and sum to 1", ratios),
        ));
    }
    if !(0.0..1.0).contains(&cal_fraction) {
        return Err(Error::config("window.cal_fraction", "must lie in [0, 1)"));
    }
    let n_train = (ratios[0] * n_windows as f64).round() as usize;
    let n_hold = (ratios[1] * n_windows as f64).round() as usize;
    let n_cal = (cal_fraction * n_hold as f64).round() as usize;
    let n_val = n_hold.saturating_sub(n_cal);
    let n_test = n_windows.saturating_sub(n_train + n_hold);
    for (field, len) in [
        ("train", n_train),
        ("val", n_val),
        ("cal", n_cal),
        ("test", n_test),
    ] {
        if len == 0 {
            let name = if field == "cal" {
                "window.cal_fraction"
            } else {
                "window.ratios"
            };
            return Err(Error::config(
                name,
                format!("{} split would be empty ({} windows)", field, n_windows),
            ));
        }
    }
    Ok(Splits {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        cal: n_train + n_val..n_train + n_hold,
        test: n_train + n_hold..n_windows,
    })
}

// ------------------------------------------------------------ persistence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SyntheticConfig,
    pub window: WindowConfig,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub n_categories: usize,
    pub d_dem: usize,
    pub d_ext: usize,
    pub n_windows: usize,
    pub splits: Splits,
    pub log1p: bool,
}

pub const BUNDLE_VERSION: u32 = 1;

pub fn manifest_for(bundle: &DatasetBundle, window: &WindowConfig) -> Result<Manifest> {
    let n_windows = window_count(bundle.n_steps(), window.t_in, window.t_out);
    Ok(Manifest {
        format_version: BUNDLE_VERSION,
        config: bundle.config.clone(),
        window: window.clone(),
        n_nodes: bundle.n_nodes(),
        n_steps: bundle.n_steps(),
        n_categories: bundle.n_categories(),
        d_dem: bundle.d_dem(),
        d_ext: bundle.d_ext(),
        n_windows,
        splits: split_dataset(n_windows, window.ratios, window.cal_fraction)?,
        log1p: true,
    })
}

fn num_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{}{}", prefix, k)).collect()
}

/// Writes manifest.json, visits.csv, demographics.csv, externals.csv and
/// graph.json into `dir`.
pub fn save_bundle(bundle: &DatasetBundle, window: &WindowConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = manifest_for(bundle, window)?;
    let (n, steps, cats) = (bundle.n_nodes(), bundle.n_steps(), bundle.n_categories());

    let mut w = csv::Writer::from_path(dir.join("visits.csv"))?;
    w.write_record(["node", "time", "category", "count"])?;
    for i in 0..n {
        for t in 0..steps {
            for c in 0..cats {
                let v = bundle.visits.at(&[i, t, c]) as u64;
                w.write_record([i.to_string(), t.to_string(), c.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("demographics.csv"))?;
    let mut head = vec!["node".to_string()];
    head.extend(num_header("d", bundle.d_dem()));
    w.write_record(&head)?;
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend((0..bundle.d_dem()).map(|k| bundle.demographics.at(&[i, k]).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("externals.csv"))?;
    let mut head = vec!["node".to_string(), "time".to_string()];
    head.extend(num_header("e", bundle.d_ext()));
    w.write_record(&head)?;
    for i in 0..n {
        for t in 0..steps {
            let mut row = vec![i.to_string(), t.to_string()];
            row.extend((0..bundle.d_ext()).map(|k| bundle.externals.at(&[i, t, k]).to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    fs::write(
        dir.join("graph.json"),
        serde_json::to_string_pretty(&bundle.graph)?,
    )?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn parse_f64(field: &str, file: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("{}: bad number {:?}: {}", file, field, e)))
}

fn parse_idx(field: &str, limit: usize, file: &str) -> Result<usize> {
    let v = field
        .parse::<usize>()
        .map_err(|e| Error::Format(format!("{}: bad index {:?}: {}", file, field, e)))?;
    if v >= limit {
        return Err(Error::Format(format!(
            "{}: index {} out of range {}",
            file, v, limit
        )));
    }
    Ok(v)
}

pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            manifest.format_version
        )));
    }
    let (n, steps, cats) = (manifest.n_nodes, manifest.n_steps, manifest.n_categories);
    let (dd, de) = (manifest.d_dem, manifest.d_ext);

    let mut visits = Tensor::zeros(&[n, steps, cats]);
    let mut r = csv::Reader::from_path(dir.join("visits.csv"))?;
    let mut seen = 0usize;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Format("visits.csv: expected 4 columns".into()));
        }
        let i = parse_idx(&rec[0], n, "visits.csv")?;
        let t = parse_idx(&rec[1], steps, "visits.csv")?;
        let c = parse_idx(&rec[2], cats, "visits.csv")?;
        visits.set(&[i, t, c], parse_f64(&rec[3], "visits.csv")?);
        seen += 1;
    }
    if seen != n * steps * cats {
        return Err(Error::Format(format!(
            "visits.csv: {} rows, expected {}",
            seen,
            n * steps * cats
        )));
    }

    let mut demographics = Tensor::zeros(&[n, dd]);
    let mut r = csv::Reader::from_path(dir.join("demographics.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dd + 1 {
            return Err(Error::Format("demographics.csv: wrong column count".into()));
        }
        let i = parse_idx(&rec[0], n, "demographics.csv")?;
        for k in 0..dd {
            demographics.set(&[i, k], parse_f64(&rec[k + 1], "demographics.csv")?);
        }
    }

    let mut externals = Tensor::zeros(&[n, steps, de]);
    let mut r = csv::Reader::from_path(dir.join("externals.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != de + 2 {
            return Err(Error::Format("externals.csv: wrong column count".into()));
        }
        let i = parse_idx(&rec[0], n, "externals.csv")?;
        let t = parse_idx(&rec[1], steps, "externals.csv")?;
        for k in 0..de {
            externals.set(&[i, t, k], parse_f64(&rec[k + 2], "externals.csv")?);
        }
    }

    let graph: GraphSpec = serde_json::from_str(&fs::read_to_string(dir.join("graph.json"))?)?;
    if graph.n_nodes != n || graph.adjacency.len() != n * n {
        return Err(Error::Format(
            "graph.json does not match the manifest".into(),
        ));
    }
    Ok((
        DatasetBundle {
            config: manifest.config.clone(),
            visits,
            demographics,
            externals,
            graph,
            intensity: None,
        },
        manifest,
    ))
}
