//! Full forecaster: context encoder, backbone, output trunk and the
//! uncertainty heads, with the ablation switches, batch assembly, training
//! losses and MC-dropout prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, OutputHead};
use crate::data::{DatasetBundle, Window};
use crate::diff::{DropoutStream, Tape, Tensor, Var};
use crate::encoder::{ContextInputs, EncoderConfig, PlainEmbedding, Stce};
use crate::error::{Error, Result};
use crate::graph::SpatialNorm;
use crate::nn::{Bound, Builder, ParamStore};
use crate::parallel::{map_ordered, worker_threads};
use crate::uncertainty::{
    calib_loss, decompose, nll_loss, param_loss, pinball_loss, total_loss, GaussianHead,
    LossWeights, QuantileHeads, QuantileOutputs, UqConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    WoStce,
    WoGmamba,
    WoNode,
    WoDistribution,
    WoParameter,
    WoUq,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WoStce,
        Variant::WoGmamba,
        Variant::WoNode,
        Variant::WoDistribution,
        Variant::WoParameter,
        Variant::WoUq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoStce => "wo-stce",
            Variant::WoGmamba => "wo-gmamba",
            Variant::WoNode => "wo-node",
            Variant::WoDistribution => "wo-distribution",
            Variant::WoParameter => "wo-parameter",
            Variant::WoUq => "wo-uq",
        }
    }

    /// Loss weights after the variant has switched components off.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let mut w = base;
        match self {
            Variant::WoNode => w.quant = 0.0,
            Variant::WoDistribution => {
                w.nll = 0.0;
                w.calib = 0.0;
            }
            Variant::WoParameter => w.param = 0.0,
            Variant::WoUq => {
                w.nll = 0.0;
                w.param = 0.0;
                w.calib = 0.0;
            }
            _ => {}
        }
        w
    }

    /// Dropout passes per training step.
    pub fn train_passes(self, uq: &UqConfig) -> usize {
        match self {
            Variant::WoParameter | Variant::WoUq => 1,
            _ => uq.train_passes,
        }
    }

    /// Whether prediction draws MC-dropout passes.
    pub fn uses_mc(self) -> bool {
        !matches!(self, Variant::WoParameter | Variant::WoUq)
    }

    /// Whether the Gaussian head is part of the reported forecast.
    pub fn has_gaussian(self) -> bool {
        self != Variant::WoUq
    }

    /// Whether reported intervals come from the Gaussian head.
    pub fn gaussian_intervals(self) -> bool {
        self == Variant::WoNode
    }

    /// Whether post-hoc conformal widening applies.
    pub fn calibrates(self) -> bool {
        self != Variant::WoUq
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `full`, `wo-stce`, `w/o STCE`, `wo_gmamba`, `w/o G-Mamba`...
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .replace("w/o", "wo")
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let key = key.strip_suffix("based").unwrap_or(&key);
        Ok(match key {
            "full" => Variant::Full,
            "wostce" => Variant::WoStce,
            "wogmamba" => Variant::WoGmamba,
            "wonode" => Variant::WoNode,
            "wodistribution" => Variant::WoDistribution,
            "woparameter" => Variant::WoParameter,
            "wouq" => Variant::WoUq,
            _ => return Err(Error::Parameter(format!("unknown variant {:?}", s))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub dropout: f64,
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            dropout: 0.1,
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("model.d_model", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.encoder.d_hid == 0 {
            return Err(Error::config("model.encoder.d_hid", "must be positive"));
        }
        if self.encoder.kernel == 0 || self.encoder.kernel.is_multiple_of(2) {
            return Err(Error::config("model.encoder.kernel", "must be odd"));
        }
        let bb = &self.backbone;
        if bb.blocks_per_stage == 0 {
            return Err(Error::config(
                "model.backbone.blocks_per_stage",
                "must be positive",
            ));
        }
        if bb.n_state == 0 {
            return Err(Error::config("model.backbone.n_state", "must be positive"));
        }
        if bb.sample_kernel < 2 || !bb.sample_kernel.is_multiple_of(2) {
            return Err(Error::config(
                "model.backbone.sample_kernel",
                "must be even and at least 2",
            ));
        }
        if !(0.0..=1.0).contains(&bb.lambda) {
            return Err(Error::config("model.backbone.lambda", "must lie in [0, 1]"));
        }
        if bb.mlp_ratio == 0 {
            return Err(Error::config(
                "model.backbone.mlp_ratio",
                "must be positive",
            ));
        }
        if bb.stages > 8 {
            return Err(Error::config("model.backbone.stages", "at most 8"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_categories: usize,
    pub d_dem: usize,
    pub d_ext: usize,
    pub t_len: usize,
    pub t_out: usize,
    pub config: ModelConfig,
    pub variant: Variant,
    pub sigma_floor: f64,
    /// Per-category standardization of the log-visit input, fitted on the
    /// training windows; absent means identity.
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    /// Mean and standard deviation per category of the log inputs of
    /// windows `idx`.
    pub fn fit(windows: &[Window], idx: &[usize], n_categories: usize) -> InputNorm {
        let mut sum = vec![0.0; n_categories];
        let mut sq = vec![0.0; n_categories];
        let mut count = vec![0.0; n_categories];
        for &i in idx {
            for (k, v) in windows[i].visits.data().iter().enumerate() {
                let x = v.ln_1p();
                sum[k % n_categories] += x;
                sq[k % n_categories] += x * x;
                count[k % n_categories] += 1.0;
            }
        }
        let center: Vec<f64> = (0..n_categories)
            .map(|c| {
                if count[c] > 0.0 {
                    sum[c] / count[c]
                } else {
                    0.0
                }
            })
            .collect();
        let scale = (0..n_categories)
            .map(|c| {
                let var = if count[c] > 0.0 {
                    sq[c] / count[c] - center[c] * center[c]
                } else {
                    1.0
                };
                var.max(0.0).sqrt().max(1e-3)
            })
            .collect();
        InputNorm { center, scale }
    }

    fn apply(&self, log_visits: &Tensor) -> Tensor {
        let c = self.center.len();
        let mut out = log_visits.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.center[k % c]) / self.scale[k % c];
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum Embedder {
    Context(Box<Stce>),
    Plain(PlainEmbedding),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub backbone: Backbone,
    pub trunk: OutputHead,
    pub quantile: QuantileHeads,
    pub gaussian: GaussianHead,
}

/// Static per-dataset model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticContext {
    pub demographics: Tensor,
    /// Normalized adjacency used by the encoder's graph convolution.
    pub encoder_adjacency: Tensor,
    /// Normalized prior blended into the backbone's learned graphs.
    pub prior: Tensor,
}

impl StaticContext {
    pub fn new(bundle: &DatasetBundle, spatial_norm: SpatialNorm) -> Self {
        StaticContext {
            demographics: bundle.demographics.clone(),
            encoder_adjacency: bundle.graph.normalized(spatial_norm),
            prior: bundle.graph.normalized(SpatialNorm::SymNorm),
        }
    }
}

/// Stacked windows; `visits` and `targets` on the log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub visits: Tensor,
    pub externals: Tensor,
    pub targets: Tensor,
    pub raw_targets: Tensor,
    pub starts: Vec<usize>,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape() != parts[0].shape() {
            return Err(Error::shape("stack", "windows differ in shape"));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

impl Batch {
    pub fn from_windows(windows: &[Window], idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let pick: Vec<&Window> = idx.iter().map(|&i| &windows[i]).collect();
        let raw_visits = stack(&pick.iter().map(|w| &w.visits).collect::<Vec<_>>())?;
        let raw_targets = stack(&pick.iter().map(|w| &w.targets).collect::<Vec<_>>())?;
        let log = |t: &Tensor| -> Result<Tensor> {
            Tensor::new(t.shape(), crate::data::log_transform(t.data())?)
        };
        Ok(Batch {
            visits: log(&raw_visits)?,
            externals: stack(&pick.iter().map(|w| &w.externals).collect::<Vec<_>>())?,
            targets: log(&raw_targets)?,
            raw_targets,
            starts: pick.iter().map(|w| w.start).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Head outputs of one forward pass, each `[B, N, T_out, C]` on the log
/// scale.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub quantiles: QuantileOutputs,
    pub mu: Var,
    pub var: Var,
}

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub quant: f64,
    pub nll: f64,
    pub param: f64,
    pub calib: f64,
    pub total: f64,
}

impl LossParts {
    pub const NAMES: [&'static str; 5] = ["quant", "nll", "param", "calib", "total"];

    pub fn values(&self) -> [f64; 5] {
        [self.quant, self.nll, self.param, self.calib, self.total]
    }

    pub fn accumulate(&mut self, other: &LossParts, w: f64) {
        self.quant += w * other.quant;
        self.nll += w * other.nll;
        self.param += w * other.param;
        self.calib += w * other.calib;
        self.total += w * other.total;
    }
}

/// Per-entry forecast moments on the log scale, flattened `[B, N, T_out, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogForecast {
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
    pub mu: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

impl LogForecast {
    pub fn total_var(&self) -> Vec<f64> {
        self.aleatoric
            .iter()
            .zip(&self.epistemic)
            .map(|(a, e)| a + e)
            .collect()
    }
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.config.validate()?;
        let d = spec.config.d_model;
        let cfg = &spec.config;
        let n_out = spec.n_categories;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let embedder = match spec.variant {
            Variant::WoStce => Embedder::Plain(PlainEmbedding::new(&mut b, n_out, d)),
            _ => Embedder::Context(Box::new(Stce::new(
                &mut b,
                &cfg.encoder,
                n_out,
                spec.d_dem,
                spec.d_ext,
                d,
                cfg.dropout,
            ))),
        };
        let graph_mixing = spec.variant != Variant::WoGmamba;
        let backbone = Backbone::new(&mut b, &cfg.backbone, d, cfg.dropout, graph_mixing);
        let trunk = OutputHead::new(&mut b, spec.t_len, d, spec.t_out, d);
        let quantile = QuantileHeads::new(&mut b, d, n_out);
        let gaussian = GaussianHead::new(&mut b, d, n_out, spec.sigma_floor);
        Ok(Model {
            spec,
            store,
            embedder,
            backbone,
            trunk,
            quantile,
            gaussian,
        })
    }

    /// Starts the median and mean heads at the per-category training mean
    /// of the log targets.
    pub fn init_output_bias(&mut self, level: &[f64]) -> Result<()> {
        for lin in [&self.quantile.median, &self.gaussian.mean] {
            let id = lin.b.expect("heads carry biases");
            self.store
                .set(id, Tensor::new(&[level.len()], level.to_vec())?)?;
        }
        Ok(())
    }

    /// Finest-scale backbone output `[B, N, T, d_model]`.
    pub fn backbone_output(
        &self,
        bp: &Bound,
        ctx: &StaticContext,
        batch: &Batch,
        stream: DropoutStream,
    ) -> Result<Var> {
        let tape = bp.tape;
        let visits = tape.constant(match &self.spec.input_norm {
            Some(norm) => norm.apply(&batch.visits),
            None => batch.visits.clone(),
        });
        let r = match &self.embedder {
            Embedder::Context(stce) => {
                let inp = ContextInputs {
                    visits,
                    demographics: tape.constant(ctx.demographics.clone()),
                    externals: tape.constant(batch.externals.clone()),
                    adjacency: tape.constant(ctx.encoder_adjacency.clone()),
                };
                stce.forward(bp, &inp, stream)?
            }
            Embedder::Plain(p) => p.forward(bp, visits)?,
        };
        let prior = tape.constant(ctx.prior.clone());
        self.backbone.forward(bp, r, Some(prior), stream)
    }

    pub fn forward(
        &self,
        bp: &Bound,
        ctx: &StaticContext,
        batch: &Batch,
        stream: DropoutStream,
    ) -> Result<HeadOutputs> {
        let tape = bp.tape;
        let z = self.backbone_output(bp, ctx, batch, stream)?;
        let f = self.trunk.forward(bp, z)?;
        let quantiles = self.quantile.forward(bp, f)?;
        let (mu, var) = self.gaussian.forward(bp, f)?;
        // without the distribution losses the variance is a fixed constant
        let var = if self.spec.variant == Variant::WoDistribution {
            let level = crate::diff::softplus(0.0) + self.spec.sigma_floor;
            tape.constant(Tensor::full(&tape.shape(var), level))
        } else {
            var
        };
        Ok(HeadOutputs { quantiles, mu, var })
    }

    /// Builds the weighted training objective for one batch, averaging the
    /// per-pass components over `passes` dropout passes.
    pub fn loss(
        &self,
        bp: &Bound,
        ctx: &StaticContext,
        batch: &Batch,
        uq: &UqConfig,
        streams: &[DropoutStream],
    ) -> Result<(Var, LossParts)> {
        let tape = bp.tape;
        let y = tape.constant(batch.targets.clone());
        let levels = uq.levels();
        let weights = self.spec.variant.weights(uq.weights);
        let mut quant = Vec::new();
        let mut nll = Vec::new();
        let mut calib = Vec::new();
        let mut mus = Vec::new();
        for &stream in streams {
            let out = self.forward(bp, ctx, batch, stream)?;
            let q = out.quantiles;
            quant.push(pinball_loss(
                tape,
                &[
                    (levels[0], q.lower),
                    (levels[1], q.median),
                    (levels[2], q.upper),
                ],
                y,
            )?);
            nll.push(nll_loss(tape, out.mu, out.var, y)?);
            calib.push(calib_loss(
                tape,
                out.mu,
                tape.sqrt(out.var)?,
                y,
                uq.residual_epsilon,
            )?);
            mus.push(out.mu);
        }
        let mean = |vs: &[Var]| -> Result<Var> {
            let mut acc = vs[0];
            for &v in &vs[1..] {
                acc = tape.add(acc, v)?;
            }
            tape.scale(acc, 1.0 / vs.len() as f64)
        };
        let quant = mean(&quant)?;
        let nll = mean(&nll)?;
        let calib = mean(&calib)?;
        let param = if mus.len() >= 2 {
            param_loss(tape, &mus)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(
            tape,
            &[
                ("quant", quant, weights.quant),
                ("nll", nll, weights.nll),
                ("param", param, weights.param),
                ("calib", calib, weights.calib),
            ],
        )?;
        let item = |v: Var| tape.value(v).item();
        let parts = LossParts {
            quant: item(quant),
            nll: item(nll),
            param: item(param),
            calib: item(calib),
            total: item(total),
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                component: "total".into(),
            });
        }
        Ok((total, parts))
    }

    /// Deterministic quantile heads plus MC-dropout Gaussian moments.
    /// `mc_seed` keys the dropout masks; `passes < 2` uses the eval pass.
    pub fn predict(
        &self,
        ctx: &StaticContext,
        batch: &Batch,
        passes: usize,
        mc_seed: u64,
    ) -> Result<LogForecast> {
        let tape = Tape::new();
        let bp = Bound::new(&tape, &self.store, false);
        let out = self.forward(&bp, ctx, batch, DropoutStream::eval())?;
        let data = |v: Var| tape.value(v).into_data();
        let q = out.quantiles;
        let (lower, median, upper) = (data(q.lower), data(q.median), data(q.upper));
        let eval_mu = data(out.mu);
        let eval_var = data(out.var);
        let key = batch.starts.first().copied().unwrap_or(0) as u64;
        let (mu, aleatoric, epistemic) = if passes >= 2 && self.spec.variant.uses_mc() {
            let runs = map_ordered(
                passes,
                worker_threads(),
                |p| -> Result<(Vec<f64>, Vec<f64>)> {
                    let tape = Tape::new();
                    let bp = Bound::new(&tape, &self.store, false);
                    let o = self.forward(
                        &bp,
                        ctx,
                        batch,
                        DropoutStream::train(mc_seed, key, p as u64),
                    )?;
                    Ok((tape.value(o.mu).into_data(), tape.value(o.var).into_data()))
                },
            );
            let (mus, vars): (Vec<_>, Vec<_>) = runs
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let dec = decompose(&mus, &vars)?;
            (dec.mean, dec.aleatoric, dec.epistemic)
        } else {
            let zeros = vec![0.0; eval_mu.len()];
            (eval_mu, eval_var, zeros)
        };
        Ok(LogForecast {
            lower,
            median,
            upper,
            mu,
            aleatoric,
            epistemic,
        })
    }

    /// Eval-mode forward of every head, flattened, for round-trip checks.
    pub fn eval_outputs(&self, ctx: &StaticContext, batch: &Batch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bp = Bound::new(&tape, &self.store, false);
        let out = self.forward(&bp, ctx, batch, DropoutStream::eval())?;
        let mut v = Vec::new();
        for var in [
            out.quantiles.lower,
            out.quantiles.median,
            out.quantiles.upper,
            out.mu,
            out.var,
        ] {
            v.extend(tape.value(var).into_data());
        }
        Ok(v)
    }
}

/// Per-category mean of the log targets over the given windows.
pub fn target_level(windows: &[Window], idx: &[usize], n_categories: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_categories];
    let mut count = vec![0usize; n_categories];
    for &i in idx {
        for (k, v) in windows[i].targets.data().iter().enumerate() {
            sum[k % n_categories] += v.ln_1p();
            count[k % n_categories] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}
