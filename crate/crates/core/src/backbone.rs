//! Multi-scale graph state-space backbone: stacks of blocks that mix over
//! an adaptive node graph, scan along time with a selective state-space
//! recurrence and mix channels, arranged as an encoder/decoder over
//! temporal resolutions with skip fusion.

use serde::{Deserialize, Serialize};

use crate::diff::{softplus, DropoutStream, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{learn_adjacency, node_mix};
use crate::nn::{Bound, Builder, ChannelMlp, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub n_state: usize,
    pub sample_kernel: usize,
    pub lambda: f64,
    /// Hidden width of the channel MLP relative to the block width.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: 2,
            blocks_per_stage: 2,
            n_state: 2,
            sample_kernel: 4,
            lambda: 0.5,
            mlp_ratio: 2,
        }
    }
}

/// Selective diagonal state-space layer on `[..., T, d]`.
#[derive(Clone, Debug)]
pub struct Ssm {
    pub step: Linear,
    pub state_raw: ParamId,
    pub input_map: Linear,
    pub output_map: Linear,
    pub skip: ParamId,
}

impl Ssm {
    pub fn new(b: &mut Builder, d: usize, n_state: usize) -> Self {
        b.push("ssm");
        let step = b.linear("step", d, d);
        // A starts at -(1, 2, ..., n_state) for every channel.
        let raw = Tensor::from_fn(&[d, n_state], |k| {
            let target = (k % n_state + 1) as f64;
            (target.exp() - 1.0).ln()
        });
        let state_raw = b.tensor("state_raw", raw);
        let input_map = b.linear_no_bias("input_map", d, n_state);
        let output_map = b.linear_no_bias("output_map", d, n_state);
        let skip = b.tensor("skip", Tensor::full(&[d], 1.0));
        b.pop();
        Ssm {
            step,
            state_raw,
            input_map,
            output_map,
            skip,
        }
    }

    pub fn forward(&self, bp: &Bound, x: Var) -> Result<Var> {
        let tape = bp.tape;
        let delta = tape.softplus(self.step.forward(bp, x)?)?;
        let a = tape.neg(tape.softplus(bp.p(self.state_raw))?)?;
        let b = self.input_map.forward(bp, x)?;
        let c = self.output_map.forward(bp, x)?;
        tape.selective_scan(x, delta, a, b, c, bp.p(self.skip))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.step.zero(store);
        self.input_map.zero(store);
        self.output_map.zero(store);
        store.get_mut(self.skip).data_mut().fill(0.0);
    }

    /// Current state matrix `A = -softplus(raw)`, `[d, n_state]`.
    pub fn state_matrix(&self, store: &ParamStore) -> Tensor {
        store.get(self.state_raw).map(|v| -softplus(v))
    }
}

/// One block: adaptive-graph spatial mixing, state-space temporal mixing,
/// channel mixing and a normalized residual projection.
#[derive(Clone, Debug)]
pub struct GMambaBlock {
    pub attn_proj: ParamId,
    pub attn_vec: ParamId,
    pub graph_conv: Linear,
    pub ssm: Ssm,
    pub mlp_norm: LayerNorm,
    pub mlp: ChannelMlp,
    pub out: Linear,
    pub out_norm: LayerNorm,
    pub lambda: f64,
    pub graph_mixing: bool,
    pub dropout: f64,
    drop_id: u64,
}

impl GMambaBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        cfg: &BackboneConfig,
        dropout: f64,
        graph_mixing: bool,
    ) -> Self {
        b.push(name);
        let attn_proj = b.uniform("attn_proj", &[d, d], d);
        let attn_vec = b.uniform("attn_vec", &[2 * d], d);
        let graph_conv = b.linear("graph_conv", d, d);
        let ssm = Ssm::new(b, d, cfg.n_state);
        let mlp_norm = b.layer_norm("mlp_norm", d);
        let mlp = b.mlp("mlp", d, cfg.mlp_ratio * d, dropout);
        let out = b.linear("out", d, d);
        let out_norm = b.layer_norm("out_norm", d);
        b.pop();
        let drop_id = b.op_id();
        GMambaBlock {
            attn_proj,
            attn_vec,
            graph_conv,
            ssm,
            mlp_norm,
            mlp,
            out,
            out_norm,
            lambda: cfg.lambda,
            graph_mixing,
            dropout,
            drop_id,
        }
    }

    /// `x`: `[B, N, T, d]`; `prior`: normalized `[N, N]` adjacency.
    pub fn forward(
        &self,
        bp: &Bound,
        x: Var,
        prior: Option<Var>,
        stream: DropoutStream,
    ) -> Result<Var> {
        let tape = bp.tape;
        let g = if self.graph_mixing {
            let adj = learn_adjacency(
                tape,
                x,
                bp.p(self.attn_proj),
                bp.p(self.attn_vec),
                prior,
                self.lambda,
            )?;
            let xw = tape.matmul(x, bp.p(self.graph_conv.w))?;
            let mixed = node_mix(tape, adj.blended, xw)?;
            let mixed = match self.graph_conv.b {
                Some(bias) => tape.add(mixed, bp.p(bias))?,
                None => mixed,
            };
            tape.add(tape.relu(mixed)?, x)?
        } else {
            x
        };
        let t = tape.add(self.ssm.forward(bp, g)?, g)?;
        let m = self
            .mlp
            .forward(bp, self.mlp_norm.forward(bp, t)?, stream)?;
        let c = tape.add(m, t)?;
        let o = self.out_norm.forward(bp, self.out.forward(bp, c)?)?;
        let o = tape.dropout(o, self.dropout, stream, self.drop_id)?;
        tape.add(o, x)
    }

    /// Zeroes every non-residual branch and the output scale.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.attn_proj).data_mut().fill(0.0);
        store.get_mut(self.attn_vec).data_mut().fill(0.0);
        self.graph_conv.zero(store);
        self.ssm.zero(store);
        self.mlp.zero(store);
        self.out.zero(store);
        store.get_mut(self.out_norm.gamma).data_mut().fill(0.0);
        store.get_mut(self.out_norm.beta).data_mut().fill(0.0);
    }
}

/// Strided temporal convolution that halves the length and doubles width.
#[derive(Clone, Debug)]
pub struct DownSample {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DownSample {
    pub fn new(b: &mut Builder, name: &str, d: usize, k: usize) -> Self {
        b.push(name);
        let kernel = b.uniform("kernel", &[k, d, 2 * d], k * d);
        let bias = b.uniform("bias", &[2 * d], k * d);
        b.pop();
        DownSample { kernel, bias }
    }

    pub fn forward(&self, bp: &Bound, x: Var) -> Result<Var> {
        let tape = bp.tape;
        let s = tape.shape(x);
        if s.len() < 2 || s[s.len() - 2] < 2 {
            return Err(Error::Contract(format!(
                "down-sampling needs at least 2 frames, got {:?}",
                s
            )));
        }
        let y = tape.conv_time(x, bp.p(self.kernel), 2)?;
        tape.add(y, bp.p(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.kernel).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Transposed temporal convolution that doubles the length (trimmed or
/// padded to `out_len`) and halves width.
#[derive(Clone, Debug)]
pub struct UpSample {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl UpSample {
    pub fn new(b: &mut Builder, name: &str, d: usize, k: usize) -> Self {
        b.push(name);
        let kernel = b.uniform("kernel", &[k, 2 * d, d], k * d);
        let bias = b.uniform("bias", &[d], k * d);
        b.pop();
        UpSample { kernel, bias }
    }

    pub fn forward(&self, bp: &Bound, x: Var, out_len: usize) -> Result<Var> {
        let tape = bp.tape;
        let y = tape.conv_transpose_time(x, bp.p(self.kernel), 2, out_len)?;
        tape.add(y, bp.p(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.kernel).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Concatenates encoder and decoder features and projects back to width.
pub fn fuse_skip(bp: &Bound, proj: &Linear, enc: Var, dec: Var) -> Result<Var> {
    let tape = bp.tape;
    if tape.shape(enc) != tape.shape(dec) {
        return Err(Error::shape(
            "fuse_skip",
            format!("{:?} vs {:?}", tape.shape(enc), tape.shape(dec)),
        ));
    }
    proj.forward(bp, tape.concat(&[enc, dec])?)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: Vec<Vec<GMambaBlock>>,
    pub down: Vec<DownSample>,
    pub bottleneck: Vec<GMambaBlock>,
    pub up: Vec<UpSample>,
    pub fuse: Vec<Linear>,
    pub decoder: Vec<Vec<GMambaBlock>>,
    pub stages: usize,
}

impl Backbone {
    pub fn new(
        b: &mut Builder,
        cfg: &BackboneConfig,
        d_model: usize,
        dropout: f64,
        graph_mixing: bool,
    ) -> Self {
        let width = |s: usize| d_model << s;
        let stack = |b: &mut Builder, tag: String, d: usize| -> Vec<GMambaBlock> {
            (0..cfg.blocks_per_stage.max(1))
                .map(|i| {
                    GMambaBlock::new(b, &format!("{}.{}", tag, i), d, cfg, dropout, graph_mixing)
                })
                .collect()
        };
        b.push("backbone");
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for s in 0..cfg.stages {
            encoder.push(stack(b, format!("enc{}", s), width(s)));
            down.push(DownSample::new(
                b,
                &format!("down{}", s),
                width(s),
                cfg.sample_kernel,
            ));
        }
        let bottleneck = stack(b, "mid".into(), width(cfg.stages));
        let mut up = vec![None; cfg.stages];
        let mut fuse = vec![None; cfg.stages];
        let mut decoder = vec![Vec::new(); cfg.stages];
        for s in (0..cfg.stages).rev() {
            up[s] = Some(UpSample::new(
                b,
                &format!("up{}", s),
                width(s),
                cfg.sample_kernel,
            ));
            fuse[s] = Some(b.linear(&format!("fuse{}", s), 2 * width(s), width(s)));
            decoder[s] = stack(b, format!("dec{}", s), width(s));
        }
        b.pop();
        Backbone {
            encoder,
            down,
            bottleneck,
            up: up.into_iter().map(Option::unwrap).collect(),
            fuse: fuse.into_iter().map(Option::unwrap).collect(),
            decoder,
            stages: cfg.stages,
        }
    }

    fn run_stack(
        bp: &Bound,
        blocks: &[GMambaBlock],
        x: Var,
        prior: Option<Var>,
        stream: DropoutStream,
    ) -> Result<Var> {
        blocks
            .iter()
            .try_fold(x, |h, blk| blk.forward(bp, h, prior, stream))
    }

    /// `[B, N, T, d_model]` to the finest-scale decoder output of the same
    /// shape. `T` must be divisible by `2^stages`.
    pub fn forward(
        &self,
        bp: &Bound,
        x: Var,
        prior: Option<Var>,
        stream: DropoutStream,
    ) -> Result<Var> {
        Ok(*self.forward_ladder(bp, x, prior, stream)?.last().unwrap())
    }

    /// Every intermediate tensor in order: encoder outputs per scale, the
    /// bottleneck, then decoder outputs from coarse to fine.
    pub fn forward_ladder(
        &self,
        bp: &Bound,
        x: Var,
        prior: Option<Var>,
        stream: DropoutStream,
    ) -> Result<Vec<Var>> {
        let tape = bp.tape;
        let t = tape.shape(x)[2];
        if !t.is_multiple_of(1 << self.stages) {
            return Err(Error::config(
                "window.pad_to",
                format!("input length {} is not divisible by 2^{}", t, self.stages),
            ));
        }
        let mut ladder = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        for s in 0..self.stages {
            let y = Self::run_stack(bp, &self.encoder[s], h, prior, stream)?;
            ladder.push(y);
            skips.push(y);
            h = self.down[s].forward(bp, y)?;
        }
        h = Self::run_stack(bp, &self.bottleneck, h, prior, stream)?;
        ladder.push(h);
        for s in (0..self.stages).rev() {
            let skip = skips[s];
            let len = tape.shape(skip)[2];
            let upd = self.up[s].forward(bp, h, len)?;
            let fused = fuse_skip(bp, &self.fuse[s], skip, upd)?;
            h = Self::run_stack(bp, &self.decoder[s], fused, prior, stream)?;
            ladder.push(h);
        }
        Ok(ladder)
    }

    /// Makes the whole backbone the identity map.
    pub fn zero(&self, store: &mut ParamStore) {
        for blk in self
            .encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .chain(&self.bottleneck)
        {
            blk.zero(store);
        }
        for d in &self.down {
            d.zero(store);
        }
        for u in &self.up {
            u.zero(store);
        }
        // fuse passes the skip branch through
        for f in &self.fuse {
            let w = store.get_mut(f.w);
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            for i in 0..rows {
                for j in 0..cols {
                    w.set(&[i, j], if i == j { 1.0 } else { 0.0 });
                }
            }
            store.get_mut(f.b.unwrap()).data_mut().fill(0.0);
        }
    }
}

/// Flattens time and channels per node and maps to `[B, N, T_out, d_head]`.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub lin: Linear,
    pub t_out: usize,
    pub d_head: usize,
}

impl OutputHead {
    pub fn new(b: &mut Builder, t_in: usize, d_model: usize, t_out: usize, d_head: usize) -> Self {
        OutputHead {
            lin: b.linear("output_head", t_in * d_model, t_out * d_head),
            t_out,
            d_head,
        }
    }

    pub fn forward(&self, bp: &Bound, z: Var) -> Result<Var> {
        let tape = bp.tape;
        let s = tape.shape(z);
        if s.len() != 4 || s[2] * s[3] != self.lin.din {
            return Err(Error::shape(
                "output_head",
                format!("{:?} does not flatten to {}", s, self.lin.din),
            ));
        }
        let flat = tape.reshape(z, &[s[0], s[1], s[2] * s[3]])?;
        let y = self.lin.forward(bp, flat)?;
        tape.reshape(y, &[s[0], s[1], self.t_out, self.d_head])
    }
}

/// Plain-loop selective scan over one sequence, `x`: `[T, d]`, for checks.
#[allow(clippy::too_many_arguments)]
pub fn naive_scan(
    x: &[Vec<f64>],
    delta: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    d: &[f64],
) -> Vec<Vec<f64>> {
    let t_len = x.len();
    let ch = d.len();
    let ns = a[0].len();
    let mut y = vec![vec![0.0; ch]; t_len];
    for t in 0..t_len {
        for k in 0..ch {
            // unrolled: h_t = Σ_{τ≤t} (Π_{τ<r≤t} exp(Δ_r a)) Δ_τ b_τ x_τ
            let mut acc = d[k] * x[t][k];
            for s in 0..ns {
                let mut h = 0.0;
                for tau in 0..=t {
                    let mut decay = 1.0;
                    for r in tau + 1..=t {
                        decay *= (delta[r][k] * a[k][s]).exp();
                    }
                    h += decay * delta[tau][k] * b[tau][s] * x[tau][k];
                }
                acc += c[t][s] * h;
            }
            y[t][k] = acc;
        }
    }
    y
}

/// Check helper exposed for callers that need only shapes.
pub fn ladder_shapes(tape: &Tape, ladder: &[Var]) -> Vec<Vec<usize>> {
    ladder.iter().map(|&v| tape.shape(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let w = *t.shape().last().unwrap();
        t.data().chunks(w).map(<[f64]>::to_vec).collect()
    }

    fn small_cfg(stages: usize) -> BackboneConfig {
        BackboneConfig {
            stages,
            blocks_per_stage: 1,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn ssm_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let ssm = Ssm::new(&mut Builder::new(&mut store, 1), 3, 2);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = tape.value(
            ssm.forward(&bp, tape.constant(Tensor::zeros(&[2, 5, 3])))
                .unwrap(),
        );
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssm_matches_unrolled_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10u64 {
            let mut store = ParamStore::new();
            let ssm = Ssm::new(&mut Builder::new(&mut store, seed), 3, 2);
            let x = rand_t(&mut rng, &[6, 3]);
            let tape = Tape::new();
            let bp = Bound::new(&tape, &store, false);
            let y = tape.value(ssm.forward(&bp, tape.constant(x.clone())).unwrap());

            let xv = tape.constant(x.clone());
            let delta = tape.value(tape.softplus(ssm.step.forward(&bp, xv).unwrap()).unwrap());
            let b = tape.value(ssm.input_map.forward(&bp, xv).unwrap());
            let c = tape.value(ssm.output_map.forward(&bp, xv).unwrap());
            let want = naive_scan(
                &rows(&x),
                &rows(&delta),
                &rows(&ssm.state_matrix(&store)),
                &rows(&b),
                &rows(&c),
                store.get(ssm.skip).data(),
            );
            for (got, w) in y.data().iter().zip(want.concat()) {
                assert!((got - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssm_forgets_history_when_decay_is_extreme() {
        let mut store = ParamStore::new();
        let ssm = Ssm::new(&mut Builder::new(&mut store, 3), 2, 2);
        store.get_mut(ssm.state_raw).data_mut().fill(1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[5, 2]);
        let mut shuffled = x.clone();
        for k in 0..2 {
            let (a, b) = (shuffled.at(&[0, k]), shuffled.at(&[2, k]));
            shuffled.set(&[0, k], b);
            shuffled.set(&[2, k], a);
        }
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y1 = tape.value(ssm.forward(&bp, tape.constant(x)).unwrap());
        let y2 = tape.value(ssm.forward(&bp, tape.constant(shuffled)).unwrap());
        for k in 0..2 {
            assert_eq!(y1.at(&[4, k]), y2.at(&[4, k]));
        }
    }

    #[test]
    fn ssm_states_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10u64 {
            let mut store = ParamStore::new();
            let ssm = Ssm::new(&mut Builder::new(&mut store, seed), 3, 2);
            let x = rand_t(&mut rng, &[40, 3]);
            let tape = Tape::new();
            let bp = Bound::new(&tape, &store, false);
            let xv = tape.constant(x.clone());
            let delta =
                rows(&tape.value(tape.softplus(ssm.step.forward(&bp, xv).unwrap()).unwrap()));
            let b = rows(&tape.value(ssm.input_map.forward(&bp, xv).unwrap()));
            let a = rows(&ssm.state_matrix(&store));
            let xr = rows(&x);
            let (mut drive, mut decay) = (0.0f64, 0.0f64);
            let mut h = [[0.0; 2]; 3];
            let mut hmax = 0.0f64;
            for t in 0..40 {
                for k in 0..3 {
                    for s in 0..2 {
                        let dec = (delta[t][k] * a[k][s]).exp();
                        assert!(dec < 1.0);
                        decay = decay.max(dec);
                        let inp = delta[t][k] * b[t][s] * xr[t][k];
                        drive = drive.max(inp.abs());
                        h[k][s] = dec * h[k][s] + inp;
                        hmax = hmax.max(h[k][s].abs());
                    }
                }
            }
            assert!(hmax.is_finite() && hmax <= drive / (1.0 - decay) + 1e-12);
        }
    }

    fn block_fixture(d: usize, dropout: f64, seed: u64) -> (ParamStore, GMambaBlock) {
        let mut store = ParamStore::new();
        let blk = GMambaBlock::new(
            &mut Builder::new(&mut store, seed),
            "blk",
            d,
            &small_cfg(0),
            dropout,
            true,
        );
        (store, blk)
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut store, blk) = block_fixture(4, 0.3, 1);
        blk.zero(&mut store);
        let x = rand_t(&mut rng, &[2, 3, 4, 4]);
        let prior = Tensor::full(&[3, 3], 0.3);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let p = tape.constant(prior);
        let y = blk
            .forward(
                &bp,
                tape.constant(x.clone()),
                Some(p),
                DropoutStream::train(1, 2, 3),
            )
            .unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn single_node_block_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, blk) = block_fixture(3, 0.0, 2);
        let x = rand_t(&mut rng, &[1, 1, 4, 3]);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let got = tape.value(
            blk.forward(&bp, tape.constant(x.clone()), None, DropoutStream::eval())
                .unwrap(),
        );

        // one node: attention weight 1, normalized adjacency 1, no prior
        let xr = rows(&x);
        let wg = store.get(blk.graph_conv.w);
        let bg = store.get(blk.graph_conv.b.unwrap());
        let g: Vec<Vec<f64>> = xr
            .iter()
            .map(|r| {
                (0..3)
                    .map(|o| {
                        let v: f64 =
                            bg.data()[o] + (0..3).map(|i| r[i] * wg.at(&[i, o])).sum::<f64>();
                        v.max(0.0) + r[o]
                    })
                    .collect()
            })
            .collect();
        let gt = Tensor::new(&[1, 1, 4, 3], g.concat()).unwrap();
        let t2 = Tape::new();
        let bp2 = Bound::new(&t2, &store, false);
        let gv = t2.constant(gt);
        let t = t2.add(blk.ssm.forward(&bp2, gv).unwrap(), gv).unwrap();
        let m = blk
            .mlp
            .forward(
                &bp2,
                blk.mlp_norm.forward(&bp2, t).unwrap(),
                DropoutStream::eval(),
            )
            .unwrap();
        let c = t2.add(m, t).unwrap();
        let o = blk
            .out_norm
            .forward(&bp2, blk.out.forward(&bp2, c).unwrap())
            .unwrap();
        let want = t2.value(t2.add(o, t2.constant(x)).unwrap());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    fn permute_nodes(x: &Tensor, perm: &[usize]) -> Tensor {
        let s = x.shape();
        let inner: usize = s[2..].iter().product();
        let n = s[1];
        Tensor::from_fn(s, |k| {
            let b = k / (n * inner);
            let i = (k / inner) % n;
            x.data()[(b * n + perm[i]) * inner + k % inner]
        })
    }

    #[test]
    fn block_and_backbone_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut Builder::new(&mut store, 3),
            &small_cfg(1),
            3,
            0.2,
            true,
        );
        let x = rand_t(&mut rng, &[2, 4, 4, 3]);
        let prior = Tensor::from_fn(&[4, 4], |k| if k % 5 == 0 { 0.0 } else { 0.25 });
        let perm = [1, 3, 0, 2];
        let pprior = Tensor::from_fn(&[4, 4], |k| prior.at(&[perm[k / 4], perm[k % 4]]));
        let run = |x: &Tensor, p: &Tensor| {
            let tape = Tape::new();
            let bp = Bound::new(&tape, &store, false);
            let pv = tape.constant(p.clone());
            tape.value(
                bb.forward(
                    &bp,
                    tape.constant(x.clone()),
                    Some(pv),
                    DropoutStream::eval(),
                )
                .unwrap(),
            )
        };
        let y = run(&x, &prior);
        let yp = run(&permute_nodes(&x, &perm), &pprior);
        let want = permute_nodes(&y, &perm);
        for (a, b) in yp.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn down_up_shapes_and_stencils() {
        let mut store = ParamStore::new();
        let (down, up) = {
            let mut b = Builder::new(&mut store, 4);
            (
                DownSample::new(&mut b, "down", 1, 4),
                UpSample::new(&mut b, "up", 1, 4),
            )
        };
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let x = Tensor::from_fn(&[1, 1, 8, 1], |i| (i * i) as f64);
        let y = down.forward(&bp, tape.constant(x.clone())).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 4, 2]);
        let z = up.forward(&bp, y, 8).unwrap();
        assert_eq!(tape.shape(z), vec![1, 1, 8, 1]);
        assert!(matches!(
            down.forward(&bp, tape.constant(Tensor::zeros(&[1, 1, 1, 1]))),
            Err(Error::Contract(_))
        ));

        down.zero(&mut store);
        up.zero(&mut store);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = down.forward(&bp, tape.constant(x.clone())).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let z = up
            .forward(&bp, tape.constant(Tensor::full(&[1, 1, 4, 2], 1.0)), 8)
            .unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        // pairwise-mean kernel on the first output channel
        let k = store.get_mut(down.kernel);
        k.set(&[1, 0, 0], 0.5);
        k.set(&[2, 0, 0], 0.5);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = tape.value(down.forward(&bp, tape.constant(x.clone())).unwrap());
        for t in 0..4 {
            let want = 0.5 * (x.data()[2 * t] + x.data()[2 * t + 1]);
            assert_eq!(y.at(&[0, 0, t, 0]), want);
        }
    }

    #[test]
    fn down_then_up_on_delta_matches_stencil() {
        let mut store = ParamStore::new();
        let (down, up) = {
            let mut b = Builder::new(&mut store, 5);
            (
                DownSample::new(&mut b, "down", 1, 4),
                UpSample::new(&mut b, "up", 1, 4),
            )
        };
        store.get_mut(down.bias).data_mut().fill(0.0);
        store.get_mut(up.bias).data_mut().fill(0.0);
        let mut x = Tensor::zeros(&[1, 1, 8, 1]);
        x.set(&[0, 0, 3, 0], 1.0);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let z = tape.value(
            up.forward(&bp, down.forward(&bp, tape.constant(x)).unwrap(), 8)
                .unwrap(),
        );

        let kd = store.get(down.kernel);
        let ku = store.get(up.kernel);
        let mut mid = [[0.0; 2]; 4];
        for (t, row) in mid.iter_mut().enumerate() {
            for k in 0..4 {
                if 2 * t + k == 3 + 1 {
                    for (o, v) in row.iter_mut().enumerate() {
                        *v += kd.at(&[k, 0, o]);
                    }
                }
            }
        }
        let mut want = [0.0; 8];
        for (t, row) in mid.iter().enumerate() {
            for k in 0..4 {
                let pos = 2 * t + k;
                if (1..=8).contains(&pos) {
                    for (i, v) in row.iter().enumerate() {
                        want[pos - 1] += v * ku.at(&[k, i, 0]);
                    }
                }
            }
        }
        for t in 0..8 {
            assert!((z.data()[t] - want[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn fuse_selects_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let proj = Builder::new(&mut store, 0).linear("fuse", 4, 2);
        let e = rand_t(&mut rng, &[1, 2, 3, 2]);
        let d = rand_t(&mut rng, &[1, 2, 3, 2]);
        store.get_mut(proj.b.unwrap()).data_mut().fill(0.0);
        for (sel, want) in [(0usize, &e), (2, &d)] {
            let w = store.get_mut(proj.w);
            w.data_mut().fill(0.0);
            w.set(&[sel, 0], 1.0);
            w.set(&[sel + 1, 1], 1.0);
            let tape = Tape::new();
            let bp = Bound::new(&tape, &store, false);
            let y = fuse_skip(
                &bp,
                &proj,
                tape.constant(e.clone()),
                tape.constant(d.clone()),
            )
            .unwrap();
            assert_eq!(&tape.value(y), want);
        }

        let w = rand_t(&mut rng, &[4, 2]);
        let bias = rand_t(&mut rng, &[2]);
        store.set(proj.w, w.clone()).unwrap();
        store.set(proj.b.unwrap(), bias.clone()).unwrap();
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = tape.value(
            fuse_skip(
                &bp,
                &proj,
                tape.constant(e.clone()),
                tape.constant(d.clone()),
            )
            .unwrap(),
        );
        for r in 0..6 {
            let cat = [
                e.data()[2 * r],
                e.data()[2 * r + 1],
                d.data()[2 * r],
                d.data()[2 * r + 1],
            ];
            for o in 0..2 {
                let want: f64 =
                    bias.data()[o] + (0..4).map(|i| cat[i] * w.at(&[i, o])).sum::<f64>();
                assert!((y.data()[2 * r + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ladder_shapes_for_each_depth() {
        for stages in 0..=2 {
            let mut store = ParamStore::new();
            let bb = Backbone::new(
                &mut Builder::new(&mut store, 1),
                &small_cfg(stages),
                2,
                0.0,
                true,
            );
            let tape = Tape::new();
            let bp = Bound::new(&tape, &store, false);
            let x = tape.constant(Tensor::full(&[1, 3, 8, 2], 0.1));
            let ladder = bb
                .forward_ladder(&bp, x, None, DropoutStream::eval())
                .unwrap();
            let shapes = ladder_shapes(&tape, &ladder);
            let mut want = Vec::new();
            for s in 0..stages {
                want.push(vec![1, 3, 8 >> s, 2 << s]);
            }
            want.push(vec![1, 3, 8 >> stages, 2 << stages]);
            for s in (0..stages).rev() {
                want.push(vec![1, 3, 8 >> s, 2 << s]);
            }
            assert_eq!(shapes, want);
        }
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut Builder::new(&mut store, 1),
            &small_cfg(2),
            2,
            0.0,
            true,
        );
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let x = tape.constant(Tensor::full(&[1, 3, 6, 2], 0.1));
        assert!(matches!(
            bb.forward(&bp, x, None, DropoutStream::eval()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn zeroed_backbone_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut Builder::new(&mut store, 2),
            &BackboneConfig::default(),
            2,
            0.3,
            true,
        );
        bb.zero(&mut store);
        let x = rand_t(&mut rng, &[1, 3, 8, 2]);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let p = tape.constant(Tensor::full(&[3, 3], 0.2));
        let y = bb
            .forward(
                &bp,
                tape.constant(x.clone()),
                Some(p),
                DropoutStream::train(0, 0, 0),
            )
            .unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn backbone_gradients_on_sampled_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut Builder::new(&mut store, 3),
            &small_cfg(1),
            2,
            0.2,
            true,
        );
        let x = rand_t(&mut rng, &[1, 3, 4, 2]);
        let prior = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 0.0 } else { 0.5 });
        let w = rand_t(&mut rng, &[1, 3, 4, 2]);
        let rep = GradCheck::new(1e-5, 1e-4)
            .sampled(0.05, 7)
            .run(
                |tape, vars| {
                    let bp = Bound::from_vars(tape, &store, vars);
                    let p = tape.constant(prior.clone());
                    let y = bb.forward(
                        &bp,
                        tape.constant(x.clone()),
                        Some(p),
                        DropoutStream::train(2, 0, 0),
                    )?;
                    tape.sum_all(tape.mul(y, tape.constant(w.clone()))?)
                },
                store.values(),
            )
            .unwrap();
        assert!(rep.passed, "{:?}", rep.max_rel_err);
    }

    #[test]
    fn head_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut Builder::new(&mut store, 0), 8, 64, 3, 64);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = head
            .forward(&bp, tape.constant(Tensor::zeros(&[1, 2, 8, 64])))
            .unwrap();
        assert_eq!(tape.shape(y), vec![1, 2, 3, 64]);

        let mut store = ParamStore::new();
        let head = OutputHead::new(&mut Builder::new(&mut store, 1), 2, 2, 2, 3);
        let z = rand_t(&mut rng, &[1, 1, 2, 2]);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = tape.value(head.forward(&bp, tape.constant(z.clone())).unwrap());
        let (w, b) = (store.get(head.lin.w), store.get(head.lin.b.unwrap()));
        for o in 0..6 {
            let want: f64 = b.data()[o] + (0..4).map(|i| z.data()[i] * w.at(&[i, o])).sum::<f64>();
            assert!((y.data()[o] - want).abs() < 1e-12);
        }

        head.lin.zero(&mut store);
        let tape = Tape::new();
        let bp = Bound::new(&tape, &store, false);
        let y = tape.value(head.forward(&bp, tape.constant(z)).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
