//! Context encoder: embeds visits, static demographics and time-varying
//! externals, fuses them, mixes over the prior graph and along time, and
//! projects to the backbone width.

use serde::{Deserialize, Serialize};

use crate::diff::{DropoutStream, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{node_mix, SpatialNorm};
use crate::nn::{Activation, Bound, Builder, ChannelMlp, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_hid: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub spatial_norm: SpatialNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_hid: 128,
            kernel: 3,
            activation: Activation::Silu,
            spatial_norm: SpatialNorm::SymNormSelfLoop,
        }
    }
}

/// Encoder inputs for a batch. `visits`: `[B, N, T, C]` on the log scale,
/// `demographics`: `[N, d_dem]`, `externals`: `[B, N, T, d_ext]`,
/// `adjacency`: the normalized prior, `[N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct ContextInputs {
    pub visits: Var,
    pub demographics: Var,
    pub externals: Var,
    pub adjacency: Var,
}

/// Intermediate encoder tensors, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub visits: Var,
    pub demographics: Var,
    pub externals: Var,
}

#[derive(Clone, Debug)]
pub struct Stce {
    pub embed_visits: Linear,
    pub embed_demo: Linear,
    pub embed_ext: Linear,
    pub graph_conv: Linear,
    pub depth_kernel: ParamId,
    pub mix_norm: LayerNorm,
    pub mix_mlp: ChannelMlp,
    pub proj: Linear,
    pub proj_norm: LayerNorm,
    pub out: Linear,
    pub activation: Activation,
    pub dropout: f64,
    drop_ids: [u64; 4],
    d_hid: usize,
}

impl Stce {
    pub fn new(
        b: &mut Builder,
        cfg: &EncoderConfig,
        n_categories: usize,
        d_dem: usize,
        d_ext: usize,
        d_model: usize,
        dropout: f64,
    ) -> Self {
        let h = cfg.d_hid;
        b.push("stce");
        let embed_visits = b.linear("embed_visits", n_categories, h);
        let embed_demo = b.linear("embed_demo", d_dem, h);
        let embed_ext = b.linear("embed_ext", d_ext, h);
        let graph_conv = b.linear("graph_conv", h, h);
        let depth_kernel = b.uniform("depth_kernel", &[h, cfg.kernel], cfg.kernel);
        let mix_norm = b.layer_norm("mix_norm", h);
        let mix_mlp = b.mlp("mix_mlp", h, h, 0.0);
        let proj = b.linear("proj", 2 * h, h);
        let proj_norm = b.layer_norm("proj_norm", h);
        let out = b.linear("out", h, d_model);
        b.pop();
        let drop_ids = [b.op_id(), b.op_id(), b.op_id(), b.op_id()];
        Stce {
            embed_visits,
            embed_demo,
            embed_ext,
            graph_conv,
            depth_kernel,
            mix_norm,
            mix_mlp,
            proj,
            proj_norm,
            out,
            activation: cfg.activation,
            dropout,
            drop_ids,
            d_hid: h,
        }
    }

    pub fn embed_inputs(
        &self,
        bp: &Bound,
        inp: &ContextInputs,
        stream: DropoutStream,
    ) -> Result<Embeddings> {
        let tape = bp.tape;
        let embed = |lin: &Linear, x: Var, id: u64| -> Result<Var> {
            let h = lin.forward(bp, x)?;
            let h = self.activation.apply(tape, h)?;
            tape.dropout(h, self.dropout, stream, id)
        };
        let vs = tape.shape(inp.visits);
        let es = tape.shape(inp.externals);
        if vs.len() != 4 || es.len() != 4 || vs[..3] != es[..3] {
            return Err(Error::shape(
                "embed_inputs",
                format!(
                    "visits {:?} and externals {:?} must agree on [B, N, T]",
                    vs, es
                ),
            ));
        }
        Ok(Embeddings {
            visits: embed(&self.embed_visits, inp.visits, self.drop_ids[0])?,
            demographics: embed(&self.embed_demo, inp.demographics, self.drop_ids[1])?,
            externals: embed(&self.embed_ext, inp.externals, self.drop_ids[2])?,
        })
    }

    pub fn spatial_encode(&self, bp: &Bound, x: Var, adjacency: Var) -> Result<Var> {
        let tape = bp.tape;
        let xw = tape.matmul(x, bp.p(self.graph_conv.w))?;
        let mixed = node_mix(tape, adjacency, xw)?;
        let mixed = match self.graph_conv.b {
            Some(b) => tape.add(mixed, bp.p(b))?,
            None => mixed,
        };
        tape.relu(mixed)
    }

    pub fn temporal_mix(&self, bp: &Bound, x: Var) -> Result<Var> {
        let tape = bp.tape;
        let conv = tape.depthwise_conv_time(x, bp.p(self.depth_kernel))?;
        let u = tape.add(conv, x)?;
        let n = self.mix_norm.forward(bp, u)?;
        let m = self.mix_mlp.forward(bp, n, DropoutStream::eval())?;
        tape.add(m, u)
    }

    pub fn project_output(
        &self,
        bp: &Bound,
        x: Var,
        demo: Var,
        stream: DropoutStream,
    ) -> Result<Var> {
        let tape = bp.tape;
        let xs = tape.shape(x);
        let demo = tape.reshape(demo, &[xs[1], 1, self.d_hid])?;
        let demo = tape.expand(demo, &xs)?;
        let cat = tape.concat(&[x, demo])?;
        let z = self.proj.forward(bp, cat)?;
        let z = self.proj_norm.forward(bp, z)?;
        let r = self.out.forward(bp, z)?;
        let r = tape.silu(r)?;
        tape.dropout(r, self.dropout, stream, self.drop_ids[3])
    }

    /// `[B, N, T, C]` visits to `[B, N, T, d_model]` context features.
    pub fn forward(&self, bp: &Bound, inp: &ContextInputs, stream: DropoutStream) -> Result<Var> {
        let e = self.embed_inputs(bp, inp, stream)?;
        let x = fuse_initial(bp.tape, e.visits, e.demographics, e.externals)?;
        let x = self.spatial_encode(bp, x, inp.adjacency)?;
        let x = self.temporal_mix(bp, x)?;
        self.project_output(bp, x, e.demographics, stream)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for lin in [
            &self.embed_visits,
            &self.embed_demo,
            &self.embed_ext,
            &self.graph_conv,
            &self.proj,
            &self.out,
        ] {
            lin.zero(store);
        }
        store.get_mut(self.depth_kernel).data_mut().fill(0.0);
        self.mix_mlp.zero(store);
    }
}

/// `X = H^v + H^d + H^e`, with the static embedding `[N, d]` broadcast over
/// batch and time.
pub fn fuse_initial(tape: &Tape, visits: Var, demo: Var, ext: Var) -> Result<Var> {
    let vs = tape.shape(visits);
    let ds = tape.shape(demo);
    if ds.len() != 2 || vs.len() < 3 || ds[0] != vs[vs.len() - 3] || ds[1] != vs[vs.len() - 1] {
        return Err(Error::shape(
            "fuse_initial",
            format!("static embedding {:?} does not match {:?}", ds, vs),
        ));
    }
    let demo = tape.reshape(demo, &[ds[0], 1, ds[1]])?;
    tape.add(tape.add(visits, demo)?, ext)
}

/// Encoder-free baseline: a single affine map of the visits.
#[derive(Clone, Debug)]
pub struct PlainEmbedding {
    pub lin: Linear,
}

impl PlainEmbedding {
    pub fn new(b: &mut Builder, n_categories: usize, d_model: usize) -> Self {
        PlainEmbedding {
            lin: b.linear("plain_embed", n_categories, d_model),
        }
    }

    pub fn forward(&self, bp: &Bound, visits: Var) -> Result<Var> {
        self.lin.forward(bp, visits)
    }
}
