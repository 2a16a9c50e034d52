//! Raw loops behind the tape ops. Everything here works on flat slices.

use crate::error::{Error, Result};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
pub fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let r = out.len();
    let n: usize = out.iter().product();
    // trailing-block broadcast, e.g. a bias over the last axis
    if inp.len() <= r && out[r - inp.len()..] == *inp {
        let m: usize = inp.iter().product();
        if m > 0 {
            return (0..n).map(|k| k % m).collect();
        }
    }
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for k in (0..inp.len()).rev() {
        let pos = r - inp.len() + k;
        strides[pos] = if inp[k] == 1 && out[pos] != 1 { 0 } else { s };
        s *= inp[k];
    }
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return map;
    }
    if r == 0 {
        map.push(0);
        return map;
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut d = r - 1;
        loop {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] || d == 0 {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
            d -= 1;
        }
    }
    map
}

// ------------------------------------------------------------------ matmul

#[derive(Clone, Copy, Debug)]
pub enum MatLayout {
    /// `[rows, k] @ [k, n]`; `a` may carry any leading axes.
    Rows { rows: usize, k: usize, n: usize },
    /// `[m, k] @ [batch, k, n]`, `a` shared across the batch.
    SharedLeft {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `[batch, m, k] @ [batch, k, n]`.
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

pub fn mat_layout(a: &[usize], b: &[usize]) -> Result<(MatLayout, Vec<usize>)> {
    let bad = || Error::shape("matmul", format!("cannot multiply {:?} by {:?}", a, b));
    if a.is_empty() || b.len() < 2 {
        return Err(bad());
    }
    let (k, n) = (b[b.len() - 2], b[b.len() - 1]);
    if b.len() == 2 {
        if a[a.len() - 1] != k {
            return Err(bad());
        }
        let rows = a[..a.len() - 1].iter().product();
        let mut shape = a[..a.len() - 1].to_vec();
        shape.push(n);
        return Ok((MatLayout::Rows { rows, k, n }, shape));
    }
    let batch_dims = &b[..b.len() - 2];
    let batch: usize = batch_dims.iter().product();
    if a.len() == 2 {
        if a[1] != k {
            return Err(bad());
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([a[0], n]);
        return Ok((
            MatLayout::SharedLeft {
                batch,
                m: a[0],
                k,
                n,
            },
            shape,
        ));
    }
    if a.len() != b.len() || &a[..a.len() - 2] != batch_dims || a[a.len() - 1] != k {
        return Err(bad());
    }
    let m = a[a.len() - 2];
    let mut shape = batch_dims.to_vec();
    shape.extend([m, n]);
    Ok((MatLayout::Batched { batch, m, k, n }, shape))
}

/// out += a(m×k) · b(k×n)
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m×k) += g(m×n) · bᵀ where b is k×n
fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out(k×n) += aᵀ · g where a is m×k, g is m×n
fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn matmul_forward(layout: &MatLayout, a: &[f64], b: &[f64], out: &mut [f64]) {
    match *layout {
        MatLayout::Rows { rows, k, n } => gemm(a, b, out, rows, k, n),
        MatLayout::SharedLeft { batch, m, k, n } => {
            for bi in 0..batch {
                gemm(
                    a,
                    &b[bi * k * n..],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        MatLayout::Batched { batch, m, k, n } => {
            for bi in 0..batch {
                gemm(
                    &a[bi * m * k..],
                    &b[bi * k * n..],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

pub fn matmul_grad_a(layout: &MatLayout, g: &[f64], b: &[f64], ga: &mut [f64]) {
    match *layout {
        MatLayout::Rows { rows, k, n } => gemm_bt(g, b, ga, rows, k, n),
        MatLayout::SharedLeft { batch, m, k, n } => {
            for bi in 0..batch {
                gemm_bt(&g[bi * m * n..], &b[bi * k * n..], ga, m, k, n);
            }
        }
        MatLayout::Batched { batch, m, k, n } => {
            for bi in 0..batch {
                gemm_bt(
                    &g[bi * m * n..],
                    &b[bi * k * n..],
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

pub fn matmul_grad_b(layout: &MatLayout, a: &[f64], g: &[f64], gb: &mut [f64]) {
    match *layout {
        MatLayout::Rows { rows, k, n } => gemm_at(a, g, gb, rows, k, n),
        MatLayout::SharedLeft { batch, m, k, n } => {
            for bi in 0..batch {
                gemm_at(
                    a,
                    &g[bi * m * n..],
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        MatLayout::Batched { batch, m, k, n } => {
            for bi in 0..batch {
                gemm_at(
                    &a[bi * m * k..],
                    &g[bi * m * n..],
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

// ----------------------------------------------------------- time convs

/// `[..., T, C]` viewed as `lead` sequences of `len` frames with `ch` channels.
pub struct TimeGeom {
    pub lead: usize,
    pub len: usize,
    pub ch: usize,
}

impl TimeGeom {
    pub fn of(shape: &[usize], op: &'static str) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape(
                op,
                format!("need [..., T, C], got {:?}", shape),
            ));
        }
        let r = shape.len();
        Ok(TimeGeom {
            lead: shape[..r - 2].iter().product(),
            len: shape[r - 2],
            ch: shape[r - 1],
        })
    }
}

pub fn check_conv_kernel(w: &[usize], din: usize, op: &'static str) -> Result<(usize, usize)> {
    if w.len() != 3 || w[1] != din {
        return Err(Error::shape(
            op,
            format!("kernel {:?} must be [K, {}, Dout]", w, din),
        ));
    }
    Ok((w[0], w[2]))
}

fn tap(t: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (t + k).checked_sub(pad)?;
    (pos < len).then_some(pos)
}

pub fn depthwise_forward(geo: &TimeGeom, kk: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    let pad = (kk - 1) / 2;
    let (len, ch) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        let base = l * len * ch;
        for t in 0..len {
            for k in 0..kk {
                let Some(src) = tap(t, k, pad, len) else {
                    continue;
                };
                for c in 0..ch {
                    out[base + t * ch + c] += w[c * kk + k] * x[base + src * ch + c];
                }
            }
        }
    }
}

pub fn depthwise_backward(
    geo: &TimeGeom,
    kk: usize,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
) {
    let pad = (kk - 1) / 2;
    let (len, ch) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        let base = l * len * ch;
        for t in 0..len {
            for k in 0..kk {
                let Some(src) = tap(t, k, pad, len) else {
                    continue;
                };
                for c in 0..ch {
                    let gv = g[base + t * ch + c];
                    gx[base + src * ch + c] += gv * w[c * kk + k];
                    gw[c * kk + k] += gv * x[base + src * ch + c];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    geo: &TimeGeom,
    kk: usize,
    dout: usize,
    stride: usize,
    out_len: usize,
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
) {
    let pad = kk.saturating_sub(stride) / 2;
    let (len, din) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        for t in 0..out_len {
            let orow = &mut out[(l * out_len + t) * dout..(l * out_len + t + 1) * dout];
            for k in 0..kk {
                let Some(src) = tap(t * stride, k, pad, len) else {
                    continue;
                };
                let xrow = &x[(l * len + src) * din..(l * len + src + 1) * din];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(k * din + i) * dout..(k * din + i + 1) * dout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    geo: &TimeGeom,
    kk: usize,
    dout: usize,
    stride: usize,
    out_len: usize,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
) {
    let pad = kk.saturating_sub(stride) / 2;
    let (len, din) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        for t in 0..out_len {
            let grow = &g[(l * out_len + t) * dout..(l * out_len + t + 1) * dout];
            for k in 0..kk {
                let Some(src) = tap(t * stride, k, pad, len) else {
                    continue;
                };
                let xoff = (l * len + src) * din;
                for i in 0..din {
                    let woff = (k * din + i) * dout;
                    let mut acc = 0.0;
                    let xv = x[xoff + i];
                    for o in 0..dout {
                        acc += grow[o] * w[woff + o];
                        gw[woff + o] += grow[o] * xv;
                    }
                    gx[xoff + i] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t_forward(
    geo: &TimeGeom,
    kk: usize,
    dout: usize,
    stride: usize,
    out_len: usize,
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
) {
    let pad = kk.saturating_sub(stride) / 2;
    let (len, din) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        for t in 0..len {
            let xrow = &x[(l * len + t) * din..(l * len + t + 1) * din];
            for k in 0..kk {
                let Some(dst) = tap(t * stride, k, pad, out_len) else {
                    continue;
                };
                let orow = &mut out[(l * out_len + dst) * dout..(l * out_len + dst + 1) * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(k * din + i) * dout..(k * din + i + 1) * dout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t_backward(
    geo: &TimeGeom,
    kk: usize,
    dout: usize,
    stride: usize,
    out_len: usize,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
) {
    let pad = kk.saturating_sub(stride) / 2;
    let (len, din) = (geo.len, geo.ch);
    for l in 0..geo.lead {
        for t in 0..len {
            let xoff = (l * len + t) * din;
            for k in 0..kk {
                let Some(dst) = tap(t * stride, k, pad, out_len) else {
                    continue;
                };
                let grow = &g[(l * out_len + dst) * dout..(l * out_len + dst + 1) * dout];
                for i in 0..din {
                    let woff = (k * din + i) * dout;
                    let xv = x[xoff + i];
                    let mut acc = 0.0;
                    for o in 0..dout {
                        acc += grow[o] * w[woff + o];
                        gw[woff + o] += grow[o] * xv;
                    }
                    gx[xoff + i] += acc;
                }
            }
        }
    }
}

// ------------------------------------------------------------------- scan

#[allow(clippy::too_many_arguments)]
pub fn scan_forward(
    geo: &TimeGeom,
    ns: usize,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    y: &mut [f64],
    states: &mut [f64],
) {
    let (len, ch) = (geo.len, geo.ch);
    let mut h = vec![0.0; ch * ns];
    for l in 0..geo.lead {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let row = l * len + t;
            let bt = &b[row * ns..(row + 1) * ns];
            let ct = &c[row * ns..(row + 1) * ns];
            for k in 0..ch {
                let xv = x[row * ch + k];
                let dv = delta[row * ch + k];
                let mut acc = d[k] * xv;
                for s in 0..ns {
                    let decay = (dv * a[k * ns + s]).exp();
                    let hv = decay * h[k * ns + s] + dv * bt[s] * xv;
                    h[k * ns + s] = hv;
                    acc += ct[s] * hv;
                }
                y[row * ch + k] = acc;
            }
            states[row * ch * ns..(row + 1) * ch * ns].copy_from_slice(&h);
        }
    }
}

pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub states: &'a [f64],
}

pub struct ScanGrads<'a> {
    pub x: &'a mut [f64],
    pub delta: &'a mut [f64],
    pub a: &'a mut [f64],
    pub b: &'a mut [f64],
    pub c: &'a mut [f64],
    pub d: &'a mut [f64],
}

pub fn scan_backward(geo: &TimeGeom, ns: usize, inp: ScanInputs, gy: &[f64], out: ScanGrads) {
    let (len, ch) = (geo.len, geo.ch);
    // adjoint of h_t carried backwards in time, already multiplied by the
    // next step's decay
    let mut carry = vec![0.0; ch * ns];
    for l in 0..geo.lead {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let row = l * len + t;
            let bt = &inp.b[row * ns..(row + 1) * ns];
            let ct = &inp.c[row * ns..(row + 1) * ns];
            let h_t = &inp.states[row * ch * ns..(row + 1) * ch * ns];
            for k in 0..ch {
                let xv = inp.x[row * ch + k];
                let dv = inp.delta[row * ch + k];
                let g = gy[row * ch + k];
                out.d[k] += g * xv;
                out.x[row * ch + k] += g * inp.d[k];
                for s in 0..ns {
                    let idx = k * ns + s;
                    let gh = g * ct[s] + carry[idx];
                    out.c[row * ns + s] += g * h_t[idx];
                    let h_prev = if t > 0 {
                        inp.states[(row - 1) * ch * ns + idx]
                    } else {
                        0.0
                    };
                    let av = inp.a[idx];
                    let decay = (dv * av).exp();
                    let g_decay = gh * h_prev * decay;
                    out.delta[row * ch + k] += g_decay * av + gh * bt[s] * xv;
                    out.a[idx] += g_decay * dv;
                    out.b[row * ns + s] += gh * dv * xv;
                    out.x[row * ch + k] += gh * dv * bt[s];
                    carry[idx] = gh * decay;
                }
            }
        }
    }
}
