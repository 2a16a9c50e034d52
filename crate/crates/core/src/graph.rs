//! Prior spatial graph from node coordinates, and the differentiable
//! adaptive-graph pieces used inside each backbone block.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

/// Negative slope of the attention-score LeakyReLU.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Nodes, their planar coordinates, and the thresholded Gaussian-kernel
/// adjacency (row-major, zero diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_nodes: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub coords: Vec<[f64; 2]>,
    pub adjacency: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `a_ij = exp(-d_ij²/σ²)` for `i ≠ j` when that weight is at least `ε`,
/// otherwise 0.
pub fn build_gaussian_adjacency(
    coords: &[[f64; 2]],
    sigma: f64,
    epsilon: f64,
) -> Result<GraphSpec> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "sigma must be positive, got {}",
            sigma
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!(
            "epsilon must lie in [0, 1], got {}",
            epsilon
        )));
    }
    let n = coords.len();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 nodes, got {}",
            n
        )));
    }
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist(coords[i], coords[j]);
            let w = (-(d * d) / (sigma * sigma)).exp();
            if w >= epsilon {
                adjacency[i * n + j] = w;
            }
        }
    }
    Ok(GraphSpec {
        n_nodes: n,
        sigma,
        epsilon,
        coords: coords.to_vec(),
        adjacency,
    })
}

/// Median pairwise distance, the default kernel bandwidth.
pub fn median_pairwise_distance(coords: &[[f64; 2]]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            d.push(dist(coords[i], coords[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// How the prior adjacency is normalized before message passing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialNorm {
    Raw,
    SymNorm,
    SymNormSelfLoop,
}

impl GraphSpec {
    pub fn adjacency_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_nodes, self.n_nodes], self.adjacency.clone())
            .expect("square adjacency")
    }

    pub fn normalized(&self, norm: SpatialNorm) -> Tensor {
        let n = self.n_nodes;
        let mut a = self.adjacency.clone();
        match norm {
            SpatialNorm::Raw => {}
            SpatialNorm::SymNorm | SpatialNorm::SymNormSelfLoop => {
                if norm == SpatialNorm::SymNormSelfLoop {
                    for i in 0..n {
                        a[i * n + i] += 1.0;
                    }
                }
                sym_normalize_in_place(&mut a, n);
            }
        }
        Tensor::new(&[n, n], a).unwrap()
    }

    /// Relabels nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> GraphSpec {
        let n = self.n_nodes;
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
            }
        }
        GraphSpec {
            n_nodes: n,
            sigma: self.sigma,
            epsilon: self.epsilon,
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            adjacency,
        }
    }
}

/// `D^{-1/2} A D^{-1/2}` with degree 1 substituted for empty rows.
pub fn sym_normalize_in_place(a: &mut [f64], n: usize) {
    let dinv: Vec<f64> = (0..n)
        .map(|i| Unary::RsqrtOrOne.apply(a[i * n..(i + 1) * n].iter().sum()))
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= dinv[i] * dinv[j];
        }
    }
}

// ------------------------------------------------------ adaptive graph ops

/// Mean over the time axis: `[..., N, T, d] -> [..., N, d]`.
pub fn pool_node_embedding(tape: &Tape, x: Var) -> Result<Var> {
    let r = tape.shape(x).len();
    if r < 2 {
        return Err(Error::shape("pool", "need [..., T, d]"));
    }
    tape.mean_axis(x, r - 2)
}

/// Row-stochastic attention affinities over nodes.
///
/// `u`: `[..., N, d]`, `w_u`: `[d, d']`, `a`: `[2d']`. Scores are
/// `LeakyReLU(aᵀ[W_u u_i ‖ W_u u_j])`, normalized by a row softmax.
pub fn adaptive_affinity(tape: &Tape, u: Var, w_u: Var, a: Var) -> Result<Var> {
    let us = tape.shape(u);
    let dp = *tape
        .shape(w_u)
        .last()
        .ok_or_else(|| Error::shape("affinity", "bad W_u"))?;
    if tape.shape(a) != [2 * dp] {
        return Err(Error::shape(
            "affinity",
            format!("attention vector {:?} must be [{}]", tape.shape(a), 2 * dp),
        ));
    }
    let n = us[us.len() - 2];
    let h = tape.matmul(u, w_u)?;
    let a_src = tape.reshape(tape.slice_last(a, 0, dp)?, &[dp, 1])?;
    let a_dst = tape.reshape(tape.slice_last(a, dp, dp)?, &[dp, 1])?;
    let s_src = tape.matmul(h, a_src)?; // [..., N, 1]
    let s_dst = tape.matmul(h, a_dst)?;
    let mut row_shape = us[..us.len() - 2].to_vec();
    row_shape.extend([1, n]);
    let s_dst = tape.reshape(s_dst, &row_shape)?; // [..., 1, N]
    let e = tape.add(s_src, s_dst)?;
    let e = tape.leaky_relu(e, ATTENTION_SLOPE)?;
    tape.softmax(e)
}

/// `A_sym = (α + αᵀ)/2` and `Â = D^{-1/2} A_sym D^{-1/2}`.
pub fn symmetrize_normalize(tape: &Tape, alpha: Var) -> Result<(Var, Var)> {
    let at = tape.transpose_last2(alpha)?;
    let sym = tape.scale(tape.add(alpha, at)?, 0.5)?;
    let shape = tape.shape(sym);
    let r = shape.len();
    let deg = tape.sum_axis(sym, r - 1)?;
    let dinv = tape.unary(deg, Unary::RsqrtOrOne)?;
    let mut col = shape.clone();
    col[r - 1] = 1;
    let mut row = shape.clone();
    row[r - 2] = 1;
    let left = tape.reshape(dinv, &col)?;
    let right = tape.reshape(dinv, &row)?;
    let norm = tape.mul(tape.mul(sym, left)?, right)?;
    Ok((sym, norm))
}

/// `A* = λ A₀ + (1-λ) Â`; without a prior `A* = Â`.
pub fn blend_adjacency(tape: &Tape, prior: Option<Var>, learned: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!(
            "lambda must lie in [0, 1], got {}",
            lambda
        )));
    }
    match prior {
        None => Ok(learned),
        Some(p) => {
            let a = tape.scale(p, lambda)?;
            let b = tape.scale(learned, 1.0 - lambda)?;
            tape.add(a, b)
        }
    }
}

/// All intermediate adjacencies of one adaptive-graph evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LearnedAdjacency {
    pub raw_attention: Var,
    pub symmetric: Var,
    pub normalized: Var,
    pub blended: Var,
    pub lambda: f64,
}

/// Pool, attend, symmetrize, normalize and blend for features `x`:
/// `[..., N, T, d]`.
pub fn learn_adjacency(
    tape: &Tape,
    x: Var,
    w_u: Var,
    a: Var,
    prior: Option<Var>,
    lambda: f64,
) -> Result<LearnedAdjacency> {
    let u = pool_node_embedding(tape, x)?;
    let raw_attention = adaptive_affinity(tape, u, w_u, a)?;
    let (symmetric, normalized) = symmetrize_normalize(tape, raw_attention)?;
    let blended = blend_adjacency(tape, prior, normalized, lambda)?;
    Ok(LearnedAdjacency {
        raw_attention,
        symmetric,
        normalized,
        blended,
        lambda,
    })
}

/// Mixes node features: `out[.., i, t, :] = Σ_j adj[.., i, j] x[.., j, t, :]`.
/// `adj` is `[N, N]` (shared) or `[B, N, N]` for `x: [B, N, T, d]`.
pub fn node_mix(tape: &Tape, adj: Var, x: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let r = xs.len();
    if r < 3 {
        return Err(Error::shape(
            "node_mix",
            format!("need [..., N, T, d], got {:?}", xs),
        ));
    }
    let mut flat = xs[..r - 2].to_vec();
    flat.push(xs[r - 2] * xs[r - 1]);
    let xf = tape.reshape(x, &flat)?;
    let y = tape.matmul(adj, xf)?;
    tape.reshape(y, &xs)
}
