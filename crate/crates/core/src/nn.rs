//! Named parameter storage and the small layer types shared by the encoder,
//! backbone and heads.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DropoutStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of learnable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {}",
            name
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param",
                format!(
                    "{} expects {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Parameters bound as tape leaves for one forward pass. Leaves are
/// registered lazily so unused parameters never touch the tape.
pub struct Bound<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    vars: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Bound {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    /// Binds already-registered leaves, one per parameter in store order.
    pub fn from_vars(tape: &'a Tape, store: &'a ParamStore, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one leaf per parameter");
        Bound {
            tape,
            store,
            vars: RefCell::new(vars.iter().map(|&v| Some(v)).collect()),
            trainable: true,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0]
            .get_or_insert_with(|| self.tape.leaf(self.store.get(id).clone(), self.trainable))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients aligned with the store; zeros for parameters not reached.
    pub fn grads(&self) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .values()
            .iter()
            .zip(vars.iter())
            .map(|(v, var)| {
                var.and_then(|var| self.tape.grad(var))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }
}

/// Pointwise nonlinearity choice for embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Creates parameters under a name prefix with seeded uniform init and
/// hands out dropout op ids.
pub struct Builder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    next_op: u64,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            next_op: 1,
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn op_id(&mut self) -> u64 {
        self.next_op += 1;
        self.next_op
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.tensor(name, t)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        self.push(name);
        let w = self.uniform("w", &[din, dout], din);
        let b = self.uniform("b", &[dout], din);
        self.pop();
        Linear {
            w,
            b: Some(b),
            din,
            dout,
        }
    }

    pub fn linear_no_bias(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        self.push(name);
        let w = self.uniform("w", &[din, dout], din);
        self.pop();
        Linear {
            w,
            b: None,
            din,
            dout,
        }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNorm {
        self.push(name);
        let gamma = self.tensor("gamma", Tensor::full(&[width], 1.0));
        let beta = self.tensor("beta", Tensor::zeros(&[width]));
        self.pop();
        LayerNorm { gamma, beta }
    }

    pub fn mlp(&mut self, name: &str, width: usize, hidden: usize, dropout: f64) -> ChannelMlp {
        self.push(name);
        let fc1 = self.linear("fc1", width, hidden);
        let fc2 = self.linear("fc2", hidden, width);
        self.pop();
        let op_id = self.op_id();
        ChannelMlp {
            fc1,
            fc2,
            dropout,
            op_id,
        }
    }
}

/// Affine map on the last axis: `x @ w + b`, `w: [din, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward(&self, bp: &Bound, x: Var) -> Result<Var> {
        let y = bp.tape.matmul(x, bp.p(self.w))?;
        match self.b {
            Some(b) => bp.tape.add(y, bp.p(b)),
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward(&self, bp: &Bound, x: Var) -> Result<Var> {
        bp.tape
            .layer_norm(x, bp.p(self.gamma), bp.p(self.beta), LN_EPS)
    }
}

/// Two affine maps with SiLU between, applied on the channel axis.
#[derive(Clone, Debug)]
pub struct ChannelMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
    pub op_id: u64,
}

impl ChannelMlp {
    pub fn forward(&self, bp: &Bound, x: Var, stream: DropoutStream) -> Result<Var> {
        let h = self.fc1.forward(bp, x)?;
        let h = bp.tape.silu(h)?;
        let h = bp.tape.dropout(h, self.dropout, stream, self.op_id)?;
        self.fc2.forward(bp, h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.fc1.zero(store);
        self.fc2.zero(store);
    }
}
