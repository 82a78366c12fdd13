//! Parameter storage and the small layers every stream is assembled from.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        let (idx, prev) = self.params.insert_full(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// A graph with every parameter bound as a leaf.
pub struct Session {
    pub g: Graph,
    params: Vec<Var>,
}

impl Session {
    /// Bind parameters as differentiable leaves.
    pub fn training(store: &ParamStore) -> Self {
        Self::bind(Graph::new(), store)
    }

    /// Bind parameters as constants in a forward-only graph.
    pub fn inference(store: &ParamStore) -> Self {
        Self::bind(Graph::inference(), store)
    }

    fn bind(mut g: Graph, store: &ParamStore) -> Self {
        let training = g.is_training();
        let params = store
            .params
            .values()
            .map(|t| {
                if training {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Session { g, params }
    }

    /// Run `f`; in inference mode only its output is retained on the tape.
    pub fn scoped(&mut self, f: impl FnOnce(&mut Session) -> Var) -> Var {
        let mark = self.g.mark();
        let out = f(self);
        self.g.collapse(mark, out)
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Parameter gradients in registration order (zeros where none flowed).
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.g.shape(v)))
            })
            .collect()
    }
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(d_in)`, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let y = s.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.g.add_bias(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.g.layer_norm(x, LN_EPS);
        let (gamma, beta) = (s.p(self.gamma), s.p(self.beta));
        let n = s.g.mul_bias(n, gamma);
        s.g.add_bias(n, beta)
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.l1.forward(s, x);
        let h = s.g.silu(h);
        self.l2.forward(s, h)
    }
}
