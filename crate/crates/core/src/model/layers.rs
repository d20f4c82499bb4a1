use rand_distr::{Distribution, Normal};

use super::{LayerKind, ModelConfig, ModelError, Stage};
use crate::rng;
use crate::tensornet::{Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with variance 2 / (fan_in + fan_out).
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declares parameters (collecting specs) or resolves them in a store.
pub(crate) struct Binder<'a, T: Real> {
    pub specs: Vec<ParamSpec>,
    store: Option<&'a ParamStore<T>>,
    error: Option<TensorError>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn declare() -> Self {
        Self {
            specs: Vec::new(),
            store: None,
            error: None,
        }
    }

    pub fn bind(store: &'a ParamStore<T>) -> Self {
        Self {
            specs: Vec::new(),
            store: Some(store),
            error: None,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        });
        let Some(store) = self.store else {
            return ParamId(self.specs.len() - 1);
        };
        match store.id(name) {
            Some(id) if store.get(id).shape() == shape => id,
            Some(id) => {
                self.error.get_or_insert(TensorError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    got: store.get(id).shape().to_vec(),
                });
                id
            }
            None => {
                self.error.get_or_insert(TensorError::UnknownParam(name.to_string()));
                ParamId(0)
            }
        }
    }

    pub fn finish(self) -> Result<Vec<ParamSpec>, TensorError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.specs),
        }
    }
}

/// Every parameter of a stage, in declaration order.
pub fn param_specs(cfg: &ModelConfig, stage: Stage) -> Vec<ParamSpec> {
    let mut b = Binder::<f32>::declare();
    super::network::PvuModel::layout(cfg, stage, &mut b);
    b.specs
}

/// Fresh parameters for the specs, deterministic in `seed`.
pub(crate) fn init_store<T: Real>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>, ModelError> {
    let mut store = ParamStore::new();
    for (i, s) in specs.iter().enumerate() {
        let n: usize = s.shape.iter().product();
        let mut r = rng::stream(seed, &[0x1A17, i as u64]);
        let std = match s.init {
            Init::Normal(std) => std,
            Init::Xavier => {
                let fan_out = s.shape[0] as f64;
                let fan_in = s.shape[1..].iter().product::<usize>().max(1) as f64;
                (2.0 / (fan_in + fan_out)).sqrt()
            }
            _ => 0.0,
        };
        let data: Vec<T> = match s.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(_) | Init::Xavier => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::lit(d.sample(&mut r))).collect()
            }
        };
        store.add(&s.name, Tensor::new(&s.shape, data)?)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Binder<T>, name: &str, inp: usize, out: usize, init: Init) -> Self {
        Self {
            w: b.param(&format!("{name}.w"), &[out, inp], init),
            b: b.param(&format!("{name}.b"), &[out], Init::Zeros),
        }
    }

    pub fn fwd<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        g.linear(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(b: &mut Binder<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.param(&format!("{name}.g"), &[dim], Init::Ones),
            beta: b.param(&format!("{name}.b"), &[dim], Init::Zeros),
        }
    }

    pub fn fwd<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let n = g.layer_norm(x, 1e-5)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let s = g.mul_bcast(n, gamma)?;
        g.add_bcast(s, beta)
    }
}

/// Pre-norm transformer block with masked multi-head self-attention.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub kind: LayerKind,
    heads: usize,
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new<T: Real>(b: &mut Binder<T>, name: &str, kind: LayerKind, cfg: &ModelConfig) -> Self {
        let c = cfg.dim;
        let h = c * cfg.mlp_ratio;
        Self {
            kind,
            heads: cfg.heads,
            ln1: Norm::new(b, &format!("{name}.ln1"), c),
            qkv: Linear::new(b, &format!("{name}.attn.qkv"), c, 3 * c, Init::Xavier),
            proj: Linear::new(b, &format!("{name}.attn.proj"), c, c, Init::Xavier),
            ln2: Norm::new(b, &format!("{name}.ln2"), c),
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), c, h, Init::Xavier),
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), h, c, Init::Xavier),
        }
    }

    /// `x, pe: [T, C]`; `mask: [T, T]` additive (0 or -inf).
    pub fn fwd<T: Real>(&self, g: &mut Graph<T>, x: Var, pe: Var, mask: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        let (t, c) = (shape[0], shape[1]);
        let (heads, d) = (self.heads, c / self.heads);
        let x = g.add(x, pe)?;

        let h = self.ln1.fwd(g, x)?;
        let qkv = self.qkv.fwd(g, h)?;
        let qkv = g.reshape(qkv, &[t, 3, heads, d])?;
        let qkv = g.permute(qkv, &[1, 2, 0, 3])?;
        let mut qkv_parts = [x; 3];
        for (i, part) in qkv_parts.iter_mut().enumerate() {
            let s = g.slice(qkv, 0, i, 1)?;
            *part = g.reshape(s, &[heads, t, d])?;
        }
        let [q, k, v] = qkv_parts;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = g.add_bcast(scores, mask)?;
        let attn = g.softmax(scores)?;
        let o = g.bmm(attn, v)?;
        let o = g.permute(o, &[1, 0, 2])?;
        let o = g.reshape(o, &[t, c])?;
        let o = self.proj.fwd(g, o)?;
        let x = g.add(x, o)?;

        let h = self.ln2.fwd(g, x)?;
        let h = self.fc1.fwd(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.fwd(g, h)?;
        g.add(x, h)
    }
}

/// Additive attention mask letting tokens see only their own group.
pub(crate) fn group_mask<T: Real>(groups: &[usize]) -> Tensor<T> {
    let n = groups.len();
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if groups[i] != groups[j] {
                data[i * n + j] = T::neg_infinity();
            }
        }
    }
    Tensor::new(&[n, n], data).expect("square mask")
}

/// Runs a stack of blocks; `frame` and `slot` give each token's groups.
pub(crate) fn run_stack<T: Real>(
    g: &mut Graph<T>,
    blocks: &[Block],
    mut x: Var,
    pe: Var,
    frame: &[usize],
    slot: &[usize],
) -> Result<Var, TensorError> {
    let mut spatial = None;
    let mut temporal = None;
    for b in blocks {
        let mask = match b.kind {
            LayerKind::Spatial => *spatial.get_or_insert_with(|| g.constant(group_mask(frame))),
            LayerKind::Temporal => *temporal.get_or_insert_with(|| g.constant(group_mask(slot))),
        };
        x = b.fwd(g, x, pe, mask)?;
    }
    Ok(x)
}
