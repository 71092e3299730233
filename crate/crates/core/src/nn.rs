//! Parameter storage and the small set of layers the model is built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable matrices, in registration order.
///
/// Values are kept exactly representable as `f32` so that checkpoints
/// (stored as float32) reload to bit-identical parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

pub fn round_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        round_f32(&mut value);
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Scalars whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, m)| m.len())
            .sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names.iter().any(|n| n.starts_with(prefix))
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    differentiable: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    /// `differentiable` makes parameters graph leaves; `dropout` > 0 enables
    /// dropout driven by `seed`.
    pub fn new(store: &'a ParamStore, differentiable: bool, dropout: f64, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            differentiable,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0.0, 0)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.differentiable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.g.constant(m)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        if self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let (r, c) = self.g.shape(x);
        let rng = &mut self.rng;
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }

    /// Parameters touched by this pass, with their graph handles.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform(rng, (in_dim, out_dim), bound),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, (1, out_dim), bound)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let y = s.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Linear layers with ReLU (and dropout) between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x);
            if i < last {
                x = s.g.relu(x);
                x = s.dropout(x);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.g.layer_norm(x, Self::EPS);
        let gmm = s.param(self.gamma);
        let bt = s.param(self.beta);
        let y = s.g.mul_row(n, gmm);
        s.g.add_row(y, bt)
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads >= 1 && dim.is_multiple_of(heads),
            "hidden size must divide by heads"
        );
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(
        &self,
        s: &mut Session,
        query: Var,
        memory: Var,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let q = self.wq.forward(s, query);
        let k = self.wk.forward(s, memory);
        let v = self.wv.forward(s, memory);
        let ctx = multi_head(s, q, k, v, self.heads, key_valid);
        self.wo.forward(s, ctx)
    }
}

/// Splits already-projected `q`, `k`, `v` into `heads` column blocks, runs
/// masked softmax attention per block with scale `1/√(dim/heads)`, and
/// concatenates the results.
pub fn multi_head(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Var {
    let dim = s.g.shape(q).1;
    let dv = s.g.shape(v).1;
    let dh = dim / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = s.g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = s.g.slice_cols(v, h * dvh, (h + 1) * dvh);
        let scores = s.g.matmul_t(qh, kh);
        let scores = s.g.scale(scores, scale);
        let attn = s.g.softmax_rows(scores, key_valid);
        outs.push(s.g.matmul(attn, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        s.g.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff: Mlp::new(store, rng, &format!("{name}.ff"), &[dim, ffn, dim]),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: Option<&[bool]>) -> Var {
        let a = self.attn.forward(s, x, x, valid);
        let a = s.dropout(a);
        let x = s.g.add(x, a);
        let x = self.ln1.forward(s, x);
        let f = self.ff.forward(s, x);
        let f = s.dropout(f);
        let x = s.g.add(x, f);
        self.ln2.forward(s, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross_attn: Attention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: Mlp::new(store, rng, &format!("{name}.ff"), &[dim, ffn, dim]),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session,
        tgt: Var,
        memory: Var,
        memory_valid: Option<&[bool]>,
    ) -> Var {
        let a = self.self_attn.forward(s, tgt, tgt, None);
        let a = s.dropout(a);
        let x = s.g.add(tgt, a);
        let x = self.ln1.forward(s, x);
        let c = self.cross_attn.forward(s, x, memory, memory_valid);
        let c = s.dropout(c);
        let x = s.g.add(x, c);
        let x = self.ln2.forward(s, x);
        let f = self.ff.forward(s, x);
        let f = s.dropout(f);
        let x = s.g.add(x, f);
        self.ln3.forward(s, x)
    }
}
