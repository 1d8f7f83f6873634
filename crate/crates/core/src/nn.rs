//! Parameter storage and the small transformer building blocks shared by the
//! encoder, the trajectory planner and the world model.
//!
//! Parameters live in a [`ParamStore`] keyed by unique names. A [`Session`]
//! wraps one forward tape and binds each parameter to at most one leaf, so a
//! parameter reused in several places accumulates a single gradient.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::rng;

pub type ParamId = usize;

pub struct Parameter {
    pub name: String,
    pub value: Arr,
}

/// Owns every trainable array of a model.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.params[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One forward pass: a tape plus lazy parameter bindings.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Bind a parameter as a differentiable leaf (cached per session).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.g.leaf(self.store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Gradients per parameter id after a backward pass. Parameters never
    /// touched by this session are absent.
    pub fn param_grads(&self, grads: &[Option<Arr>]) -> HashMap<ParamId, Arr> {
        let mut out = HashMap::new();
        for (&id, &var) in &self.bound {
            if let Some(g) = self.g.grad_of(grads, var) {
                out.insert(id, g);
            }
        }
        out
    }
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Arr {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut a = Array2::<f64>::zeros((rows, cols));
    for v in a.iter_mut() {
        *v = rng::uniform(rng, -bound, bound);
    }
    a.into_dyn()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Arr {
    let mut a = Array1::<f64>::zeros(len);
    for v in a.iter_mut() {
        *v = rng::standard_normal(rng) * std;
    }
    a.into_dyn()
}

pub fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Arr {
    let mut a = Array2::<f64>::zeros((rows, cols));
    for v in a.iter_mut() {
        *v = rng::standard_normal(rng) * std;
    }
    a.into_dyn()
}

/// Affine map `[n, din] -> [n, dout]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), xavier_uniform(rng, din, dout));
        let b = store.add(
            &format!("{name}.b"),
            Array1::<f64>::zeros(dout).into_dyn(),
        );
        Self { w, b }
    }

    pub fn fwd(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.matmul(x, w);
        s.g.add_bias(y, b)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Array1::<f64>::ones(d).into_dyn());
        let beta = store.add(&format!("{name}.beta"), Array1::<f64>::zeros(d).into_dyn());
        Self { gamma, beta }
    }

    pub fn fwd(&self, s: &mut Session, x: Var) -> Var {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.g.layer_norm_rows(x, g, b, 1e-5)
    }
}

/// Two-layer feed-forward with GELU, hidden width `mult * d`.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Self {
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), din, hidden);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), hidden, dout);
        Self { fc1, fc2 }
    }

    pub fn fwd(&self, s: &mut Session, x: Var) -> Var {
        let h = self.fc1.fwd(s, x);
        let a = s.g.gelu(h);
        self.fc2.fwd(s, a)
    }
}

/// Single-head scaled dot-product attention.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d),
            d,
        }
    }

    /// Attend `queries [n,d]` over `kv [m,d]`; returns the projected output
    /// and the `[n,m]` attention weights.
    pub fn attend(
        &self,
        s: &mut Session,
        queries: Var,
        kv: Var,
        mask: Option<Rc<Array2<bool>>>,
    ) -> (Var, Var) {
        let q = self.wq.fwd(s, queries);
        let k = self.wk.fwd(s, kv);
        let v = self.wv.fwd(s, kv);
        let scores = s.g.matmul_nt(q, k);
        let scaled = s.g.scale(scores, 1.0 / (self.d as f64).sqrt());
        let attn = match mask {
            Some(m) => s.g.masked_softmax_rows(scaled, m),
            None => s.g.softmax_rows(scaled),
        };
        let mixed = s.g.matmul(attn, v);
        (self.wo.fwd(s, mixed), attn)
    }
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + Mlp(LN(x))`.
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, 4 * d, d),
        }
    }

    pub fn fwd(&self, s: &mut Session, x: Var) -> Var {
        let n = self.ln1.fwd(s, x);
        let (a, _) = self.attn.attend(s, n, n, None);
        let x = s.g.add(x, a);
        let n = self.ln2.fwd(s, x);
        let m = self.mlp.fwd(s, n);
        s.g.add(x, m)
    }
}

/// Pre-norm cross-attention block over an external key/value set.
pub struct CrossBlock {
    ln_q: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, 4 * d, d),
        }
    }

    /// Returns the block output and the raw attention weights.
    pub fn fwd(
        &self,
        s: &mut Session,
        x: Var,
        kv: Var,
        mask: Option<Rc<Array2<bool>>>,
    ) -> (Var, Var) {
        let n = self.ln_q.fwd(s, x);
        let (a, attn) = self.attn.attend(s, n, kv, mask);
        let x = s.g.add(x, a);
        let n = self.ln2.fwd(s, x);
        let m = self.mlp.fwd(s, n);
        (s.g.add(x, m), attn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn params_bind_once_per_session() {
        let mut store = ParamStore::new();
        let mut r = rng_from_seed(0);
        let lin = Linear::new(&mut store, &mut r, "l", 4, 4);
        let mut s = Session::new(&store);
        let x = s.g.constant(Array2::<f64>::ones((2, 4)).into_dyn());
        let y1 = lin.fwd(&mut s, x);
        let y2 = lin.fwd(&mut s, y1);
        let loss = s.g.mean_all(y2);
        let grads = s.g.backward(loss);
        let pg = s.param_grads(&grads);
        // both uses of the weight flow into one accumulated gradient
        assert_eq!(pg.len(), 2);
        assert!(pg.contains_key(&lin.w));
        assert!(pg.contains_key(&lin.b));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut r = rng_from_seed(1);
        let attn = Attention::new(&mut store, &mut r, "a", 8);
        let mut s = Session::new(&store);
        let q = s.g.constant(normal_mat(&mut r, 3, 8, 1.0));
        let kv = s.g.constant(normal_mat(&mut r, 5, 8, 1.0));
        let (_, w) = attn.attend(&mut s, q, kv, None);
        let wv = s.g.value(w);
        for i in 0..3 {
            let sum: f64 = (0..5).map(|j| wv[[i, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Array1::<f64>::zeros(1).into_dyn());
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            store.add("x", Array1::<f64>::zeros(1).into_dyn());
        }));
        assert!(result.is_err());
    }
}
