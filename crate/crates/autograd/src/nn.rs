//! Layers built on the tape. Each layer owns only [`ParamId`]s; values live in
//! a [`ParamStore`] so a model can be frozen or checkpointed as a whole.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Large negative logit for masked keys; `exp` of it underflows to exactly 0.
pub const MASKED_LOGIT: f64 = -1.0e30;

pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[din, dout], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b), din, dout }
    }

    pub fn no_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[din, dout], bound));
        Self { w, b: None, din, dout }
    }

    /// Zero-initialised weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b), din, dout }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(s, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let n = t.layer_norm(x, self.eps);
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(t, s, x);
        let h = t.gelu(h);
        self.fc2.forward(t, s, h)
    }
}

/// Validity pattern for masked self-attention over `n` tokens.
///
/// Queries at valid positions attend only to valid keys. Outputs at invalid
/// query positions are zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    valid: Vec<bool>,
}

impl TokenMask {
    pub fn new(valid: Vec<bool>) -> Self {
        Self { valid }
    }

    pub fn all(n: usize) -> Self {
        Self { valid: vec![true; n] }
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn logit_bias(&self, heads: usize) -> Tensor {
        let n = self.valid.len();
        let mut row = vec![0.0; n];
        for (j, &v) in self.valid.iter().enumerate() {
            if !v {
                row[j] = MASKED_LOGIT;
            }
        }
        let mut data = Vec::with_capacity(heads * n * n);
        for _ in 0..heads * n {
            data.extend_from_slice(&row);
        }
        Tensor::new(&[heads, n, n], data).unwrap()
    }

    fn row_gate(&self, width: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.valid.len() * width);
        for &v in &self.valid {
            data.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width));
        }
        Tensor::new(&[self.valid.len(), width], data).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Self-attention over `x: [n, dim]`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, mask: Option<&TokenMask>) -> Var {
        let n = t.shape(x)[0];
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(t, s, x);
        let qkv = t.reshape(qkv, &[n, 3, h, dh]);
        let qkv = t.permute(qkv, &[1, 2, 0, 3]);
        let q = t.narrow(qkv, 0, 0, 1);
        let q = t.reshape(q, &[h, n, dh]);
        let k = t.narrow(qkv, 0, 1, 1);
        let k = t.reshape(k, &[h, n, dh]);
        let v = t.narrow(qkv, 0, 2, 1);
        let v = t.reshape(v, &[h, n, dh]);
        let kt = t.transpose(k);
        let scores = t.matmul(q, kt);
        let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            assert_eq!(m.len(), n, "mask length");
            let bias = t.constant(m.logit_bias(h));
            scores = t.add(scores, bias);
        }
        let attn = t.softmax(scores);
        let o = t.matmul(attn, v);
        let o = t.permute(o, &[1, 0, 2]);
        let o = t.reshape(o, &[n, self.dim]);
        let o = self.proj.forward(t, s, o);
        match mask {
            Some(m) => t.mul_const(o, m.row_gate(self.dim)),
            None => o,
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, mask: Option<&TokenMask>) -> Var {
        let h = self.ln1.forward(t, s, x);
        let h = self.attn.forward(t, s, h, mask);
        let x = t.add(x, h);
        let h = self.ln2.forward(t, s, x);
        let mut h = self.mlp.forward(t, s, h);
        if let Some(m) = mask {
            let w = t.shape(h)[1];
            h = t.mul_const(h, m.row_gate(w));
        }
        t.add(x, h)
    }
}
