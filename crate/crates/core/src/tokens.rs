use eo1_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geo::{BBox, BinaryMask};

/// A lattice of latent tokens for one modality.
///
/// Storage is token-major: `tokens[(i * w + j) * dim + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenField {
    pub dim: usize,
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<f64>,
    /// Selected tokens (post-erosion for satellites).
    pub valid: BinaryMask,
    /// Posterior mean and log-variance when the field came from a VAE.
    pub mu: Option<Vec<f64>>,
    pub logvar: Option<Vec<f64>>,
    pub bbox: BBox,
    pub time: f64,
}

impl TokenField {
    pub fn new(
        dim: usize,
        h: usize,
        w: usize,
        tokens: Vec<f64>,
        valid: BinaryMask,
        bbox: BBox,
        time: f64,
    ) -> Result<Self> {
        if tokens.len() != dim * h * w {
            return Err(invalid(format!("token buffer {} does not match {dim}x{h}x{w}", tokens.len())));
        }
        if valid.height() != h || valid.width() != w {
            return Err(invalid("validity mask must match the token lattice"));
        }
        Ok(Self { dim, h, w, tokens, valid, mu: None, logvar: None, bbox, time })
    }

    pub fn empty(dim: usize, h: usize, w: usize, bbox: BBox, time: f64) -> Self {
        Self {
            dim,
            h,
            w,
            tokens: vec![0.0; dim * h * w],
            valid: BinaryMask::zeros(h, w),
            mu: None,
            logvar: None,
            bbox,
            time,
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, rows, cols)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.dim, self.h, self.w)
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.tokens[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_valid(&self, k: usize) -> bool {
        self.valid.data()[k] == 1
    }

    pub fn n_valid(&self) -> usize {
        self.valid.count_ones()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.tokens.clone()).expect("token shape")
    }

    /// Channel-major copy, `[dim][h][w]`.
    pub fn channel_major(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; self.tokens.len()];
        for k in 0..n {
            for c in 0..self.dim {
                out[c * n + k] = self.tokens[k * self.dim + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }

    /// Sub-lattice `[r0, r0+h) × [c0, c0+w)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize, bbox: BBox) -> TokenField {
        let mut tokens = Vec::with_capacity(h * w * self.dim);
        for i in 0..h {
            for j in 0..w {
                tokens.extend_from_slice(self.token((r0 + i) * self.w + c0 + j));
            }
        }
        let crop_opt = |v: &Option<Vec<f64>>| {
            v.as_ref().map(|src| {
                let mut out = Vec::with_capacity(h * w * self.dim);
                for i in 0..h {
                    for j in 0..w {
                        let k = (r0 + i) * self.w + c0 + j;
                        out.extend_from_slice(&src[k * self.dim..(k + 1) * self.dim]);
                    }
                }
                out
            })
        };
        TokenField {
            dim: self.dim,
            h,
            w,
            tokens,
            valid: self.valid.crop(r0, c0, h, w),
            mu: crop_opt(&self.mu),
            logvar: crop_opt(&self.logvar),
            bbox,
            time: self.time,
        }
    }
}

/// Patchify `[c][h][w]` into `[(h/p)*(w/p)][c*p*p]`.
pub fn patchify(data: &[f64], c: usize, h: usize, w: usize, p: usize) -> Tensor {
    let t = Tensor::new(&[c, h / p, p, w / p, p], data.to_vec()).expect("patchify shape");
    t.permute(&[1, 3, 0, 2, 4]).reshape(&[(h / p) * (w / p), c * p * p]).expect("patchify reshape")
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Tensor {
    tokens
        .clone()
        .reshape(&[h / p, w / p, c, p, p])
        .expect("unpatchify shape")
        .permute(&[2, 0, 3, 1, 4])
        .reshape(&[c, h, w])
        .expect("unpatchify reshape")
}
