//! Text prototypes and multi-head cross-attention that re-expresses patches
//! as mixtures of prototype values.

use rand::Rng;

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::matrix::{dot, softmax_backward_row, softmax_in_place, Matrix, Param, Parameters};

/// `W_E`: `V* × V`, mapping the vocabulary onto `V*` prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrototypeLayer {
    pub w_e: Param,
}

impl TextPrototypeLayer {
    pub fn new<R: Rng + ?Sized>(num_prototypes: usize, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if num_prototypes == 0 || num_prototypes > vocab_size {
            return Err(Error::InvalidConfig(format!(
                "prototype count {num_prototypes} must be in 1..={vocab_size}"
            )));
        }
        let std = 1.0 / (vocab_size as f64).sqrt();
        Ok(TextPrototypeLayer {
            w_e: Param::trainable(Matrix::random_normal(num_prototypes, vocab_size, std, rng)),
        })
    }

    pub fn from_matrix(w_e: Matrix) -> Self {
        TextPrototypeLayer {
            w_e: Param::trainable(w_e),
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.w_e.value().rows()
    }

    /// Accumulates `∂L/∂W_E = ∂L/∂E* · Eᵀ`.
    pub fn backward(&mut self, e: &EmbeddingMatrix, d_e_star: &Matrix) -> Result<()> {
        let g = d_e_star.matmul_nt(e.matrix())?;
        self.w_e.accumulate(&g)
    }
}

/// `E* = W_E · E`.
pub fn text_prototypes(e: &EmbeddingMatrix, layer: &TextPrototypeLayer) -> Result<Matrix> {
    layer.w_e.value().matmul(e.matrix())
}

/// Projection matrices of the reprogramming attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprogramHeads {
    /// `L_p × d_m`
    pub w_q: Param,
    /// `D × d_m`
    pub w_k: Param,
    /// `D × d_m`
    pub w_v: Param,
    /// `d_m × D`
    pub w_o: Param,
    pub n_heads: usize,
}

impl ReprogramHeads {
    /// Gaussian initialisation with std `1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        patch_len: usize,
        llm_dim: usize,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        let init = |r: usize, c: usize, rng: &mut R| Param::trainable(Matrix::random_normal(r, c, 1.0 / (r as f64).sqrt(), rng));
        Ok(ReprogramHeads {
            w_q: init(patch_len, d_model, rng),
            w_k: init(llm_dim, d_model, rng),
            w_v: init(llm_dim, d_model, rng),
            w_o: init(d_model, llm_dim, rng),
            n_heads,
        })
    }

    pub fn from_matrices(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix, n_heads: usize) -> Result<Self> {
        let d_m = w_q.cols();
        if n_heads == 0 || !d_m.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!("d_model {d_m} must be divisible by n_heads {n_heads}")));
        }
        for (name, m, want_rows) in [("w_k", &w_k, w_k.rows()), ("w_v", &w_v, w_k.rows())] {
            if m.cols() != d_m || m.rows() != want_rows {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: m.shape(),
                    right: (want_rows, d_m),
                });
            }
        }
        if w_o.shape() != (d_m, w_k.rows()) {
            return Err(Error::ShapeMismatch {
                op: "w_o",
                left: w_o.shape(),
                right: (d_m, w_k.rows()),
            });
        }
        Ok(ReprogramHeads {
            w_q: Param::trainable(w_q),
            w_k: Param::trainable(w_k),
            w_v: Param::trainable(w_v),
            w_o: Param::trainable(w_o),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.value().cols()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn patch_len(&self) -> usize {
        self.w_q.value().rows()
    }

    pub fn llm_dim(&self) -> usize {
        self.w_k.value().rows()
    }

    /// Keys and values `(E*·W_K, E*·W_V)`.
    pub fn keys_values(&self, e_star: &Matrix) -> Result<PrototypeKv> {
        Ok(PrototypeKv {
            k: e_star.matmul(self.w_k.value())?,
            v: e_star.matmul(self.w_v.value())?,
        })
    }

    /// Accumulates the projection gradients from `dK`, `dV` and returns `∂L/∂E*`.
    pub fn backward_kv(&mut self, e_star: &Matrix, d_kv: &PrototypeKv) -> Result<Matrix> {
        self.w_k.accumulate(&e_star.matmul_tn(&d_kv.k)?)?;
        self.w_v.accumulate(&e_star.matmul_tn(&d_kv.v)?)?;
        let mut d = d_kv.k.matmul_nt(self.w_k.value())?;
        d.add_assign(&d_kv.v.matmul_nt(self.w_v.value())?)?;
        Ok(d)
    }
}

impl Parameters for ReprogramHeads {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("reprogram.w_q", &self.w_q);
        f("reprogram.w_k", &self.w_k);
        f("reprogram.w_v", &self.w_v);
        f("reprogram.w_o", &self.w_o);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("reprogram.w_q", &mut self.w_q);
        f("reprogram.w_k", &mut self.w_k);
        f("reprogram.w_v", &mut self.w_v);
        f("reprogram.w_o", &mut self.w_o);
    }
}

/// Prototype keys and values, each `V* × d_m`. Also used for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeKv {
    pub k: Matrix,
    pub v: Matrix,
}

impl PrototypeKv {
    pub fn zeros_like(&self) -> Self {
        PrototypeKv {
            k: Matrix::zeros(self.k.rows(), self.k.cols()),
            v: Matrix::zeros(self.v.rows(), self.v.cols()),
        }
    }
}

/// `X̂_p = patches · W_Q`.
pub fn embed_patches(patches: &Matrix, heads: &ReprogramHeads) -> Result<Matrix> {
    patches.matmul(heads.w_q.value())
}

/// Multi-head attention of patch queries over prototype keys; returns `Z`.
pub fn reprogram(x_hat: &Matrix, e_star: &Matrix, heads: &ReprogramHeads) -> Result<Matrix> {
    let kv = heads.keys_values(e_star)?;
    Ok(attend(x_hat, &kv, heads.n_heads)?.z)
}

/// `Z · W_O`.
pub fn project_tokens(z: &Matrix, heads: &ReprogramHeads) -> Result<Matrix> {
    z.matmul(heads.w_o.value())
}

/// Output of [`attend`], kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionTape {
    pub z: Matrix,
    /// One `P × V*` probability matrix per head.
    pub probs: Vec<Matrix>,
}

impl AttentionTape {
    /// Head-averaged attention, `P × V*`.
    pub fn mean_probs(&self) -> Matrix {
        let mut out = Matrix::zeros(self.probs[0].rows(), self.probs[0].cols());
        let w = 1.0 / self.probs.len() as f64;
        for p in &self.probs {
            for (o, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *o += w * v;
            }
        }
        out
    }
}

pub fn attend(x_hat: &Matrix, kv: &PrototypeKv, n_heads: usize) -> Result<AttentionTape> {
    let d_m = x_hat.cols();
    if kv.k.cols() != d_m || kv.v.shape() != kv.k.shape() {
        return Err(Error::ShapeMismatch {
            op: "reprogram",
            left: x_hat.shape(),
            right: kv.k.shape(),
        });
    }
    if n_heads == 0 || !d_m.is_multiple_of(n_heads) {
        return Err(Error::InvalidConfig(format!("d_model {d_m} must be divisible by n_heads {n_heads}")));
    }
    let dh = d_m / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (p, n_proto) = (x_hat.rows(), kv.k.rows());
    let mut z = Matrix::zeros(p, d_m);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = Matrix::zeros(p, n_proto);
        for i in 0..p {
            let q = &x_hat.row(i)[cols.clone()];
            let row = a.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q, &kv.k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
            let out = &mut z.row_mut(i)[cols.clone()];
            for (j, &w) in a.row(i).iter().enumerate() {
                for (o, v) in out.iter_mut().zip(&kv.v.row(j)[cols.clone()]) {
                    *o += w * v;
                }
            }
        }
        probs.push(a);
    }
    z.ensure_finite("reprogramming attention")?;
    Ok(AttentionTape { z, probs })
}

/// Backward through [`attend`]: accumulates into `d_kv` and returns `∂L/∂X̂`.
pub fn attend_backward(
    x_hat: &Matrix,
    kv: &PrototypeKv,
    tape: &AttentionTape,
    d_z: &Matrix,
    d_kv: &mut PrototypeKv,
) -> Result<Matrix> {
    let n_heads = tape.probs.len();
    let d_m = x_hat.cols();
    let dh = d_m / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (p, n_proto) = (x_hat.rows(), kv.k.rows());
    let mut d_x = Matrix::zeros(p, d_m);
    let mut d_a = vec![0.0; n_proto];
    let mut d_s = vec![0.0; n_proto];
    for (h, a) in tape.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..p {
            let dz = &d_z.row(i)[cols.clone()];
            for (j, da) in d_a.iter_mut().enumerate() {
                *da = dot(dz, &kv.v.row(j)[cols.clone()]);
                let w = a.get(i, j);
                for (g, d) in d_kv.v.row_mut(j)[cols.clone()].iter_mut().zip(dz) {
                    *g += w * d;
                }
            }
            softmax_backward_row(a.row(i), &d_a, &mut d_s);
            let q = &x_hat.row(i)[cols.clone()];
            for (j, ds) in d_s.iter().enumerate() {
                let s = ds * scale;
                if s == 0.0 {
                    continue;
                }
                for (g, k) in d_x.row_mut(i)[cols.clone()].iter_mut().zip(&kv.k.row(j)[cols.clone()]) {
                    *g += s * k;
                }
                for (g, qv) in d_kv.k.row_mut(j)[cols.clone()].iter_mut().zip(q) {
                    *g += s * qv;
                }
            }
        }
    }
    Ok(d_x)
}
