//! Prompt-as-prefix concatenation, the frozen causal decoder and the
//! trainable forecast head.
//!
//! The decoder runs on a suffix of rows given the per-layer keys and values of
//! an already processed prefix. Because attention is causal and prompt rows
//! have no trainable upstream, the prompt prefix can be encoded once per
//! window and only the patch rows need to be re-run during training. Calling
//! [`FrozenDecoder::forward`] with an empty [`DecoderCache`] is the plain full
//! decode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, softmax_backward_row, softmax_in_place, Matrix, Param, Parameters};

const LN_EPS: f64 = 1e-5;

/// `R = [prompt; patches]`.
pub fn concat_prefix(prompt_emb: &Matrix, patch_emb: &Matrix) -> Result<Matrix> {
    if prompt_emb.cols() != patch_emb.cols() {
        return Err(Error::ShapeMismatch {
            op: "concat_prefix",
            left: prompt_emb.shape(),
            right: patch_emb.shape(),
        });
    }
    Matrix::vstack(prompt_emb, patch_emb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Multiplier on the initial query/key projections (sharper attention).
    pub attn_gain: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 2,
            dim: 64,
            n_heads: 4,
            ff_dim: 128,
            attn_gain: 1.0,
            seed: 0x5eed,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("decoder layers, width and ff width must be positive".into()));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "decoder width {} must be divisible by its head count {}",
                self.dim, self.n_heads
            )));
        }
        if !(self.attn_gain.is_finite() && self.attn_gain > 0.0) {
            return Err(Error::InvalidConfig("attn_gain must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Clone, Debug)]
struct LnTape {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn frozen(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::frozen(Matrix::filled(1, dim, 1.0)),
            beta: Param::frozen(Matrix::zeros(1, dim)),
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnTape) {
        let d = x.cols();
        let (g, b) = (self.gamma.value().as_slice(), self.beta.value().as_slice());
        let mut y = Matrix::zeros(x.rows(), d);
        let mut x_hat = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = x_hat.row_mut(i);
            for c in 0..d {
                xh[c] = (row[c] - mean) * inv;
            }
            let yr = y.row_mut(i);
            for c in 0..d {
                yr[c] = g[c] * x_hat.get(i, c) + b[c];
            }
        }
        (y, LnTape { x_hat, inv_std })
    }

    fn backward(&self, tape: &LnTape, d_y: &Matrix) -> Matrix {
        let d = d_y.cols();
        let g = self.gamma.value().as_slice();
        let mut d_x = Matrix::zeros(d_y.rows(), d);
        let mut dxh = vec![0.0; d];
        for i in 0..d_y.rows() {
            let xh = tape.x_hat.row(i);
            for c in 0..d {
                dxh[c] = d_y.get(i, c) * g[c];
            }
            let m1 = dxh.iter().sum::<f64>() / d as f64;
            let m2 = dot(&dxh, xh) / d as f64;
            let inv = tape.inv_std[i];
            let out = d_x.row_mut(i);
            for c in 0..d {
                out[c] = inv * (dxh[c] - m1 - xh[c] * m2);
            }
        }
        d_x
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    pub ln2: LayerNorm,
    pub w_1: Param,
    pub b_1: Param,
    pub w_2: Param,
    pub b_2: Param,
}

#[derive(Clone, Debug)]
struct BlockTape {
    ln1: LnTape,
    q: Matrix,
    keys: Matrix,
    vals: Matrix,
    /// `probs[h][i]` has length `prefix + i + 1`.
    probs: Vec<Vec<Vec<f64>>>,
    ln2: LnTape,
    u: Matrix,
}

/// Per-layer keys and values of an already decoded prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache {
    layers: Vec<(Matrix, Matrix)>,
}

impl DecoderCache {
    pub fn empty(config: &DecoderConfig) -> Self {
        DecoderCache {
            layers: (0..config.n_layers)
                .map(|_| (Matrix::zeros(0, config.dim), Matrix::zeros(0, config.dim)))
                .collect(),
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(|(k, v)| (k.len() + v.len()) * 8).sum()
    }
}

/// Intermediate values of one suffix pass, consumed by [`FrozenDecoder::backward`].
#[derive(Clone, Debug)]
pub struct DecoderTape {
    prefix_len: usize,
    blocks: Vec<BlockTape>,
    ln_f: LnTape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoder {
    pub config: DecoderConfig,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
}

impl FrozenDecoder {
    /// Builds a decoder with every weight frozen, drawn from `config.seed`.
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, ff) = (config.dim, config.ff_dim);
        let w = |r: usize, c: usize, gain: f64, rng: &mut ChaCha8Rng| {
            Param::frozen(Matrix::random_normal(r, c, gain / (r as f64).sqrt(), rng))
        };
        let blocks = (0..config.n_layers)
            .map(|_| DecoderBlock {
                ln1: LayerNorm::frozen(d),
                w_q: w(d, d, config.attn_gain, &mut rng),
                w_k: w(d, d, config.attn_gain, &mut rng),
                w_v: w(d, d, 1.0, &mut rng),
                w_o: w(d, d, 1.0, &mut rng),
                ln2: LayerNorm::frozen(d),
                w_1: w(d, ff, 1.0, &mut rng),
                b_1: Param::frozen(small_bias(ff, &mut rng)),
                w_2: w(ff, d, 1.0, &mut rng),
                b_2: Param::frozen(small_bias(d, &mut rng)),
            })
            .collect();
        Ok(FrozenDecoder {
            config,
            blocks,
            ln_f: LayerNorm::frozen(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Encodes a prefix and keeps only what later suffix passes need.
    pub fn prefill(&self, prefix: &Matrix) -> Result<DecoderCache> {
        let empty = DecoderCache::empty(&self.config);
        if prefix.rows() == 0 {
            return Ok(empty);
        }
        let (_, tape) = self.forward(&empty, prefix)?;
        Ok(DecoderCache {
            layers: tape.blocks.into_iter().map(|b| (b.keys, b.vals)).collect(),
        })
    }

    /// Decodes `x` as the rows following the cached prefix.
    pub fn forward(&self, cache: &DecoderCache, x: &Matrix) -> Result<(Matrix, DecoderTape)> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: x.shape(),
                right: (x.rows(), self.dim()),
            });
        }
        if cache.layers.len() != self.blocks.len() {
            return Err(Error::InvalidData("decoder cache has the wrong layer count".into()));
        }
        let prefix_len = cache.prefix_len();
        let mut h = x.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (l, (block, (pk, pv))) in self.blocks.iter().zip(&cache.layers).enumerate() {
            let (out, tape) = self.block_forward(block, pk, pv, &h)?;
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("decoder layer {l}")));
            }
            h = out;
            tapes.push(tape);
        }
        let (out, ln_f) = self.ln_f.forward(&h);
        if !out.is_finite() {
            return Err(Error::NonFinite("decoder final norm".into()));
        }
        Ok((
            out,
            DecoderTape {
                prefix_len,
                blocks: tapes,
                ln_f,
            },
        ))
    }

    fn block_forward(&self, b: &DecoderBlock, pk: &Matrix, pv: &Matrix, x: &Matrix) -> Result<(Matrix, BlockTape)> {
        let n_heads = self.config.n_heads;
        let dh = self.dim() / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let m = pk.rows();
        let n = x.rows();

        let (h, ln1) = b.ln1.forward(x);
        let q = h.matmul(b.w_q.value())?;
        let keys = Matrix::vstack(pk, &h.matmul(b.w_k.value())?)?;
        let vals = Matrix::vstack(pv, &h.matmul(b.w_v.value())?)?;

        let mut o = Matrix::zeros(n, self.dim());
        let mut probs = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut head_probs = Vec::with_capacity(n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let mut p: Vec<f64> = (0..=m + i).map(|j| dot(qi, &keys.row(j)[cols.clone()]) * scale).collect();
                softmax_in_place(&mut p);
                let out = &mut o.row_mut(i)[cols.clone()];
                for (j, &w) in p.iter().enumerate() {
                    for (ov, vv) in out.iter_mut().zip(&vals.row(j)[cols.clone()]) {
                        *ov += w * vv;
                    }
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }

        let mut x1 = x.clone();
        x1.add_assign(&o.matmul(b.w_o.value())?)?;
        let (h2, ln2) = b.ln2.forward(&x1);
        let mut u = h2.matmul(b.w_1.value())?;
        u.add_row_assign(b.b_1.value())?;
        let g = u.map(gelu);
        let mut y = x1;
        y.add_assign(&g.matmul(b.w_2.value())?)?;
        y.add_row_assign(b.b_2.value())?;
        Ok((
            y,
            BlockTape {
                ln1,
                q,
                keys,
                vals,
                probs,
                ln2,
                u,
            },
        ))
    }

    /// Gradient of the loss with respect to the suffix input, given the
    /// gradient with respect to the suffix output. Decoder weights receive no
    /// gradient.
    pub fn backward(&self, tape: &DecoderTape, d_out: &Matrix) -> Result<Matrix> {
        let mut d = self.ln_f.backward(&tape.ln_f, d_out);
        for (b, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            d = self.block_backward(b, bt, tape.prefix_len, &d)?;
        }
        Ok(d)
    }

    fn block_backward(&self, b: &DecoderBlock, t: &BlockTape, m: usize, d_y: &Matrix) -> Result<Matrix> {
        let n_heads = self.config.n_heads;
        let dh = self.dim() / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = d_y.rows();

        let d_g = d_y.matmul_nt(b.w_2.value())?;
        let mut d_u = d_g;
        for (du, u) in d_u.as_mut_slice().iter_mut().zip(t.u.as_slice()) {
            *du *= gelu_grad(*u);
        }
        let d_h2 = d_u.matmul_nt(b.w_1.value())?;
        let mut d_x1 = d_y.clone();
        d_x1.add_assign(&b.ln2.backward(&t.ln2, &d_h2))?;

        let d_o = d_x1.matmul_nt(b.w_o.value())?;
        let mut d_q = Matrix::zeros(n, self.dim());
        let mut d_k = Matrix::zeros(n, self.dim());
        let mut d_v = Matrix::zeros(n, self.dim());
        let mut d_p = Vec::new();
        let mut d_s = Vec::new();
        for (hd, head_probs) in t.probs.iter().enumerate() {
            let cols = hd * dh..(hd + 1) * dh;
            for (i, p) in head_probs.iter().enumerate() {
                let doi = &d_o.row(i)[cols.clone()];
                d_p.clear();
                d_p.extend((0..p.len()).map(|j| dot(doi, &t.vals.row(j)[cols.clone()])));
                d_s.resize(p.len(), 0.0);
                softmax_backward_row(p, &d_p, &mut d_s);
                let qi = t.q.row(i)[cols.clone()].to_vec();
                for (j, (&s, &w)) in d_s.iter().zip(p).enumerate() {
                    let s = s * scale;
                    for (g, kv) in d_q.row_mut(i)[cols.clone()].iter_mut().zip(&t.keys.row(j)[cols.clone()]) {
                        *g += s * kv;
                    }
                    if j >= m {
                        let r = j - m;
                        for (g, qv) in d_k.row_mut(r)[cols.clone()].iter_mut().zip(&qi) {
                            *g += s * qv;
                        }
                        for (g, dv) in d_v.row_mut(r)[cols.clone()].iter_mut().zip(doi) {
                            *g += w * dv;
                        }
                    }
                }
            }
        }
        let mut d_h = d_q.matmul_nt(b.w_q.value())?;
        d_h.add_assign(&d_k.matmul_nt(b.w_k.value())?)?;
        d_h.add_assign(&d_v.matmul_nt(b.w_v.value())?)?;
        let mut d_x = d_x1;
        d_x.add_assign(&b.ln1.backward(&t.ln1, &d_h))?;
        Ok(d_x)
    }
}

fn small_bias<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(1, n, 0.02, rng)
}

/// Full causal decode of `R` with no cached prefix.
pub fn decode(r: &Matrix, decoder: &FrozenDecoder) -> Result<Matrix> {
    Ok(decoder.forward(&DecoderCache::empty(&decoder.config), r)?.0)
}

impl Parameters for FrozenDecoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, p) in block_params(b) {
                f(&format!("decoder.{l}.{name}"), p);
            }
        }
        f("decoder.ln_f.gamma", &self.ln_f.gamma);
        f("decoder.ln_f.beta", &self.ln_f.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let params: [&mut Param; 12] = [
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.w_1,
                &mut b.b_1,
                &mut b.w_2,
                &mut b.b_2,
            ];
            for (name, p) in BLOCK_PARAM_NAMES.iter().zip(params) {
                f(&format!("decoder.{l}.{name}"), p);
            }
        }
        f("decoder.ln_f.gamma", &mut self.ln_f.gamma);
        f("decoder.ln_f.beta", &mut self.ln_f.beta);
    }
}

const BLOCK_PARAM_NAMES: [&str; 12] = [
    "ln1.gamma", "ln1.beta", "w_q", "w_k", "w_v", "w_o", "ln2.gamma", "ln2.beta", "w_1", "b_1", "w_2", "b_2",
];

fn block_params(b: &DecoderBlock) -> impl Iterator<Item = (&'static str, &Param)> {
    BLOCK_PARAM_NAMES.into_iter().zip([
        &b.ln1.gamma,
        &b.ln1.beta,
        &b.w_q,
        &b.w_k,
        &b.w_v,
        &b.w_o,
        &b.ln2.gamma,
        &b.ln2.beta,
        &b.w_1,
        &b.b_1,
        &b.w_2,
        &b.b_2,
    ])
}

/// `ŷ = flatten(last P rows) · W_H + b_H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastHead {
    /// `(P·D) × H`
    pub w_h: Param,
    /// `1 × H`
    pub b_h: Param,
    pub num_patches: usize,
}

impl ForecastHead {
    pub fn new<R: Rng + ?Sized>(num_patches: usize, dim: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        if num_patches == 0 || dim == 0 || horizon == 0 {
            return Err(Error::InvalidConfig("forecast head dimensions must be positive".into()));
        }
        let fan_in = num_patches * dim;
        Ok(ForecastHead {
            w_h: Param::trainable(Matrix::random_normal(fan_in, horizon, 1.0 / (fan_in as f64).sqrt(), rng)),
            b_h: Param::trainable(Matrix::zeros(1, horizon)),
            num_patches,
        })
    }

    pub fn from_matrices(w_h: Matrix, b_h: Matrix, num_patches: usize) -> Result<Self> {
        if b_h.rows() != 1 || b_h.cols() != w_h.cols() || num_patches == 0 || !w_h.rows().is_multiple_of(num_patches) {
            return Err(Error::ShapeMismatch {
                op: "forecast head",
                left: w_h.shape(),
                right: b_h.shape(),
            });
        }
        Ok(ForecastHead {
            w_h: Param::trainable(w_h),
            b_h: Param::trainable(b_h),
            num_patches,
        })
    }

    pub fn horizon(&self) -> usize {
        self.w_h.value().cols()
    }

    fn flatten_last(&self, hidden: &Matrix) -> Result<Matrix> {
        let p = self.num_patches;
        if hidden.rows() < p || hidden.cols() * p != self.w_h.value().rows() {
            return Err(Error::ShapeMismatch {
                op: "forecast head",
                left: hidden.shape(),
                right: (p, self.w_h.value().rows() / p),
            });
        }
        hidden.slice_rows(hidden.rows() - p, hidden.rows())?.reshape(1, p * hidden.cols())
    }

    /// Returns `1 × H`.
    pub fn forward(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut y = self.flatten_last(hidden)?.matmul(self.w_h.value())?;
        y.add_assign(self.b_h.value())?;
        Ok(y)
    }

    /// Accumulates head gradients and returns `∂L/∂hidden` for the last `P` rows (`P × D`).
    pub fn backward(&mut self, hidden: &Matrix, d_y: &Matrix) -> Result<Matrix> {
        let flat = self.flatten_last(hidden)?;
        self.w_h.accumulate(&flat.matmul_tn(d_y)?)?;
        self.b_h.accumulate(d_y)?;
        d_y.matmul_nt(self.w_h.value())?.reshape(self.num_patches, hidden.cols())
    }
}

impl Parameters for ForecastHead {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("head.w_h", &self.w_h);
        f("head.b_h", &self.b_h);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("head.w_h", &mut self.w_h);
        f("head.b_h", &mut self.b_h);
    }
}
