//! The assembled forecaster: frozen embeddings and decoder, trainable
//! prototypes, reprogramming and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{concat_prefix, DecoderCache, DecoderConfig, ForecastHead, FrozenDecoder};
use crate::embed::{embed_prompt, EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Param, Parameters};
use crate::reprogram::{attend, attend_backward, text_prototypes, PrototypeKv, ReprogramHeads, TextPrototypeLayer};
use crate::series::patch_count;

/// Every dimension of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub vocab_size: usize,
    pub num_prototypes: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub decoder: DecoderConfig,
}

impl ModelDims {
    pub fn llm_dim(&self) -> usize {
        self.decoder.dim
    }

    pub fn num_patches(&self) -> usize {
        patch_count(self.input_len, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_len == 0 || self.horizon == 0 {
            return bad("input_len and horizon must be positive".into());
        }
        if self.patch_len == 0 || self.stride == 0 || self.stride > self.patch_len {
            return bad(format!(
                "need 1 ≤ stride ≤ patch_len, got patch_len {} stride {}",
                self.patch_len, self.stride
            ));
        }
        if self.patch_len > self.input_len {
            return bad(format!("patch_len {} exceeds input_len {}", self.patch_len, self.input_len));
        }
        if self.vocab_size < 2 || self.num_prototypes == 0 || self.num_prototypes > self.vocab_size {
            return bad(format!(
                "need 1 ≤ num_prototypes ≤ vocab_size and vocab_size ≥ 2, got {} and {}",
                self.num_prototypes, self.vocab_size
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        self.decoder.validate()
    }
}

/// Prototypes with their keys and values for the current parameters.
#[derive(Clone, Debug)]
pub struct ProtoState {
    pub e_star: Matrix,
    pub kv: PrototypeKv,
}

/// One training or evaluation example: cached prompt prefix, patches and
/// (scaled) target.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub cache: &'a DecoderCache,
    pub patches: &'a Matrix,
    pub target: &'a [f64],
}

/// All intermediate values of one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub e_star: Matrix,
    pub x_hat: Matrix,
    pub z: Matrix,
    pub patch_emb: Matrix,
    pub r: Matrix,
    pub hidden: Matrix,
    pub y_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PkTimeLlm {
    pub dims: ModelDims,
    pub embedding: EmbeddingMatrix,
    pub prototypes: TextPrototypeLayer,
    pub reprogram: ReprogramHeads,
    pub decoder: FrozenDecoder,
    pub head: ForecastHead,
}

impl PkTimeLlm {
    /// Frozen parts come from `dims.decoder.seed`; trainable parts from `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let embedding = EmbeddingMatrix::random(dims.vocab_size, dims.llm_dim(), dims.decoder.seed ^ 0xE3B0_C442)?;
        let decoder = FrozenDecoder::new(dims.decoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = TextPrototypeLayer::new(dims.num_prototypes, dims.vocab_size, &mut rng)?;
        let reprogram = ReprogramHeads::new(dims.patch_len, dims.llm_dim(), dims.d_model, dims.n_heads, &mut rng)?;
        let head = ForecastHead::new(dims.num_patches(), dims.llm_dim(), dims.horizon, &mut rng)?;
        Ok(PkTimeLlm {
            dims,
            embedding,
            prototypes,
            reprogram,
            decoder,
            head,
        })
    }

    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S], vocab: &Vocabulary) -> Result<Matrix> {
        embed_prompt(tokens, vocab, &self.embedding)
    }

    pub fn prefill(&self, prompt_emb: &Matrix) -> Result<DecoderCache> {
        self.decoder.prefill(prompt_emb)
    }

    pub fn empty_cache(&self) -> DecoderCache {
        DecoderCache::empty(&self.decoder.config)
    }

    pub fn proto_state(&self) -> Result<ProtoState> {
        let e_star = text_prototypes(&self.embedding, &self.prototypes)?;
        let kv = self.reprogram.keys_values(&e_star)?;
        Ok(ProtoState { e_star, kv })
    }

    fn check_patches(&self, patches: &Matrix) -> Result<()> {
        let want = (self.dims.num_patches(), self.dims.patch_len);
        if patches.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "patches",
                left: patches.shape(),
                right: want,
            });
        }
        Ok(())
    }

    /// Materialises every stage, including `R`, and decodes it in full.
    pub fn forward_full(&self, prompt_emb: &Matrix, patches: &Matrix) -> Result<ForwardTrace> {
        self.check_patches(patches)?;
        let state = self.proto_state()?;
        let x_hat = patches.matmul(self.reprogram.w_q.value())?;
        let z = attend(&x_hat, &state.kv, self.reprogram.n_heads)?.z;
        let patch_emb = z.matmul(self.reprogram.w_o.value())?;
        let r = concat_prefix(prompt_emb, &patch_emb)?;
        let (hidden, _) = self.decoder.forward(&self.empty_cache(), &r)?;
        let y_hat = self.head.forward(&hidden)?.into_vec();
        Ok(ForwardTrace {
            e_star: state.e_star,
            x_hat,
            z,
            patch_emb,
            r,
            hidden,
            y_hat,
        })
    }

    /// Forecast (scaled units) and head-averaged reprogramming attention.
    pub fn forecast_with(&self, state: &ProtoState, cache: &DecoderCache, patches: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.check_patches(patches)?;
        let x_hat = patches.matmul(self.reprogram.w_q.value())?;
        let tape = attend(&x_hat, &state.kv, self.reprogram.n_heads)?;
        let patch_emb = tape.z.matmul(self.reprogram.w_o.value())?;
        let (hidden, _) = self.decoder.forward(cache, &patch_emb)?;
        Ok((self.head.forward(&hidden)?.into_vec(), tape.mean_probs()))
    }

    pub fn forecast(&self, cache: &DecoderCache, patches: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forecast_with(&self.proto_state()?, cache, patches)?.0)
    }

    /// Mean squared error over the batch and horizon; gradients are added to
    /// the trainable parameters (callers zero them first).
    pub fn loss_and_grad(&mut self, batch: &[Sample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let h = self.dims.horizon;
        let norm = 1.0 / (batch.len() * h) as f64;
        let state = self.proto_state()?;
        let mut d_kv = state.kv.zeros_like();
        let mut loss = 0.0;
        for s in batch {
            self.check_patches(s.patches)?;
            if s.target.len() != h {
                return Err(Error::ShapeMismatch {
                    op: "target",
                    left: (1, s.target.len()),
                    right: (1, h),
                });
            }
            let x_hat = s.patches.matmul(self.reprogram.w_q.value())?;
            let tape = attend(&x_hat, &state.kv, self.reprogram.n_heads)?;
            let patch_emb = tape.z.matmul(self.reprogram.w_o.value())?;
            let (hidden, dec_tape) = self.decoder.forward(s.cache, &patch_emb)?;
            let y = self.head.forward(&hidden)?;

            let mut d_y = Matrix::zeros(1, h);
            for k in 0..h {
                let e = y.get(0, k) - s.target[k];
                loss += e * e * norm;
                d_y.set(0, k, 2.0 * e * norm);
            }
            let d_hidden = self.head.backward(&hidden, &d_y)?;
            let d_pe = self.decoder.backward(&dec_tape, &d_hidden)?;
            self.reprogram.w_o.accumulate(&tape.z.matmul_tn(&d_pe)?)?;
            let d_z = d_pe.matmul_nt(self.reprogram.w_o.value())?;
            let d_x = attend_backward(&x_hat, &state.kv, &tape, &d_z, &mut d_kv)?;
            self.reprogram.w_q.accumulate(&s.patches.matmul_tn(&d_x)?)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let d_e_star = self.reprogram.backward_kv(&state.e_star, &d_kv)?;
        self.prototypes.backward(&self.embedding, &d_e_star)?;
        Ok(loss)
    }

    /// Loss without gradients.
    pub fn loss(&self, batch: &[Sample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("evaluation batch"));
        }
        let state = self.proto_state()?;
        let mut sum = 0.0;
        for s in batch {
            let (y, _) = self.forecast_with(&state, s.cache, s.patches)?;
            sum += y.iter().zip(s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(sum / (batch.len() * self.dims.horizon) as f64)
    }
}

impl Parameters for PkTimeLlm {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("embedding.e", self.embedding.param());
        f("prototypes.w_e", &self.prototypes.w_e);
        self.reprogram.visit_params(f);
        self.decoder.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("embedding.e", self.embedding.param_mut());
        f("prototypes.w_e", &mut self.prototypes.w_e);
        self.reprogram.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::build_vocab;
    use crate::matrix::grad_check;

    fn dims() -> ModelDims {
        ModelDims {
            input_len: 10,
            horizon: 2,
            patch_len: 4,
            stride: 2,
            vocab_size: 12,
            num_prototypes: 4,
            d_model: 8,
            n_heads: 2,
            decoder: DecoderConfig {
                n_layers: 2,
                dim: 8,
                n_heads: 2,
                ff_dim: 16,
                attn_gain: 1.0,
                seed: 5,
            },
        }
    }

    fn patches(seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(5, 4, 1.0, &mut rng)
    }

    #[test]
    fn cached_forecast_equals_full_forward() {
        let m = PkTimeLlm::new(dims(), 1).unwrap();
        let vocab = build_vocab(&["a b c d e f g h i j k"]).vocab;
        let prompt = m.embed_tokens(&["a", "c", "zzz", "k"], &vocab).unwrap();
        let x = patches(2);
        let full = m.forward_full(&prompt, &x).unwrap();
        assert_eq!(full.r.shape(), (4 + 5, 8));
        let cache = m.prefill(&prompt).unwrap();
        let y = m.forecast(&cache, &x).unwrap();
        for (a, b) in y.iter().zip(&full.y_hat) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = m.forward_full(&Matrix::zeros(0, 8), &x).unwrap();
        assert_eq!(none.r, none.patch_emb);
    }

    #[test]
    fn pipeline_gradient_check() {
        let mut m = PkTimeLlm::new(dims(), 3).unwrap();
        let vocab = build_vocab(&["a b c d e f g h i j k"]).vocab;
        let prompt = m.embed_tokens(&["b", "d", "f"], &vocab).unwrap();
        let cache = m.prefill(&prompt).unwrap();
        let (x1, x2) = (patches(4), patches(5));
        let t1 = [0.5, -0.25];
        let t2 = [1.5, 0.75];
        let report = grad_check(&mut m, 1e-6, |m| {
            m.zero_grads();
            m.loss_and_grad(&[
                Sample {
                    cache: &cache,
                    patches: &x1,
                    target: &t1,
                },
                Sample {
                    cache: &cache,
                    patches: &x2,
                    target: &t2,
                },
            ])
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert_eq!(report.frozen_grad_max, 0.0);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut d = dims();
        d.stride = 5;
        assert!(PkTimeLlm::new(d, 0).is_err());
        let mut d = dims();
        d.num_prototypes = 13;
        assert!(PkTimeLlm::new(d, 0).is_err());
    }
}
