//! Cross-attention pooling of encoder tokens into one CLS token and 64
//! caption tokens.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{AttentionPlan, AttnSegment, Graph, Var};
use crate::error::{Result, SlipError};
use crate::nn::{LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const NUM_CAPTION_TOKENS: usize = 64;
pub const NUM_QUERIES: usize = NUM_CAPTION_TOKENS + 1;

#[derive(Clone, Debug)]
pub struct AttentionPooler {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    /// Add the (tiled) queries to the attention output before normalising.
    pub residual: bool,
}

/// Pooled outputs of a packed batch.
pub struct Pooled {
    /// `batch × hidden`.
    pub cls: Var,
    /// `batch·64 × hidden`, sample-major.
    pub caption_tokens: Var,
}

impl AttentionPooler {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            queries: store.add_randn(format!("{name}.queries"), NUM_QUERIES, dim, 1.0, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, 1.0, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            residual,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.queries];
        p.extend(self.attn.params());
        p.extend(self.norm.params());
        p
    }

    /// `samples` holds `(start_row, num_tokens)` of each sample in `tokens`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, samples: &[(usize, usize)], valid: &[bool]) -> Result<Pooled> {
        for (b, &(s, n)) in samples.iter().enumerate() {
            if !valid[s..s + n].iter().any(|&v| v) {
                return Err(SlipError::Argument(format!(
                    "sample {b} has no valid encoder token to pool"
                )));
            }
        }
        let q = g.param(self.queries);
        let tiled = g.gather_rows(q, (0..samples.len()).flat_map(|_| 0..NUM_QUERIES).collect());
        let segments = samples
            .iter()
            .enumerate()
            .map(|(b, &(s, n))| AttnSegment {
                q_start: b * NUM_QUERIES,
                q_len: NUM_QUERIES,
                k_start: s,
                k_len: n,
            })
            .collect();
        let plan = Rc::new(AttentionPlan {
            segments,
            causal: false,
            key_valid: Some(valid.to_vec()),
            groups: None,
        });
        let mut out = self.attn.apply(g, tiled, tokens, plan, None, None);
        if self.residual {
            out = g.add(out, tiled);
        }
        let out = self.norm.apply(g, out);
        let b = samples.len();
        let cls = g.gather_rows(out, (0..b).map(|i| i * NUM_QUERIES).collect());
        let caption_tokens = g.gather_rows(
            out,
            (0..b)
                .flat_map(|i| (1..NUM_QUERIES).map(move |j| i * NUM_QUERIES + j))
                .collect(),
        );
        Ok(Pooled { cls, caption_tokens })
    }

    /// Pools one sample's encoder output.
    pub fn pool(&self, store: &ParamStore, tokens: &Matrix, valid: &[bool]) -> Result<(Vec<f64>, Matrix)> {
        if valid.len() != tokens.rows() {
            return Err(SlipError::Argument(
                "validity vector length differs from token count".into(),
            ));
        }
        let mut g = Graph::inference(store);
        let x = g.constant(tokens.clone());
        let p = self.forward(&mut g, x, &[(0, tokens.rows())], valid)?;
        Ok((g.value(p.cls).row(0).to_vec(), g.value(p.caption_tokens).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pooler() -> (ParamStore, AttentionPooler) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = AttentionPooler::new(&mut store, "pool", 16, 4, false, &mut rng);
        (store, p)
    }

    #[test]
    fn output_shape_independent_of_length() {
        let (store, p) = pooler();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 7, 700] {
            let x = Matrix::randn(n, 16, 1.0, &mut rng);
            let (cls, cap) = p.pool(&store, &x, &vec![true; n]).unwrap();
            assert_eq!(cls.len(), 16);
            assert_eq!(cap.shape(), (NUM_CAPTION_TOKENS, 16));
        }
    }

    #[test]
    fn no_valid_token_is_error() {
        let (store, p) = pooler();
        assert!(p.pool(&store, &Matrix::zeros(3, 16), &[false; 3]).is_err());
    }
}
