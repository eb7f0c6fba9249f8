//! Transformer over the flattened patch tokens of every channel, with 2D
//! rotary encoding on (channel, patch-time) coordinates.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionPlan, AttnSegment, Graph, Var};
use crate::error::{Result, SlipError};
use crate::nn::{Block, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::rope::rope2d_tables;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Every token attends to every valid token of its sample.
    Full,
    /// Block-diagonal: tokens attend only within their own channel.
    Grouped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub attention_mode: AttentionMode,
    pub rope_base: f64,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            attention_mode: AttentionMode::Full,
            rope_base: 10_000.0,
            max_tokens: 2048,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(SlipError::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if (self.hidden_dim / self.num_heads) % 4 != 0 {
            return Err(SlipError::Config(format!(
                "per-head dim {} must be divisible by 4 for 2D rotary encoding",
                self.hidden_dim / self.num_heads
            )));
        }
        if self.max_tokens == 0 || self.rope_base <= 0.0 {
            return Err(SlipError::Config("max_tokens and rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Tokens of one sample, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Matrix,
    /// `(channel_index, patch_time_index)` per token.
    pub coords: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
}

/// Concatenates per-channel token matrices channel by channel.
pub fn flatten_tokens(per_channel: &[Matrix], patch_valid: &[Vec<bool>]) -> Result<TokenGrid> {
    if per_channel.is_empty() || per_channel.len() != patch_valid.len() {
        return Err(SlipError::Argument(format!(
            "{} token blocks with {} validity vectors",
            per_channel.len(),
            patch_valid.len()
        )));
    }
    let dim = per_channel[0].cols();
    let mut coords = Vec::new();
    let mut valid = Vec::new();
    for (c, (m, v)) in per_channel.iter().zip(patch_valid).enumerate() {
        if m.cols() != dim || m.rows() != v.len() {
            return Err(SlipError::Argument(format!(
                "channel {c} token block has inconsistent shape"
            )));
        }
        coords.extend((0..m.rows()).map(|p| (c, p)));
        valid.extend_from_slice(v);
    }
    let refs: Vec<&Matrix> = per_channel.iter().collect();
    Ok(TokenGrid {
        tokens: Matrix::vstack(&refs),
        coords,
        valid,
    })
}

/// Where each sample's tokens live in a packed batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenLayout {
    /// `(start_row, num_tokens)` per sample.
    pub samples: Vec<(usize, usize)>,
    pub coords: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
}

impl TokenLayout {
    pub fn single(grid: &TokenGrid) -> Self {
        Self {
            samples: vec![(0, grid.coords.len())],
            coords: grid.coords.clone(),
            valid: grid.valid.clone(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.coords.len()
    }

    /// Self-attention plan restricted to valid keys (and same-channel keys in
    /// grouped mode).
    pub fn self_attention_plan(&self, mode: AttentionMode) -> AttentionPlan {
        let segments = self
            .samples
            .iter()
            .map(|&(s, n)| AttnSegment {
                q_start: s,
                q_len: n,
                k_start: s,
                k_len: n,
            })
            .collect();
        let groups = (mode == AttentionMode::Grouped).then(|| {
            let ch: Vec<usize> = self.coords.iter().map(|&(c, _)| c).collect();
            (ch.clone(), ch)
        });
        AttentionPlan {
            segments,
            causal: false,
            key_valid: Some(self.valid.clone()),
            groups,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SensorEncoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl SensorEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{name}.layer{i}"),
                    config.hidden_dim,
                    config.num_heads,
                    config.ffn_dim,
                    false,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), config.hidden_dim);
        Ok(Self {
            config,
            blocks,
            final_norm,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        p.extend(self.final_norm.params());
        p
    }

    /// Encodes a packed batch; invalid tokens come out as zero rows.
    pub fn forward(&self, g: &mut Graph, x: Var, layout: &TokenLayout) -> Result<Var> {
        for &(_, n) in &layout.samples {
            if n > self.config.max_tokens {
                return Err(SlipError::Capacity {
                    what: "sensor tokens",
                    got: n,
                    limit: self.config.max_tokens,
                });
            }
        }
        if g.value(x).rows() != layout.num_tokens() {
            return Err(SlipError::Argument("token matrix and layout disagree".into()));
        }
        let coords: Vec<(i64, i64)> = layout.coords.iter().map(|&(c, p)| (c as i64, p as i64)).collect();
        let tables = Rc::new(rope2d_tables(&coords, self.config.head_dim(), self.config.rope_base)?);
        let plan = Rc::new(layout.self_attention_plan(self.config.attention_mode));
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, plan.clone(), Some(tables.clone()), None);
        }
        let h = self.final_norm.apply(g, h);
        let keep = layout.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Ok(g.row_scale(h, keep))
    }

    pub fn encode(&self, store: &ParamStore, grid: &TokenGrid) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let x = g.constant(grid.tokens.clone());
        let out = self.forward(&mut g, x, &TokenLayout::single(grid))?;
        Ok(g.value(out).clone())
    }
}

/// Mean over valid token rows.
pub fn mean_pool(embeddings: &Matrix, valid: &[bool]) -> Result<Vec<f64>> {
    if valid.len() != embeddings.rows() {
        return Err(SlipError::Argument(
            "validity vector length differs from token count".into(),
        ));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(SlipError::Argument("mean_pool needs at least one valid token".into()));
    }
    let mut out = vec![0.0; embeddings.cols()];
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (o, x) in out.iter_mut().zip(embeddings.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_assigns_channel_major_coords() {
        let blocks = vec![Matrix::zeros(5, 4), Matrix::zeros(5, 4), Matrix::zeros(5, 4)];
        let valid = vec![vec![true; 5], vec![false, true, true, true, true], vec![true; 5]];
        let grid = flatten_tokens(&blocks, &valid).unwrap();
        assert_eq!(grid.tokens.rows(), 15);
        assert_eq!(grid.coords[0], (0, 0));
        assert_eq!(grid.coords[14], (2, 4));
        assert!(!grid.valid[5]);
        let one = flatten_tokens(&blocks[..1], &valid[..1]).unwrap();
        assert!(one.coords.iter().all(|&(c, _)| c == 0));
    }

    #[test]
    fn mean_pool_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![100.0, 100.0]]);
        assert_eq!(mean_pool(&m, &[true, true, false]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(mean_pool(&m, &[false, true, false]).unwrap(), vec![3.0, 6.0]);
        assert!(mean_pool(&m, &[false; 3]).is_err());
    }

    #[test]
    fn config_checks_head_dim() {
        let c = EncoderConfig {
            hidden_dim: 24,
            num_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
