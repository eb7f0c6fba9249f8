//! Byte tokenizer, causal text encoder, and a decoder with cross-attention
//! over the pooled caption tokens.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionPlan, AttnSegment, Graph, Var};
use crate::error::{Result, SlipError};
use crate::nn::{Block, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::pooler::NUM_CAPTION_TOKENS;
use crate::rope::rope1d_tables;
use crate::tensor::Matrix;

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// `[BOS] + bytes + [EOS]`, cut to `max_len` tokens with the EOS kept.
pub fn tokenize(text: &str, max_len: usize) -> Vec<usize> {
    let keep = text.len().min(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend(text.as_bytes()[..keep].iter().map(|&b| b as usize));
    ids.push(EOS);
    ids
}

/// Drops special tokens and decodes the remaining bytes (lossily if a
/// truncation split a multi-byte character).
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextStackConfig {
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Only the last this-many encoder layers receive gradients.
    pub unfrozen_encoder_layers: usize,
    pub freeze_all_encoder: bool,
    pub max_text_len: usize,
    pub rope_base: f64,
    /// Reuse the decoder token embedding as the output projection.
    pub tied_output: bool,
}

impl Default for TextStackConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 4,
            decoder_depth: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            unfrozen_encoder_layers: 4,
            freeze_all_encoder: false,
            max_text_len: 512,
            rope_base: 10_000.0,
            tied_output: false,
        }
    }
}

impl TextStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 || (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(SlipError::Config(format!(
                "text hidden_dim {} must split into {} heads of even size",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.unfrozen_encoder_layers > self.encoder_depth {
            return Err(SlipError::Config(format!(
                "unfrozen_encoder_layers {} exceeds encoder_depth {}",
                self.unfrozen_encoder_layers, self.encoder_depth
            )));
        }
        if self.max_text_len < 2 {
            return Err(SlipError::Config("max_text_len must be at least 2".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Packed token sequences: sample `b` occupies rows `start..start+len`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub samples: Vec<(usize, usize)>,
}

impl TextBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let mut batch = Self::default();
        for s in seqs {
            batch.samples.push((batch.ids.len(), s.len()));
            batch.ids.extend_from_slice(s);
        }
        batch
    }

    fn positions(&self) -> Vec<usize> {
        self.samples.iter().flat_map(|&(_, n)| 0..n).collect()
    }

    fn causal_plan(&self) -> AttentionPlan {
        AttentionPlan {
            segments: self
                .samples
                .iter()
                .map(|&(s, n)| AttnSegment {
                    q_start: s,
                    q_len: n,
                    k_start: s,
                    k_len: n,
                })
                .collect(),
            causal: true,
            key_valid: Some(self.ids.iter().map(|&i| i != PAD).collect()),
            groups: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    /// `None` when the output projection is tied to `embedding`.
    pub output_w: Option<ParamId>,
    pub output_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextStack {
    pub config: TextStackConfig,
    pub encoder: TextEncoder,
    pub decoder: TextDecoder,
}

impl TextStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: TextStackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let encoder = TextEncoder {
            embedding: store.add_randn(format!("{name}.encoder.embedding"), VOCAB_SIZE, d, emb_std, rng),
            blocks: (0..config.encoder_depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("{name}.encoder.layer{i}"),
                        d,
                        config.num_heads,
                        config.ffn_dim,
                        false,
                        config.encoder_depth,
                        rng,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{name}.encoder.final_norm"), d),
        };
        let decoder = TextDecoder {
            embedding: store.add_randn(format!("{name}.decoder.embedding"), VOCAB_SIZE, d, emb_std, rng),
            blocks: (0..config.decoder_depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("{name}.decoder.layer{i}"),
                        d,
                        config.num_heads,
                        config.ffn_dim,
                        true,
                        config.decoder_depth,
                        rng,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{name}.decoder.final_norm"), d),
            output_w: (!config.tied_output)
                .then(|| store.add_randn(format!("{name}.decoder.output.w"), VOCAB_SIZE, d, emb_std, rng)),
            output_b: store.add_zeros(format!("{name}.decoder.output.b"), 1, VOCAB_SIZE),
        };
        let stack = Self {
            config,
            encoder,
            decoder,
        };
        stack.apply_freezing(store);
        Ok(stack)
    }

    /// Number of encoder layers (counted from the top) that train.
    pub fn trainable_encoder_layers(&self) -> usize {
        if self.config.freeze_all_encoder {
            0
        } else {
            self.config.unfrozen_encoder_layers
        }
    }

    /// Marks frozen text-encoder parameters as non-trainable. The embedding
    /// trains only when every layer does; the final norm whenever any does.
    pub fn apply_freezing(&self, store: &mut ParamStore) {
        let depth = self.config.encoder_depth;
        let k = self.trainable_encoder_layers();
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            for id in block.params() {
                store.set_trainable(id, i >= depth - k);
            }
        }
        store.set_trainable(self.encoder.embedding, k == depth);
        for id in self.encoder.final_norm.params() {
            store.set_trainable(id, k > 0);
        }
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.encoder.embedding];
        p.extend(self.encoder.blocks.iter().flat_map(Block::params));
        p.extend(self.encoder.final_norm.params());
        p
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.decoder.embedding];
        p.extend(self.decoder.blocks.iter().flat_map(Block::params));
        p.extend(self.decoder.final_norm.params());
        p.extend(self.decoder.output_w);
        p.push(self.decoder.output_b);
        p
    }

    fn check_lengths(&self, batch: &TextBatch) -> Result<()> {
        for &(_, n) in &batch.samples {
            if n > self.config.max_text_len {
                return Err(SlipError::Capacity {
                    what: "text tokens",
                    got: n,
                    limit: self.config.max_text_len,
                });
            }
        }
        Ok(())
    }

    /// Token states of every sequence and their mean over non-pad tokens.
    pub fn encode_forward(&self, g: &mut Graph, batch: &TextBatch) -> Result<(Var, Var)> {
        self.check_lengths(batch)?;
        let emb = g.param(self.encoder.embedding);
        let mut x = g.gather_rows(emb, batch.ids.clone());
        let tables = Rc::new(rope1d_tables(
            &batch.positions(),
            self.config.head_dim(),
            self.config.rope_base,
        )?);
        let plan = Rc::new(batch.causal_plan());
        for block in &self.encoder.blocks {
            x = block.forward(g, x, plan.clone(), Some(tables.clone()), None);
        }
        let states = self.encoder.final_norm.apply(g, x);
        for (b, &(s, n)) in batch.samples.iter().enumerate() {
            if !batch.ids[s..s + n].iter().any(|&i| i != PAD) {
                return Err(SlipError::Argument(format!("text sample {b} has only padding")));
            }
        }
        let weights = batch.ids.iter().map(|&i| if i == PAD { 0.0 } else { 1.0 }).collect();
        let global = g.segment_mean(states, batch.samples.clone(), Some(weights));
        Ok((states, global))
    }

    /// Single-sequence text encoding: `(token_states, global_embedding)`.
    pub fn encode_text(&self, store: &ParamStore, ids: &[usize]) -> Result<(Matrix, Vec<f64>)> {
        let mut g = Graph::inference(store);
        let batch = TextBatch::from_sequences(&[ids.to_vec()]);
        let (states, global) = self.encode_forward(&mut g, &batch)?;
        Ok((g.value(states).clone(), g.value(global).row(0).to_vec()))
    }

    /// Decoder logits for packed inputs; `memory` stacks 64 caption tokens per
    /// sample. With `use_cross = false` the cross-attention sublayers are skipped.
    pub fn decode_forward(&self, g: &mut Graph, batch: &TextBatch, memory: Var, use_cross: bool) -> Result<Var> {
        self.check_lengths(batch)?;
        if g.value(memory).rows() != NUM_CAPTION_TOKENS * batch.samples.len() {
            return Err(SlipError::Argument(format!(
                "decoder memory has {} rows for {} samples",
                g.value(memory).rows(),
                batch.samples.len()
            )));
        }
        let emb = g.param(self.decoder.embedding);
        let mut x = g.gather_rows(emb, batch.ids.clone());
        let tables = Rc::new(rope1d_tables(
            &batch.positions(),
            self.config.head_dim(),
            self.config.rope_base,
        )?);
        let plan = Rc::new(batch.causal_plan());
        let cross_plan = Rc::new(AttentionPlan::new(
            batch
                .samples
                .iter()
                .enumerate()
                .map(|(b, &(s, n))| AttnSegment {
                    q_start: s,
                    q_len: n,
                    k_start: b * NUM_CAPTION_TOKENS,
                    k_len: NUM_CAPTION_TOKENS,
                })
                .collect(),
        ));
        for block in &self.decoder.blocks {
            let cross = use_cross.then(|| (memory, cross_plan.clone()));
            x = block.forward(g, x, plan.clone(), Some(tables.clone()), cross);
        }
        let h = self.decoder.final_norm.apply(g, x);
        Ok(self.output_logits(g, h))
    }

    fn output_logits(&self, g: &mut Graph, h: Var) -> Var {
        let w = g.param(self.decoder.output_w.unwrap_or(self.decoder.embedding));
        let b = g.param(self.decoder.output_b);
        g.linear(h, w, Some(b))
    }

    /// Logits (`len × 259`) of one sequence given its 64 caption tokens.
    pub fn decode(&self, store: &ParamStore, ids: &[usize], caption_tokens: &Matrix) -> Result<Matrix> {
        self.decode_with(store, ids, caption_tokens, true)
    }

    pub fn decode_with(
        &self,
        store: &ParamStore,
        ids: &[usize],
        caption_tokens: &Matrix,
        use_cross: bool,
    ) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let memory = g.constant(caption_tokens.clone());
        let batch = TextBatch::from_sequences(&[ids.to_vec()]);
        let out = self.decode_forward(&mut g, &batch, memory, use_cross)?;
        Ok(g.value(out).clone())
    }

    /// Prepares an incremental decoding stream conditioned on `caption_tokens`.
    pub fn start_decoding(&self, store: &ParamStore, caption_tokens: &Matrix) -> Result<DecoderState> {
        if caption_tokens.rows() != NUM_CAPTION_TOKENS || caption_tokens.cols() != self.config.hidden_dim {
            return Err(SlipError::Argument(format!(
                "caption tokens must be {NUM_CAPTION_TOKENS} x {}",
                self.config.hidden_dim
            )));
        }
        let mut g = Graph::inference(store);
        let mem = g.constant(caption_tokens.clone());
        let mut cross = Vec::with_capacity(self.decoder.blocks.len());
        for block in &self.decoder.blocks {
            let (_, attn) = block.cross.as_ref().expect("decoder blocks carry cross-attention");
            let k = attn.wk.apply(&mut g, mem);
            let v = attn.wv.apply(&mut g, mem);
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        let d = self.config.hidden_dim;
        Ok(DecoderState {
            self_kv: vec![(Matrix::zeros(0, d), Matrix::zeros(0, d)); self.decoder.blocks.len()],
            cross_kv: cross,
            position: 0,
        })
    }

    /// Feeds one token and returns the next-token logits.
    pub fn decode_step(&self, store: &ParamStore, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        if state.position >= self.config.max_text_len {
            return Err(SlipError::Capacity {
                what: "text tokens",
                got: state.position + 1,
                limit: self.config.max_text_len,
            });
        }
        let heads = self.config.num_heads;
        let pos = state.position;
        let tables = Rc::new(rope1d_tables(&[pos], self.config.head_dim(), self.config.rope_base)?);
        let self_plan = Rc::new(AttentionPlan::new(vec![AttnSegment {
            q_start: 0,
            q_len: 1,
            k_start: 0,
            k_len: pos + 1,
        }]));
        let cross_plan = Rc::new(AttentionPlan::new(vec![AttnSegment {
            q_start: 0,
            q_len: 1,
            k_start: 0,
            k_len: NUM_CAPTION_TOKENS,
        }]));
        let mut g = Graph::inference(store);
        let emb = g.param(self.decoder.embedding);
        let mut x = g.gather_rows(emb, vec![token]);
        for (i, block) in self.decoder.blocks.iter().enumerate() {
            let h = block.ln_self.apply(&mut g, x);
            let attn = &block.self_attn;
            let q = attn.wq.apply(&mut g, h);
            let q = g.rope(q, tables.clone(), heads);
            let k = attn.wk.apply(&mut g, h);
            let k = g.rope(k, tables.clone(), heads);
            let v = attn.wv.apply(&mut g, h);
            let (kc, vc) = &mut state.self_kv[i];
            *kc = Matrix::vstack(&[kc, g.value(k)]);
            *vc = Matrix::vstack(&[vc, g.value(v)]);
            let (kc, vc) = (g.constant(kc.clone()), g.constant(vc.clone()));
            let a = g.attention(q, kc, vc, self_plan.clone(), heads);
            let a = attn.wo.apply(&mut g, a);
            x = g.add(x, a);
            let (ln, cattn) = block.cross.as_ref().expect("decoder blocks carry cross-attention");
            let h = ln.apply(&mut g, x);
            let q = cattn.wq.apply(&mut g, h);
            let (ck, cv) = &state.cross_kv[i];
            let (ck, cv) = (g.constant(ck.clone()), g.constant(cv.clone()));
            let a = g.attention(q, ck, cv, cross_plan.clone(), heads);
            let a = cattn.wo.apply(&mut g, a);
            x = g.add(x, a);
            let h = block.ln_ffn.apply(&mut g, x);
            let f = block.ffn.apply(&mut g, h);
            x = g.add(x, f);
        }
        let h = self.decoder.final_norm.apply(&mut g, x);
        let logits = self.output_logits(&mut g, h);
        state.position += 1;
        Ok(g.value(logits).row(0).to_vec())
    }

    /// Greedy decoding from BOS until EOS or until the sequence (BOS
    /// included) holds `max_len` tokens. Uses the key/value cache.
    pub fn generate(&self, store: &ParamStore, caption_tokens: &Matrix, max_len: usize) -> Result<String> {
        Ok(detokenize(&self.generate_ids(store, caption_tokens, max_len)?))
    }

    pub fn generate_ids(&self, store: &ParamStore, caption_tokens: &Matrix, max_len: usize) -> Result<Vec<usize>> {
        self.check_max_len(max_len)?;
        let mut state = self.start_decoding(store, caption_tokens)?;
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let logits = self.decode_step(store, &mut state, *ids.last().expect("non-empty"))?;
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(ids)
    }

    /// Same as [`generate_ids`](Self::generate_ids) but re-evaluates the full
    /// prefix at every step.
    pub fn generate_ids_uncached(
        &self,
        store: &ParamStore,
        caption_tokens: &Matrix,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        self.check_max_len(max_len)?;
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let logits = self.decode(store, &ids, caption_tokens)?;
            let next = argmax(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(ids)
    }

    fn check_max_len(&self, max_len: usize) -> Result<()> {
        if max_len == 0 || max_len > self.config.max_text_len {
            return Err(SlipError::Argument(format!(
                "max_len {max_len} must lie in 1..={}",
                self.config.max_text_len
            )));
        }
        Ok(())
    }
}

/// Per-layer self-attention key/value caches plus the precomputed
/// cross-attention keys/values of one generation stream.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub self_kv: Vec<(Matrix, Matrix)>,
    pub cross_kv: Vec<(Matrix, Matrix)>,
    pub position: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenizer_cases() {
        assert_eq!(tokenize("", 512), vec![BOS, EOS]);
        let ids = tokenize("rising trend", 512);
        assert_eq!(detokenize(&ids), "rising trend");
        let long = "x".repeat(600);
        let ids = tokenize(&long, 512);
        assert_eq!(ids.len(), 512);
        assert_eq!(*ids.last().unwrap(), EOS);
        let utf = "größer ± 温度";
        assert_eq!(detokenize(&tokenize(utf, 512)), utf);
    }

    #[test]
    fn freezing_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = TextStackConfig {
            encoder_depth: 12,
            unfrozen_encoder_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            ..Default::default()
        };
        let t = TextStack::new(&mut store, "text", cfg, &mut rng).unwrap();
        for (i, b) in t.encoder.blocks.iter().enumerate() {
            assert!(b.params().iter().all(|&id| store.get(id).trainable == (i >= 8)));
        }
        assert!(!store.get(t.encoder.embedding).trainable);
        assert!(t.decoder_params().iter().all(|&id| store.get(id).trainable));
    }

    #[test]
    fn bad_unfrozen_count_rejected() {
        let cfg = TextStackConfig {
            encoder_depth: 2,
            unfrozen_encoder_layers: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
