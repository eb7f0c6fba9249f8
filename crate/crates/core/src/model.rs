//! The assembled sensor-language model and its batched forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{normalize, patch_size_for, SensorSeries};
use crate::encoder::{AttentionMode, EncoderConfig, SensorEncoder, TokenLayout};
use crate::error::{Result, SlipError};
use crate::flexmlp::{patchify, FlexMlp, PatchBatch, PatchSpec};
use crate::nn::Linear;
use crate::objectives::{caption_token_weights, CaptionReduction, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::pooler::{AttentionPooler, NUM_CAPTION_TOKENS};
use crate::tensor::Matrix;
use crate::text::{tokenize, TextBatch, TextStack, TextStackConfig};

/// Which sensor representation zero-shot retrieval compares with prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSource {
    /// Mean of the encoder's valid token outputs.
    MeanPool,
    /// The pooler's CLS token.
    Cls,
}

/// Every architecture knob in one flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub base_patch: usize,
    pub embedder_mlp_dim: usize,
    pub embedder_inner_activation: bool,
    pub target_tokens: usize,
    /// Overrides the frequency heuristic with one patch size for every series.
    pub fixed_patch_size: Option<usize>,
    pub encoder_depth: usize,
    pub encoder_ffn_dim: usize,
    pub attention_mode: AttentionMode,
    pub rope_base: f64,
    pub max_tokens: usize,
    pub pooler_residual: bool,
    pub text_encoder_depth: usize,
    pub text_decoder_depth: usize,
    pub text_ffn_dim: usize,
    pub unfrozen_encoder_layers: usize,
    pub freeze_all_text_encoder: bool,
    pub max_text_len: usize,
    pub tied_output: bool,
    pub embed_dim: usize,
    pub init_temperature: f64,
    pub min_temperature: f64,
    pub learnable_temperature: bool,
    pub caption_loss_reduction: CaptionReduction,
    pub zero_shot_sensor_source: SensorSource,
    pub zero_shot_use_projection: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            base_patch: 16,
            embedder_mlp_dim: 128,
            embedder_inner_activation: true,
            target_tokens: 8,
            fixed_patch_size: None,
            encoder_depth: 4,
            encoder_ffn_dim: 128,
            attention_mode: AttentionMode::Full,
            rope_base: 10_000.0,
            max_tokens: 2048,
            pooler_residual: false,
            text_encoder_depth: 4,
            text_decoder_depth: 2,
            text_ffn_dim: 128,
            unfrozen_encoder_layers: 4,
            freeze_all_text_encoder: false,
            max_text_len: 512,
            tied_output: false,
            embed_dim: 64,
            init_temperature: 0.07,
            min_temperature: 0.01,
            learnable_temperature: true,
            caption_loss_reduction: CaptionReduction::Mean,
            zero_shot_sensor_source: SensorSource::Cls,
            zero_shot_use_projection: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            base_patch: self.base_patch,
            hidden_dim: self.hidden_dim,
            mlp_dim: self.embedder_mlp_dim,
            inner_activation: self.embedder_inner_activation,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.encoder_depth,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.encoder_ffn_dim,
            attention_mode: self.attention_mode,
            rope_base: self.rope_base,
            max_tokens: self.max_tokens,
        }
    }

    pub fn text_config(&self) -> TextStackConfig {
        TextStackConfig {
            encoder_depth: self.text_encoder_depth,
            decoder_depth: self.text_decoder_depth,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.text_ffn_dim,
            unfrozen_encoder_layers: self.unfrozen_encoder_layers,
            freeze_all_encoder: self.freeze_all_text_encoder,
            max_text_len: self.max_text_len,
            rope_base: self.rope_base,
            tied_output: self.tied_output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.text_config().validate()?;
        if self.embed_dim == 0 || self.target_tokens == 0 {
            return Err(SlipError::Config("embed_dim and target_tokens must be positive".into()));
        }
        if !(self.min_temperature > 0.0 && self.init_temperature >= self.min_temperature) {
            return Err(SlipError::Config(
                "temperatures must satisfy 0 < min_temperature <= init_temperature".into(),
            ));
        }
        if matches!(self.fixed_patch_size, Some(p) if p < 2) {
            return Err(SlipError::Config("fixed_patch_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Upper clamp on the log inverse temperature.
    pub fn max_logit_scale(&self) -> f64 {
        (1.0 / self.min_temperature).ln()
    }
}

/// Patches of every channel of one normalised series.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSensor {
    pub channels: Vec<PatchBatch>,
}

impl PreparedSensor {
    pub fn num_tokens(&self) -> usize {
        self.channels.iter().map(PatchBatch::num_patches).sum()
    }
}

/// Outputs of [`SlipModel::forward`].
pub struct ForwardOutput {
    pub sensor_embedding: Var,
    pub text_embedding: Var,
    pub contrastive: Var,
    pub caption: Var,
    pub total: Var,
}

/// Inference-time sensor outputs for a list of series.
#[derive(Clone, Debug)]
pub struct SensorFeatures {
    /// Mean-pooled encoder tokens, `N × hidden`.
    pub mean_pool: Matrix,
    /// Pooler CLS tokens, `N × hidden`.
    pub cls: Matrix,
    /// Normalised projection of `cls`, `N × embed`.
    pub cls_embedding: Matrix,
    /// Normalised projection of `mean_pool`, `N × embed`.
    pub mean_pool_embedding: Matrix,
    /// 64 caption tokens per sample.
    pub caption_tokens: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct SlipModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: FlexMlp,
    pub encoder: SensorEncoder,
    pub pooler: AttentionPooler,
    pub text: TextStack,
    pub sensor_proj: Linear,
    pub text_proj: Linear,
    pub logit_scale: ParamId,
}

impl SlipModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let embedder = FlexMlp::new(&mut store, "sensor.embedder", config.patch_spec(), &mut rng)?;
        let encoder = SensorEncoder::new(&mut store, "sensor.encoder", config.encoder_config(), &mut rng)?;
        let pooler = AttentionPooler::new(
            &mut store,
            "sensor.pooler",
            config.hidden_dim,
            config.num_heads,
            config.pooler_residual,
            &mut rng,
        );
        let text = TextStack::new(&mut store, "text", config.text_config(), &mut rng)?;
        let sensor_proj = Linear::new(
            &mut store,
            "proj.sensor",
            config.hidden_dim,
            config.embed_dim,
            1.0,
            true,
            &mut rng,
        );
        let text_proj = Linear::new(
            &mut store,
            "proj.text",
            config.hidden_dim,
            config.embed_dim,
            1.0,
            true,
            &mut rng,
        );
        let logit_scale = store.add(
            "proj.logit_scale",
            Matrix::scalar((1.0 / config.init_temperature).ln()),
            false,
        );
        store.set_trainable(logit_scale, config.learnable_temperature);
        Ok(Self {
            config,
            store,
            embedder,
            encoder,
            pooler,
            text,
            sensor_proj,
            text_proj,
            logit_scale,
        })
    }

    /// Current temperature `σ = exp(−min(θ, ln(1/σ_min)))`.
    pub fn temperature(&self) -> f64 {
        (-self
            .store
            .value(self.logit_scale)
            .item()
            .min(self.config.max_logit_scale()))
        .exp()
    }

    pub fn patch_size_for(&self, series: &SensorSeries) -> Result<usize> {
        match self.config.fixed_patch_size {
            Some(p) => Ok(p),
            None => patch_size_for(series.frequency, series.len(), self.config.target_tokens),
        }
    }

    /// Normalises and patchifies every channel.
    pub fn prepare_sensor(&self, series: &SensorSeries) -> Result<PreparedSensor> {
        series.validate()?;
        let ps = self.patch_size_for(series)?;
        let norm = normalize(series);
        let channels = norm
            .values
            .iter()
            .zip(&norm.mask)
            .map(|(v, m)| patchify(v, m, &norm.time_index, ps))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSensor { channels })
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.config.max_text_len)
    }

    /// Embeds every patch and packs the tokens of each sample channel-major.
    pub fn sensor_tokens(&self, g: &mut Graph, sensors: &[&PreparedSensor]) -> Result<(Var, TokenLayout)> {
        if sensors.is_empty() {
            return Err(SlipError::Argument("empty sensor batch".into()));
        }
        // Channels sharing a patch size are embedded in one call.
        let mut sizes: Vec<usize> = sensors
            .iter()
            .flat_map(|s| s.channels.iter().map(|c| c.patch_size))
            .collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut pieces = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        let mut row_of: Vec<Vec<usize>> = sensors.iter().map(|s| vec![0; s.channels.len()]).collect();
        for &ps in &sizes {
            let mut mats = Vec::new();
            for (b, s) in sensors.iter().enumerate() {
                for (c, ch) in s.channels.iter().enumerate() {
                    if ch.patch_size == ps {
                        row_of[b][c] = offset;
                        offset += ch.num_patches();
                        mats.push(&ch.patches);
                    }
                }
            }
            let z = g.constant(Matrix::vstack(&mats));
            pieces.push(self.embedder.forward(g, z, ps)?);
        }
        let all = if pieces.len() == 1 {
            pieces[0]
        } else {
            g.concat_rows(pieces)
        };
        let mut order = Vec::new();
        let mut layout = TokenLayout::default();
        for (b, s) in sensors.iter().enumerate() {
            let start = order.len();
            for (c, ch) in s.channels.iter().enumerate() {
                for p in 0..ch.num_patches() {
                    order.push(row_of[b][c] + p);
                    layout.coords.push((c, p));
                    layout.valid.push(ch.patch_valid[p]);
                }
            }
            layout.samples.push((start, order.len() - start));
        }
        let tokens = g.gather_rows(all, order);
        Ok((tokens, layout))
    }

    /// Full training forward pass. `texts[b]` are the token ids (with BOS and
    /// EOS) paired with `sensors[b]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        sensors: &[&PreparedSensor],
        texts: &[Vec<usize>],
        weights: &LossWeights,
    ) -> Result<ForwardOutput> {
        if sensors.len() != texts.len() {
            return Err(SlipError::Argument(format!(
                "{} sensor samples paired with {} captions",
                sensors.len(),
                texts.len()
            )));
        }
        if texts.iter().any(|t| t.len() < 2) {
            return Err(SlipError::Argument("each caption needs at least BOS and EOS".into()));
        }
        let (tokens, layout) = self.sensor_tokens(g, sensors)?;
        let encoded = self.encoder.forward(g, tokens, &layout)?;
        let pooled = self.pooler.forward(g, encoded, &layout.samples, &layout.valid)?;

        let s = self.sensor_proj.apply(g, pooled.cls);
        let sensor_embedding = g.l2_normalize(s);
        let full = TextBatch::from_sequences(texts);
        let (_, global) = self.text.encode_forward(g, &full)?;
        let t = self.text_proj.apply(g, global);
        let text_embedding = g.l2_normalize(t);
        let theta = g.param(self.logit_scale);
        let contrastive = g.contrastive(sensor_embedding, text_embedding, theta, self.config.max_logit_scale());

        let inputs: Vec<Vec<usize>> = texts.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
        let targets: Vec<usize> = texts.iter().flat_map(|t| t[1..].iter().copied()).collect();
        let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let dec_batch = TextBatch::from_sequences(&inputs);
        let logits = self.text.decode_forward(g, &dec_batch, pooled.caption_tokens, true)?;
        let caption = g.cross_entropy(
            logits,
            targets,
            caption_token_weights(&lengths, self.config.caption_loss_reduction),
        );

        let (wc, wg) = weights.effective();
        let total = match (wc > 0.0, wg > 0.0) {
            (true, true) => {
                let a = g.scale(contrastive, wc);
                let b = g.scale(caption, wg);
                g.add(a, b)
            }
            (true, false) => g.scale(contrastive, wc),
            (false, true) => g.scale(caption, wg),
            (false, false) => g.scale(caption, 0.0),
        };
        Ok(ForwardOutput {
            sensor_embedding,
            text_embedding,
            contrastive,
            caption,
            total,
        })
    }

    /// Sensor features for evaluation, computed in chunks of `chunk` samples.
    pub fn sensor_features(&self, sensors: &[&PreparedSensor], chunk: usize) -> Result<SensorFeatures> {
        let h = self.config.hidden_dim;
        let mut mean_rows = Vec::new();
        let mut cls_rows = Vec::new();
        let mut cls_emb = Vec::new();
        let mut mean_emb = Vec::new();
        let mut caption_tokens = Vec::new();
        for part in sensors.chunks(chunk.max(1)) {
            let mut g = Graph::inference(&self.store);
            let (tokens, layout) = self.sensor_tokens(&mut g, part)?;
            let encoded = self.encoder.forward(&mut g, tokens, &layout)?;
            let weights = layout.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let mean = g.segment_mean(encoded, layout.samples.clone(), Some(weights));
            let pooled = self.pooler.forward(&mut g, encoded, &layout.samples, &layout.valid)?;
            let cp = self.sensor_proj.apply(&mut g, pooled.cls);
            let cp = g.l2_normalize(cp);
            let mp = self.sensor_proj.apply(&mut g, mean);
            let mp = g.l2_normalize(mp);
            for b in 0..part.len() {
                mean_rows.push(g.value(mean).row(b).to_vec());
                cls_rows.push(g.value(pooled.cls).row(b).to_vec());
                cls_emb.push(g.value(cp).row(b).to_vec());
                mean_emb.push(g.value(mp).row(b).to_vec());
                let rows: Vec<usize> = (b * NUM_CAPTION_TOKENS..(b + 1) * NUM_CAPTION_TOKENS).collect();
                caption_tokens.push(g.value(pooled.caption_tokens).select_rows(&rows));
            }
        }
        let mat = |rows: &[Vec<f64>], cols: usize| {
            if rows.is_empty() {
                Matrix::zeros(0, cols)
            } else {
                Matrix::from_rows(rows)
            }
        };
        Ok(SensorFeatures {
            mean_pool: mat(&mean_rows, h),
            cls: mat(&cls_rows, h),
            cls_embedding: mat(&cls_emb, self.config.embed_dim),
            mean_pool_embedding: mat(&mean_emb, self.config.embed_dim),
            caption_tokens,
        })
    }

    /// Mean-pooled text-encoder states, `N × hidden`, and their normalised
    /// projections, `N × embed`.
    pub fn text_features(&self, texts: &[&str], chunk: usize) -> Result<(Matrix, Matrix)> {
        let mut raw = Vec::new();
        let mut emb = Vec::new();
        for part in texts.chunks(chunk.max(1)) {
            let ids: Vec<Vec<usize>> = part.iter().map(|t| self.tokenize(t)).collect();
            let mut g = Graph::inference(&self.store);
            let (_, global) = self.text.encode_forward(&mut g, &TextBatch::from_sequences(&ids))?;
            let p = self.text_proj.apply(&mut g, global);
            let p = g.l2_normalize(p);
            for b in 0..part.len() {
                raw.push(g.value(global).row(b).to_vec());
                emb.push(g.value(p).row(b).to_vec());
            }
        }
        if raw.is_empty() {
            return Err(SlipError::Argument("no texts to embed".into()));
        }
        Ok((Matrix::from_rows(&raw), Matrix::from_rows(&emb)))
    }

    /// Sensor vectors used for zero-shot matching, per the configured source
    /// and projection flag.
    pub fn zero_shot_sensor_vectors(&self, f: &SensorFeatures) -> Matrix {
        match (
            self.config.zero_shot_sensor_source,
            self.config.zero_shot_use_projection,
        ) {
            (SensorSource::MeanPool, true) => f.mean_pool_embedding.clone(),
            (SensorSource::MeanPool, false) => f.mean_pool.clone(),
            (SensorSource::Cls, true) => f.cls_embedding.clone(),
            (SensorSource::Cls, false) => f.cls.clone(),
        }
    }

    /// Text vectors matching [`zero_shot_sensor_vectors`](Self::zero_shot_sensor_vectors).
    pub fn zero_shot_text_vectors(&self, texts: &[&str]) -> Result<Matrix> {
        let (raw, emb) = self.text_features(texts, 64)?;
        Ok(if self.config.zero_shot_use_projection { emb } else { raw })
    }

    /// Greedy caption for one prepared series.
    pub fn caption(&self, sensor: &PreparedSensor, max_len: usize) -> Result<String> {
        let f = self.sensor_features(&[sensor], 1)?;
        self.text.generate(&self.store, &f.caption_tokens[0], max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pair, GeneratorSpec};

    #[test]
    fn forward_runs_and_losses_are_finite() {
        let cfg = ModelConfig {
            hidden_dim: 16,
            embedder_mlp_dim: 16,
            encoder_depth: 1,
            text_encoder_depth: 1,
            unfrozen_encoder_layers: 1,
            text_decoder_depth: 1,
            encoder_ffn_dim: 16,
            text_ffn_dim: 16,
            embed_dim: 8,
            ..Default::default()
        };
        let model = SlipModel::new(cfg).unwrap();
        let pairs: Vec<_> = (0..3)
            .map(|s| generate_synthetic_pair(s, &GeneratorSpec::default()).unwrap())
            .collect();
        let prepared: Vec<_> = pairs.iter().map(|p| model.prepare_sensor(&p.series).unwrap()).collect();
        let refs: Vec<&PreparedSensor> = prepared.iter().collect();
        let texts: Vec<_> = pairs.iter().map(|p| model.tokenize(&p.caption.caption)).collect();
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &refs, &texts, &LossWeights::default()).unwrap();
        let (c, k, t) = (
            g.value(out.contrastive).item(),
            g.value(out.caption).item(),
            g.value(out.total).item(),
        );
        assert!(c.is_finite() && k.is_finite());
        assert!((t - (c + k)).abs() < 1e-12);
        // an untrained decoder is close to uniform over the byte vocabulary
        assert!((k - 259f64.ln()).abs() < 2.0, "{k}");
        let grads = g.backward(out.total);
        assert!(grads.global_norm() > 0.0);
        assert!(grads.get(model.logit_scale).is_some());
    }
}
