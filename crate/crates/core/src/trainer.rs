//! Optimisation loop: AdamW with decoupled weight decay, global gradient
//! clipping, linear warmup plus cosine decay, SFT augmentations, metric
//! logging and resumable checkpoints.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SensorSeries};
use crate::diagnostics::{geometry_report, GeometryConfig, GeometryProbe, GeometryRecord};
use crate::error::{Result, SlipError};
use crate::model::{PreparedSensor, SlipModel};
use crate::objectives::{derangement, LossMode, LossWeights};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

pub const METRICS_SCHEMA: &str = "slip-metrics/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    /// Caption loss only, with augmentations enabled.
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter: bool,
    pub jitter_std: f64,
    pub scale: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
    /// Probability of reversing time when `flip` is on.
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: true,
            jitter_std: 0.03,
            scale: true,
            scale_min: 0.8,
            scale_max: 1.2,
            flip: true,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            jitter: false,
            scale: false,
            flip: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Log geometry every this many steps (0: never).
    pub geometry_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            peak_lr: 1e-3,
            final_lr: 1e-7,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            mode: TrainMode::Pretrain,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            geometry_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(SlipError::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(SlipError::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return Err(SlipError::Config(
                "learning rates must satisfy peak_lr > final_lr > 0".into(),
            ));
        }
        if self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return Err(SlipError::Config(
                "grad_clip must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.loss.mode == LossMode::RandomPaired && self.batch_size < 2 {
            return Err(SlipError::Config("random_paired needs batch_size >= 2".into()));
        }
        if self.augment.scale_min > self.augment.scale_max || self.augment.jitter_std < 0.0 {
            return Err(SlipError::Config("invalid augmentation ranges".into()));
        }
        self.loss.validate()
    }

    /// Loss weighting actually optimised: SFT always trains the caption loss only.
    pub fn effective_loss(&self) -> LossWeights {
        match self.mode {
            TrainMode::Pretrain => self.loss.clone(),
            TrainMode::Sft => LossWeights {
                mode: LossMode::CaptionOnly,
                ..self.loss.clone()
            },
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `final_lr` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Reverses the time axis; time indices are reflected so they stay increasing.
pub fn flip_time(series: &SensorSeries) -> SensorSeries {
    let mut out = series.clone();
    for ch in out.values.iter_mut() {
        ch.reverse();
    }
    for m in out.mask.iter_mut() {
        m.reverse();
    }
    let n = series.time_index.len();
    let (first, last) = (series.time_index[0], series.time_index[n - 1]);
    out.time_index = (0..n).map(|i| first + last - series.time_index[n - 1 - i]).collect();
    out
}

/// Jitter, then per-channel scaling, then (randomly) time flipping.
pub fn augment<R: Rng + ?Sized>(series: &SensorSeries, rng: &mut R, cfg: &AugmentConfig) -> SensorSeries {
    let mut out = series.clone();
    if cfg.jitter && cfg.jitter_std > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_std).expect("validated std");
        for (ch, m) in out.values.iter_mut().zip(&series.mask) {
            for (v, &obs) in ch.iter_mut().zip(m) {
                if obs {
                    *v += normal.sample(rng);
                }
            }
        }
    }
    if cfg.scale {
        for ch in out.values.iter_mut() {
            let f = if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..cfg.scale_max)
            } else {
                cfg.scale_min
            };
            ch.iter_mut().for_each(|v| *v *= f);
        }
    }
    if cfg.flip && rng.random::<f64>() < cfg.flip_prob {
        out = flip_time(&out);
    }
    out
}

/// Adam moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter that received a gradient.
    /// Parameters without a gradient (including frozen ones) are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let param = store.get(id);
            if !param.trainable {
                continue;
            }
            let decay = if param.decay { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
    }
}

/// Everything besides the model needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed optimisation steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Self {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            optimizer: AdamW::new(store),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub contrastive_loss: f64,
    pub caption_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Geometry(GeometryRecord),
    Eval(EvalRecord),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    schema: String,
    #[serde(flatten)]
    record: MetricRecord,
}

/// Serialises a record as one JSON line.
pub fn metric_line(record: &MetricRecord) -> String {
    serde_json::to_string(&LogLine {
        schema: METRICS_SCHEMA.to_string(),
        record: record.clone(),
    })
    .expect("metric records serialise")
}

pub fn parse_metric_line(line: &str) -> Result<MetricRecord> {
    let l: LogLine = serde_json::from_str(line)?;
    if l.schema != METRICS_SCHEMA {
        return Err(SlipError::Format(format!("unknown metric schema {}", l.schema)));
    }
    Ok(l.record)
}

/// Callback run after each step; returning `true` stops training.
pub type StepHook<'h> = dyn FnMut(&SlipModel, &StepRecord, &mut Vec<MetricRecord>) -> Result<bool> + 'h;

/// Optional plumbing around [`train`].
#[derive(Default)]
pub struct TrainOptions<'h> {
    pub metrics: Option<&'h mut dyn Write>,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory for the dump written when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Stop once this many steps are complete (for splitting a run).
    pub stop_at: Option<usize>,
    pub geometry: Option<(GeometryProbe, GeometryConfig)>,
    pub on_step: Option<&'h mut StepHook<'h>>,
}

pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub state: TrainState,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            _ => None,
        })
    }
}

fn emit(records: &mut Vec<MetricRecord>, sink: &mut Option<&mut dyn Write>, r: MetricRecord) -> Result<()> {
    if let Some(w) = sink {
        writeln!(w, "{}", metric_line(&r)).map_err(|e| SlipError::io("<metrics>", e))?;
    }
    records.push(r);
    Ok(())
}

fn dump_batch(dir: &Option<PathBuf>, step: usize, draws: &[(usize, String)], detail: &str) -> String {
    let body = serde_json::json!({
        "step": step,
        "detail": detail,
        "batch": draws.iter().map(|(i, c)| serde_json::json!({"index": i, "caption": c})).collect::<Vec<_>>(),
    });
    match dir {
        Some(d) => {
            let path = d.join(format!("nonfinite-step{step}.json"));
            match std::fs::create_dir_all(d).and_then(|_| std::fs::write(&path, body.to_string())) {
                Ok(()) => format!("{detail}; batch dumped to {}", path.display()),
                Err(e) => format!("{detail}; batch dump failed ({e}): {body}"),
            }
        }
        None => format!("{detail}; batch: {body}"),
    }
}

/// Runs (or resumes) training until `cfg.steps` steps are complete.
pub fn train(
    model: &mut SlipModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = state.unwrap_or_else(|| TrainState::new(cfg, &model.store));
    let weights = cfg.effective_loss();
    let augmenting = cfg.mode == TrainMode::Sft && (cfg.augment.jitter || cfg.augment.scale || cfg.augment.flip);
    let prepared: Vec<PreparedSensor> = if augmenting {
        Vec::new()
    } else {
        dataset
            .samples()
            .iter()
            .map(|s| model.prepare_sensor(&s.series))
            .collect::<Result<_>>()?
    };
    let mut records = Vec::new();
    let mut stopped_early = false;
    let end = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    while state.step < end {
        let step = state.step;
        if let Some((probe, gcfg)) = &opts.geometry {
            if cfg.geometry_every > 0 && step % cfg.geometry_every == 0 {
                let rec = geometry_report(model, probe, gcfg, step)?;
                emit(&mut records, &mut opts.metrics, MetricRecord::Geometry(rec))?;
            }
        }
        let batch = dataset.sample_batch(cfg.batch_size, &mut state.rng);
        let mut captions: Vec<String> = batch.draws.iter().map(|d| d.caption.clone()).collect();
        if weights.mode == LossMode::RandomPaired {
            let perm = derangement(captions.len(), &mut state.rng)?;
            captions = perm.iter().map(|&j| captions[j].clone()).collect();
        }
        let augmented: Vec<PreparedSensor> = if augmenting {
            batch
                .draws
                .iter()
                .map(|d| model.prepare_sensor(&augment(&dataset.get(d.index).series, &mut state.rng, &cfg.augment)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let sensors: Vec<&PreparedSensor> = if augmenting {
            augmented.iter().collect()
        } else {
            batch.draws.iter().map(|d| &prepared[d.index]).collect()
        };
        let texts: Vec<Vec<usize>> = captions.iter().map(|c| model.tokenize(c)).collect();

        let temperature = model.temperature();
        let (record, mut grads) = {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, &sensors, &texts, &weights)?;
            let (c, k, t) = (
                g.value(out.contrastive).item(),
                g.value(out.caption).item(),
                g.value(out.total).item(),
            );
            if !(c.is_finite() && k.is_finite() && t.is_finite()) {
                let draws: Vec<(usize, String)> = batch
                    .draws
                    .iter()
                    .zip(&captions)
                    .map(|(d, c)| (d.index, c.clone()))
                    .collect();
                let detail = format!("loss became non-finite (contrastive {c}, caption {k}, total {t})");
                return Err(SlipError::NonFinite {
                    step,
                    detail: dump_batch(&opts.dump_dir, step, &draws, &detail),
                });
            }
            let grads = g.backward(out.total);
            let rec = StepRecord {
                step,
                lr: lr_at(step + 1, cfg),
                contrastive_loss: c,
                caption_loss: k,
                total: t,
                grad_norm: grads.global_norm(),
                temperature,
            };
            (rec, grads)
        };
        if !record.grad_norm.is_finite() {
            let draws: Vec<(usize, String)> = batch
                .draws
                .iter()
                .zip(&captions)
                .map(|(d, c)| (d.index, c.clone()))
                .collect();
            return Err(SlipError::NonFinite {
                step,
                detail: dump_batch(&opts.dump_dir, step, &draws, "gradient norm became non-finite"),
            });
        }
        if record.grad_norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / record.grad_norm);
        }
        state.optimizer.step(&mut model.store, &grads, record.lr, cfg);
        state.step += 1;
        emit(&mut records, &mut opts.metrics, MetricRecord::Step(record.clone()))?;

        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                Checkpoint::capture(model, cfg, &state).save(&dir.join(format!("step-{:06}.ckpt", state.step)))?;
            }
        }
        if let Some(hook) = opts.on_step.as_mut() {
            let mut extra = Vec::new();
            let stop = hook(model, &record, &mut extra)?;
            for r in extra {
                emit(&mut records, &mut opts.metrics, r)?;
            }
            if stop {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some((probe, gcfg)) = &opts.geometry {
        if cfg.geometry_every > 0 && state.step == cfg.steps {
            let rec = geometry_report(model, probe, gcfg, state.step)?;
            emit(&mut records, &mut opts.metrics, MetricRecord::Geometry(rec))?;
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        Checkpoint::capture(model, cfg, &state).save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        records,
        state,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrequencyClass;

    #[test]
    fn schedule_endpoints_and_continuity() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            peak_lr: 2e-4,
            final_lr: 1e-7,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 2e-4);
        assert!((lr_at(1000, &cfg) - 1e-7).abs() <= 1e-12);
        assert!((lr_at(101, &cfg) - lr_at(100, &cfg)).abs() < 1e-9);
        assert!((lr_at(99, &cfg) - lr_at(100, &cfg)).abs() < 3e-6);
    }

    #[test]
    fn augmentation_identities() {
        let s =
            SensorSeries::from_values(vec![vec![1.0, 2.0, 5.0], vec![0.0, -1.0, 3.0]], FrequencyClass::Hourly).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &mut rng, &AugmentConfig::none()), s);
        let neutral = AugmentConfig {
            jitter_std: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip: false,
            ..Default::default()
        };
        assert_eq!(augment(&s, &mut rng, &neutral), s);
        let mut shifted = s.clone();
        shifted.time_index = vec![10, 11, 15];
        let f = flip_time(&shifted);
        assert_eq!(f.values[0], vec![5.0, 2.0, 1.0]);
        assert_eq!(f.time_index, vec![10, 14, 15]);
        assert_eq!(flip_time(&f), shifted);
    }

    #[test]
    fn metric_lines_roundtrip() {
        let r = MetricRecord::Step(StepRecord {
            step: 3,
            lr: 0.1,
            contrastive_loss: 1.0,
            caption_loss: 2.0,
            total: 3.0,
            grad_norm: 0.5,
            temperature: 0.07,
        });
        let line = metric_line(&r);
        assert!(line.starts_with("{\"schema\":\"slip-metrics/1\",\"kind\":\"step\""));
        assert_eq!(parse_metric_line(&line).unwrap(), r);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            steps: 10,
            warmup_steps: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
