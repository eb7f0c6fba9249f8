//! Downstream protocols: linear probing, zero-shot retrieval, recall@K,
//! surface caption metrics and the paired Wilcoxon signed-rank test.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autograd::Graph;
use crate::data::{render_caption, AttributeVocabulary, Attributes, CaptionTemplate, Dataset, Sync};
use crate::error::{Result, SlipError};
use crate::model::{PreparedSensor, SlipModel};
use crate::objectives::LossWeights;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Standardise features with training-split statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            base_lr: 0.01,
            weight_decay: 0.05,
            batch_size: 32,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs <= self.warmup_epochs {
            return Err(SlipError::Config(format!(
                "probe epochs {} must exceed warmup {}",
                self.epochs, self.warmup_epochs
            )));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(SlipError::Config(
                "invalid probe learning rate, weight decay or batch size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub top1_accuracy: f64,
    pub macro_f1: f64,
    pub train_accuracy: f64,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// The configuration the probe actually ran with.
    pub config: ProbeConfig,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over classes present in either list.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
            let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
            let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    total / classes.len() as f64
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Matrix, enabled: bool) -> Self {
        let (n, d) = x.shape();
        if !enabled {
            return Self {
                mean: vec![0.0; d],
                inv_std: vec![1.0; d],
            };
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Softmax-regression classifier trained on frozen features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    weights: Matrix,
    bias: Vec<f64>,
    scaler_mean: Vec<f64>,
    scaler_inv_std: Vec<f64>,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let s = Standardizer {
            mean: self.scaler_mean.clone(),
            inv_std: self.scaler_inv_std.clone(),
        };
        let mut z = s.apply(x).matmul(&self.weights);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows()).map(|r| argmax_row(z.row(r))).collect()
    }
}

fn probe_lr(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let p = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (PI * p).cos())
}

/// Fits a linear softmax classifier with AdamW: linear warmup over the warmup
/// epochs, then cosine decay to zero.
pub fn fit_linear_probe(x: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<(LinearProbe, usize)> {
    cfg.validate()?;
    if x.rows() != labels.len() || x.rows() == 0 {
        return Err(SlipError::Argument(format!(
            "{} feature rows for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(SlipError::Argument("linear probe needs at least two classes".into()));
    }
    let k = distinct.last().unwrap() + 1;
    let (n, d) = x.shape();
    let scaler = Standardizer::fit(x, cfg.standardize);
    let xs = scaler.apply(x);
    let mut w = Matrix::zeros(d, k);
    let mut b = vec![0.0; k];
    let (mut mw, mut vw) = (Matrix::zeros(d, k), Matrix::zeros(d, k));
    let (mut mb, mut vb) = (vec![0.0; k], vec![0.0; k]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = xs.select_rows(chunk);
            let mut z = bx.matmul(&w);
            // Softmax gradient: (p - onehot) / batch.
            for (r, &i) in chunk.iter().enumerate() {
                let row = z.row_mut(r);
                for (v, bb) in row.iter_mut().zip(&b) {
                    *v += bb;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for v in row.iter_mut() {
                    *v = (*v - m).exp() / s / chunk.len() as f64;
                }
                row[labels[i]] -= 1.0 / chunk.len() as f64;
            }
            let gw = bx.transpose().matmul(&z);
            let gb: Vec<f64> = (0..k).map(|c| (0..z.rows()).map(|r| z.get(r, c)).sum()).collect();
            step += 1;
            let lr = probe_lr(step - 1, warmup, total, cfg.base_lr);
            let bc1 = 1.0 - beta1.powi(step as i32);
            let bc2 = 1.0 - beta2.powi(step as i32);
            for (((p, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(gw.data())
                .zip(mw.data_mut())
                .zip(vw.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * ((*m / bc1) / ((*v / bc2).sqrt() + eps) + cfg.weight_decay * *p);
            }
            for (((p, &g), m), v) in b.iter_mut().zip(&gb).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
    Ok((
        LinearProbe {
            weights: w,
            bias: b,
            scaler_mean: scaler.mean,
            scaler_inv_std: scaler.inv_std,
        },
        step,
    ))
}

/// Trains on the train split and reports test-split top-1 and macro-F1.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if test_x.rows() != test_y.len() || test_x.cols() != train_x.cols() {
        return Err(SlipError::Argument(
            "test features do not match labels or train width".into(),
        ));
    }
    let (probe, steps) = fit_linear_probe(train_x, train_y, cfg)?;
    let pred = probe.predict(test_x);
    Ok(ProbeReport {
        top1_accuracy: accuracy(&pred, test_y),
        macro_f1: macro_f1(&pred, test_y),
        train_accuracy: accuracy(&probe.predict(train_x), train_y),
        epochs_run: cfg.epochs,
        steps_run: steps,
        config: cfg.clone(),
    })
}

/// Mean-pooled frozen encoder features for probing.
pub fn probe_features(model: &SlipModel, sensors: &[&PreparedSensor]) -> Result<Matrix> {
    Ok(model.sensor_features(sensors, 32)?.mean_pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutLosses {
    /// Mean over fixed-order chunks of the in-chunk contrastive loss.
    pub contrastive: f64,
    /// Caption loss averaged over samples.
    pub caption: f64,
}

/// Both losses on every sample of `dataset` with canonical captions, without
/// updating anything. Chunks shorter than two samples are skipped for the
/// contrastive term.
pub fn held_out_losses(model: &SlipModel, dataset: &Dataset, chunk: usize) -> Result<HeldOutLosses> {
    let chunk = chunk.max(2);
    let weights = LossWeights::default();
    let (mut c_sum, mut c_n, mut k_sum) = (0.0, 0usize, 0.0);
    for part in dataset.samples().chunks(chunk) {
        let prepared: Vec<PreparedSensor> = part
            .iter()
            .map(|s| model.prepare_sensor(&s.series))
            .collect::<Result<_>>()?;
        let refs: Vec<&PreparedSensor> = prepared.iter().collect();
        let texts: Vec<Vec<usize>> = part.iter().map(|s| model.tokenize(&s.captions.caption)).collect();
        let mut g = Graph::inference(&model.store);
        let out = model.forward(&mut g, &refs, &texts, &weights)?;
        if part.len() >= 2 {
            c_sum += g.value(out.contrastive).item();
            c_n += 1;
        }
        k_sum += g.value(out.caption).item() * part.len() as f64;
    }
    if dataset.is_empty() {
        return Err(SlipError::Argument("held-out losses on an empty dataset".into()));
    }
    Ok(HeldOutLosses {
        contrastive: if c_n > 0 { c_sum / c_n as f64 } else { f64::NAN },
        caption: k_sum / dataset.len() as f64,
    })
}

/// One class and the prompts whose mean embedding forms its prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub label: usize,
    pub prompts: Vec<String>,
}

fn check_prompts(prompts: &[ClassPrompt]) -> Result<()> {
    if prompts.is_empty() {
        return Err(SlipError::Argument("no class prompts given".into()));
    }
    let mut labels: Vec<usize> = prompts.iter().map(|p| p.label).collect();
    labels.sort_unstable();
    if labels != (0..prompts.len()).collect::<Vec<_>>() {
        return Err(SlipError::Argument(
            "class labels must be contiguous from 0 without repeats".into(),
        ));
    }
    if let Some(p) = prompts.iter().find(|p| p.prompts.is_empty()) {
        return Err(SlipError::Argument(format!("class {} has no prompt text", p.label)));
    }
    Ok(())
}

fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Unit-normalised mean of each class's unit-normalised prompt embeddings,
/// one row per label in label order.
pub fn class_prototypes(model: &SlipModel, prompts: &[ClassPrompt]) -> Result<Matrix> {
    check_prompts(prompts)?;
    let mut sorted: Vec<&ClassPrompt> = prompts.iter().collect();
    sorted.sort_by_key(|p| p.label);
    let mut rows = Vec::with_capacity(sorted.len());
    for class in sorted {
        let texts: Vec<&str> = class.prompts.iter().map(String::as_str).collect();
        let emb = normalize_rows(&model.zero_shot_text_vectors(&texts)?);
        let mut mean = vec![0.0; emb.cols()];
        for r in 0..emb.rows() {
            for (m, v) in mean.iter_mut().zip(emb.row(r)) {
                *m += v / emb.rows() as f64;
            }
        }
        rows.push(mean);
    }
    Ok(normalize_rows(&Matrix::from_rows(&rows)))
}

/// Index of the most cosine-similar prototype per row; ties go to the lower index.
pub fn nearest_prototype(features: &Matrix, prototypes: &Matrix) -> Result<Vec<usize>> {
    if prototypes.rows() == 0 {
        return Err(SlipError::Argument("no prototypes".into()));
    }
    if features.cols() != prototypes.cols() {
        return Err(SlipError::Argument(format!(
            "feature width {} differs from prototype width {}",
            features.cols(),
            prototypes.cols()
        )));
    }
    let sims = normalize_rows(features).matmul_t(&normalize_rows(prototypes));
    Ok((0..sims.rows()).map(|r| argmax_row(sims.row(r))).collect())
}

/// Zero-shot labels for `sensors` against class prompt prototypes.
pub fn zero_shot_retrieve(
    model: &SlipModel,
    sensors: &[&PreparedSensor],
    prompts: &[ClassPrompt],
) -> Result<Vec<usize>> {
    let protos = class_prototypes(model, prompts)?;
    let f = model.sensor_features(sensors, 32)?;
    nearest_prototype(&model.zero_shot_sensor_vectors(&f), &protos)
}

/// Attributes that can define a class in a synthetic zero-shot task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassAxis {
    Trend,
    Period,
    Spike,
    Noise,
}

/// A classification task over synthetic attributes: one class per combination
/// of the chosen axes' vocabulary values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTask {
    pub axes: Vec<ClassAxis>,
    pub vocabulary: AttributeVocabulary,
}

impl AttributeTask {
    fn axis_size(&self, axis: ClassAxis) -> usize {
        let v = &self.vocabulary;
        match axis {
            ClassAxis::Trend => v.trends.len(),
            ClassAxis::Period => v.periods.len(),
            ClassAxis::Spike => v.spikes.len(),
            ClassAxis::Noise => v.noise_levels.len(),
        }
    }

    fn axis_index(&self, axis: ClassAxis, a: &Attributes) -> Option<usize> {
        let v = &self.vocabulary;
        match axis {
            ClassAxis::Trend => v.trends.iter().position(|&t| t == a.trend),
            ClassAxis::Period => v.periods.iter().position(|&p| p == a.period),
            ClassAxis::Spike => v.spikes.iter().position(|&s| s == a.spike),
            ClassAxis::Noise => v.noise_levels.iter().position(|&n| n == a.noise),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.axes.iter().map(|&a| self.axis_size(a)).product()
    }

    /// Mixed-radix class id, or `None` for attributes outside the vocabulary.
    pub fn label(&self, a: &Attributes) -> Option<usize> {
        self.axes.iter().try_fold(0, |acc, &axis| {
            Some(acc * self.axis_size(axis) + self.axis_index(axis, a)?)
        })
    }

    /// Held-out-phrasing prompts for every attribute combination, grouped by class.
    pub fn prompts(&self) -> Result<Vec<ClassPrompt>> {
        if self.axes.is_empty() || self.num_classes() < 2 {
            return Err(SlipError::Config("attribute task needs at least two classes".into()));
        }
        let v = &self.vocabulary;
        let mut syncs: Vec<Option<Sync>> = vec![None];
        syncs.extend(v.syncs.iter().map(|&s| Some(s)));
        let mut by_label: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for &trend in &v.trends {
            for &period in &v.periods {
                for &spike in &v.spikes {
                    for &noise in &v.noise_levels {
                        for &sync in &syncs {
                            let a = Attributes {
                                trend,
                                period,
                                spike,
                                noise,
                                sync,
                            };
                            let label = self.label(&a).expect("vocabulary attributes have labels");
                            by_label
                                .entry(label)
                                .or_default()
                                .push(render_caption(&a, CaptionTemplate::Prompt));
                        }
                    }
                }
            }
        }
        Ok(by_label
            .into_iter()
            .map(|(label, prompts)| ClassPrompt { label, prompts })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub sensor_to_text: f64,
    pub text_to_sensor: f64,
}

/// Fraction of rows whose partner ranks in the top `k` by cosine similarity.
/// A partner's rank is one plus the number of strictly more similar candidates.
pub fn recall_at_k(sensor: &Matrix, text: &Matrix, k: usize) -> Result<RecallReport> {
    let n = sensor.rows();
    if text.shape() != sensor.shape() || n == 0 {
        return Err(SlipError::Argument(
            "recall needs equal non-empty paired features".into(),
        ));
    }
    if k == 0 || k > n {
        return Err(SlipError::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    let sims = normalize_rows(sensor).matmul_t(&normalize_rows(text));
    let hits = |sim: &dyn Fn(usize, usize) -> f64| {
        (0..n)
            .filter(|&i| {
                let own = sim(i, i);
                (0..n).filter(|&j| sim(i, j) > own).count() < k
            })
            .count() as f64
            / n as f64
    };
    Ok(RecallReport {
        k,
        sensor_to_text: hits(&|i, j| sims.get(i, j)),
        text_to_sensor: hits(&|i, j| sims.get(j, i)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Pairs actually scored (empty references are skipped).
    pub pairs: usize,
}

/// Numerator used for an n-gram order (n > 1) with no clipped matches.
pub const BLEU_ZERO_MATCH_EPSILON: f64 = 0.1;
pub const ROUGE_BETA: f64 = 1.2;

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Corpus BLEU-4 (clipped n-gram precision, brevity penalty) and mean
/// ROUGE-L F-measure, on whitespace tokens.
pub fn caption_overlap_metrics(predictions: &[String], references: &[String]) -> Result<CaptionMetrics> {
    if predictions.len() != references.len() {
        return Err(SlipError::Argument(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    let mut rouge = 0.0;
    let mut pairs = 0;
    for (i, (p, r)) in predictions.iter().zip(references).enumerate() {
        let rt: Vec<&str> = r.split_whitespace().collect();
        if rt.is_empty() {
            log::warn!("skipping caption pair {i}: empty reference");
            continue;
        }
        let pt: Vec<&str> = p.split_whitespace().collect();
        pairs += 1;
        cand_len += pt.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let pc = ngrams(&pt, n);
            let rc = ngrams(&rt, n);
            totals[n - 1] += pc.values().sum::<usize>();
            matches[n - 1] += pc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
        }
        let l = lcs(&pt, &rt) as f64;
        if l > 0.0 {
            let (prec, rec) = (l / pt.len() as f64, l / rt.len() as f64);
            let b2 = ROUGE_BETA * ROUGE_BETA;
            rouge += (1.0 + b2) * prec * rec / (rec + b2 * prec);
        }
    }
    if pairs == 0 {
        return Err(SlipError::Argument(
            "no caption pairs with a non-empty reference".into(),
        ));
    }
    let bleu4 = if cand_len == 0 || matches[0] == 0 {
        0.0
    } else {
        // Orders with no candidate n-grams carry no evidence and are left out
        // of the geometric mean.
        let logs: Vec<f64> = (0..4)
            .filter(|&i| totals[i] > 0)
            .map(|i| {
                let m = if matches[i] == 0 {
                    BLEU_ZERO_MATCH_EPSILON
                } else {
                    matches[i] as f64
                };
                (m / totals[i] as f64).ln()
            })
            .collect();
        let bp = if cand_len > ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / cand_len as f64).exp()
        };
        bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    };
    Ok(CaptionMetrics {
        bleu4,
        rouge_l: rouge / pairs as f64,
        pairs,
    })
}

/// Exact two-sided test is used up to this many non-zero differences.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    pub significant: bool,
}

/// Mid-ranks of `|d|`, doubled so tied ranks stay integral.
fn doubled_ranks(d: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, times two.
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of sign assignments giving each doubled positive-rank sum.
pub fn signed_rank_counts(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided exact p-value from enumeration counts: twice the smaller tail at
/// the observed doubled `W⁺`, capped at 1.
pub fn exact_p_from_counts(counts: &[u64], observed: usize, n: usize) -> f64 {
    let lo: u64 = counts[..=observed].iter().sum();
    let hi: u64 = counts[observed..].iter().sum();
    (2.0 * lo.min(hi) as f64 / 2f64.powi(n as i32)).min(1.0)
}

/// Paired Wilcoxon signed-rank test of `a` against `b`. Zero differences are
/// dropped and tied magnitudes mid-ranked; exact for up to
/// [`WILCOXON_EXACT_MAX`] pairs, otherwise a normal approximation with tie
/// and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(SlipError::Argument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(SlipError::Argument("paired samples must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(SlipError::UndefinedTest("every paired difference is zero".into()));
    }
    let (ranks, ties) = doubled_ranks(&d);
    let wp2: u64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = ranks.iter().sum();
    let (w_plus, w_minus) = (wp2 as f64 / 2.0, (total2 - wp2) as f64 / 2.0);
    let exact = n <= WILCOXON_EXACT_MAX;
    let p_value = if exact {
        exact_p_from_counts(&signed_rank_counts(&ranks), wp2 as usize, n)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj).sqrt();
        if sd == 0.0 {
            1.0
        } else {
            let diff = w_plus - mean;
            let z = (diff.abs() - 0.5).max(0.0) / sd;
            let normal = Normal::standard();
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        significant: p_value < 0.05,
    })
}

/// Normal-approximation p-value regardless of sample size (for cross-checks).
pub fn wilcoxon_normal_p(a: &[f64], b: &[f64]) -> Result<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(SlipError::UndefinedTest("every paired difference is zero".into()));
    }
    let (ranks, ties) = doubled_ranks(&d);
    let nf = d.len() as f64;
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, &r)| r as f64 / 2.0)
        .sum();
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj).sqrt();
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
    Ok((2.0 * Normal::standard().sf(z)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_small_exact() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 5]).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.p_value, 0.0625);
        assert!(r.exact);
        let swapped = wilcoxon_signed_rank(&[0.0; 5], &a).unwrap();
        assert_eq!(swapped.p_value, r.p_value);
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(SlipError::UndefinedTest(_))));
        assert!(wilcoxon_signed_rank(&a, &[0.0; 4]).is_err());
    }

    #[test]
    fn bleu_and_rouge_edges() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let same = caption_overlap_metrics(&s(&["a b c d e"]), &s(&["a b c d e"])).unwrap();
        assert_eq!((same.bleu4, same.rouge_l), (1.0, 1.0));
        let disjoint = caption_overlap_metrics(&s(&["x y z w"]), &s(&["a b c d"])).unwrap();
        assert_eq!((disjoint.bleu4, disjoint.rouge_l), (0.0, 0.0));
        let short = caption_overlap_metrics(&s(&["a b c d e"]), &s(&["a b c d e f g"])).unwrap();
        assert!((short.bleu4 - (1.0 - 7.0 / 5.0f64).exp()).abs() < 1e-12);
        let skipped = caption_overlap_metrics(&s(&["a", "b"]), &s(&["a", ""])).unwrap();
        assert_eq!(skipped.pairs, 1);
    }

    #[test]
    fn f1_and_accuracy() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1]), 1.0);
        // class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 1, fp 1, fn 0 -> 2/3
        assert!((macro_f1(&[0, 1, 1], &[0, 0, 1]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn prototype_tie_break_and_recall() {
        let protos = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(nearest_prototype(&f, &protos).unwrap(), vec![0, 2]);
        let e = Matrix::identity(3);
        let r = recall_at_k(&e, &e, 1).unwrap();
        assert_eq!((r.sensor_to_text, r.text_to_sensor), (1.0, 1.0));
        assert!(recall_at_k(&e, &e, 4).is_err());
    }
}
