//! Contrastive and captioning objectives and how they combine.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::contrastive_forward;
use crate::error::{Result, SlipError};
use crate::tensor::Matrix;

/// Rows must have unit norm to within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Joint,
    CaptionOnly,
    ContrastiveOnly,
    /// Joint loss after deranging the caption pairing.
    RandomPaired,
}

impl std::str::FromStr for LossMode {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(LossMode::Joint),
            "caption_only" => Ok(LossMode::CaptionOnly),
            "contrastive_only" => Ok(LossMode::ContrastiveOnly),
            "random_paired" => Ok(LossMode::RandomPaired),
            other => Err(SlipError::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionReduction {
    /// Mean over a caption's tokens, then over the batch.
    Mean,
    /// Sum over a caption's tokens, then mean over the batch.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive_weight: f64,
    pub caption_weight: f64,
    pub mode: LossMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive_weight: 1.0,
            caption_weight: 1.0,
            mode: LossMode::Joint,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrastive_weight >= 0.0 && self.caption_weight >= 0.0) {
            return Err(SlipError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Effective `(contrastive, caption)` multipliers under the mode.
    pub fn effective(&self) -> (f64, f64) {
        match self.mode {
            LossMode::Joint | LossMode::RandomPaired => (self.contrastive_weight, self.caption_weight),
            LossMode::CaptionOnly => (0.0, self.caption_weight),
            LossMode::ContrastiveOnly => (self.contrastive_weight, 0.0),
        }
    }
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(SlipError::Argument(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE with temperature `sigma`: the sum of the sensor→text and
/// text→sensor mean negative log-likelihoods.
pub fn contrastive_loss(x: &Matrix, y: &Matrix, sigma: f64) -> Result<f64> {
    if x.shape() != y.shape() || x.rows() == 0 {
        return Err(SlipError::Argument(format!(
            "contrastive batch shapes {:?} and {:?} must match and be non-empty",
            x.shape(),
            y.shape()
        )));
    }
    if !(sigma > 0.0) {
        return Err(SlipError::Argument(format!("temperature {sigma} must be positive")));
    }
    check_unit_rows(x, "sensor embedding")?;
    check_unit_rows(y, "text embedding")?;
    Ok(contrastive_forward(x, y, 1.0 / sigma).0)
}

/// Mean negative log-likelihood of `targets` over positions where `mask` is set.
pub fn caption_loss(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(SlipError::Argument("logits, targets and mask lengths differ".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(SlipError::Argument("caption_loss with every position masked".into()));
    }
    let mut total = 0.0;
    for (r, (&t, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / count as f64)
}

pub fn total_loss(contrastive: f64, caption: f64, weights: &LossWeights) -> f64 {
    let (wc, wg) = weights.effective();
    wc * contrastive + wg * caption
}

/// Per-token weights that turn a summed token NLL into the configured caption
/// loss: `lengths[b]` is the number of predicted tokens of sample `b`.
pub fn caption_token_weights(lengths: &[usize], reduction: CaptionReduction) -> Vec<f64> {
    let b = lengths.len() as f64;
    lengths
        .iter()
        .flat_map(|&n| {
            let w = match reduction {
                CaptionReduction::Mean => 1.0 / (n as f64 * b),
                CaptionReduction::Sum => 1.0 / b,
            };
            std::iter::repeat_n(w, n)
        })
        .collect()
}

/// Uniformly random permutation without fixed points (rejection sampling).
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(SlipError::Argument(format!("no derangement of {n} element(s) exists")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return Ok(p);
        }
    }
}
