//! Alignment and uniformity of embeddings on the unit hypersphere.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SlipError};
use crate::model::{PreparedSensor, SlipModel};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub alpha: f64,
    pub t: f64,
    /// Number of samples in the fixed probe set.
    pub probe_size: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            t: 2.0,
            probe_size: 64,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.t > 0.0) {
            return Err(SlipError::Config("geometry alpha and t must be positive".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over pairs of `‖xᵢ − yᵢ‖^α`.
pub fn alignment(x: &Matrix, y: &Matrix, alpha: f64) -> Result<f64> {
    if x.shape() != y.shape() || x.rows() == 0 {
        return Err(SlipError::Argument(format!(
            "alignment needs equal non-empty shapes, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let total: f64 = (0..x.rows())
        .map(|i| sq_dist(x.row(i), y.row(i)).sqrt().powf(alpha))
        .sum();
    Ok(total / x.rows() as f64)
}

/// `log` of the mean over unordered distinct pairs of `exp(−t‖zᵢ − zⱼ‖²)`.
pub fn uniformity(z: &Matrix, t: f64) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(SlipError::Argument(format!(
            "uniformity needs at least 2 rows, got {n}"
        )));
    }
    // Log-sum-exp over pairs keeps the result finite for well-spread points.
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            exps.push(-t * sq_dist(z.row(i), z.row(j)));
        }
    }
    let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = exps.iter().map(|e| (e - m).exp()).sum();
    Ok(m + (s / exps.len() as f64).ln())
}

/// Fixed held-out sensor/caption pairs for monitoring geometry.
#[derive(Clone, Debug)]
pub struct GeometryProbe {
    pub sensors: Vec<PreparedSensor>,
    pub captions: Vec<String>,
}

impl GeometryProbe {
    /// The first `n` samples of `dataset` with their canonical captions.
    pub fn from_dataset(model: &SlipModel, dataset: &Dataset, n: usize) -> Result<Self> {
        let n = n.min(dataset.len());
        if n < 2 {
            return Err(SlipError::Argument("geometry probe needs at least 2 samples".into()));
        }
        let samples = &dataset.samples()[..n];
        Ok(Self {
            sensors: samples
                .iter()
                .map(|s| model.prepare_sensor(&s.series))
                .collect::<Result<_>>()?,
            captions: samples.iter().map(|s| s.captions.caption.clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub step: usize,
    pub sensor_uniformity: f64,
    pub text_uniformity: f64,
    pub alignment: f64,
}

/// Geometry of the contrastive embeddings on the probe set.
pub fn geometry_report(
    model: &SlipModel,
    probe: &GeometryProbe,
    config: &GeometryConfig,
    step: usize,
) -> Result<GeometryRecord> {
    config.validate()?;
    let refs: Vec<&PreparedSensor> = probe.sensors.iter().collect();
    let sensor = model.sensor_features(&refs, 32)?.cls_embedding;
    let texts: Vec<&str> = probe.captions.iter().map(String::as_str).collect();
    let (_, text) = model.text_features(&texts, 32)?;
    Ok(GeometryRecord {
        step,
        sensor_uniformity: uniformity(&sensor, config.t)?,
        text_uniformity: uniformity(&text, config.t)?,
        alignment: alignment(&sensor, &text, config.alpha)?,
    })
}
