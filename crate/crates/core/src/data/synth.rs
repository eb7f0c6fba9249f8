//! Synthetic sensor-caption pairs with attributes that are recoverable from the
//! signal by construction.
//!
//! Every channel is `offset + gain · (trend + cycle + noise + spike)` where
//! - the trend moves by ±3 units over the series (0 when flat),
//! - the cycle is a unit-amplitude sinusoid with one of the vocabulary periods,
//! - the noise is uniform with half-width 0.05 (low) or 0.4 (high),
//! - a spike adds +8 at one interior timestep,
//! - gains lie in `[0.8, 1.2]`.
//!
//! Multivariate series are either in sync (shared phase, noise and spike
//! position) or out of sync (channels after the first are in anti-phase with
//! independent noise and spike positions). [`extract_attributes`] inverts the
//! construction with fixed thresholds that sit between the attainable ranges.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frequency::FrequencyClass;
use super::series::{CaptionRecord, SensorSeries};
use crate::error::{Result, SlipError};

const TREND_SPAN: f64 = 3.0;
const SPIKE_HEIGHT: f64 = 8.0;
const LOW_NOISE: f64 = 0.05;
const HIGH_NOISE: f64 = 0.4;
const SYNC_JITTER: f64 = 0.005;
const GAIN_RANGE: (f64, f64) = (0.8, 1.2);

const SPIKE_DETECT: f64 = 3.0;
const TREND_DETECT: f64 = 1.2;
const CYCLE_DETECT: f64 = 0.5;
const NOISE_DETECT: f64 = 0.1;
const SYNC_DETECT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Rising,
    Falling,
    Flat,
}

impl Trend {
    pub fn word(self) -> &'static str {
        match self {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::Flat => "flat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Low,
    High,
}

impl NoiseLevel {
    fn half_width(self) -> f64 {
        match self {
            NoiseLevel::Low => LOW_NOISE,
            NoiseLevel::High => HIGH_NOISE,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            NoiseLevel::Low => "low noise",
            NoiseLevel::High => "high noise",
        }
    }
}

/// Cross-channel relationship of a multivariate series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sync {
    InSync,
    OutOfSync,
}

impl Sync {
    pub fn phrase(self) -> &'static str {
        match self {
            Sync::InSync => "in sync",
            Sync::OutOfSync => "out of sync",
        }
    }
}

/// The content a caption describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub trend: Trend,
    /// Cycle length in timesteps, `None` when aperiodic.
    pub period: Option<usize>,
    pub spike: bool,
    pub noise: NoiseLevel,
    /// `None` for univariate series.
    pub sync: Option<Sync>,
}

impl fmt::Display for Attributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_caption(self, CaptionTemplate::Canonical))
    }
}

/// Caption phrasings. `Canonical` and the three paraphrase templates are used
/// for training captions; `Prompt` never appears in generated captions and is
/// reserved for zero-shot class prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionTemplate {
    Canonical,
    Paraphrase1,
    Paraphrase2,
    Paraphrase3,
    Prompt,
}

impl CaptionTemplate {
    pub const PARAPHRASES: [CaptionTemplate; 3] = [
        CaptionTemplate::Paraphrase1,
        CaptionTemplate::Paraphrase2,
        CaptionTemplate::Paraphrase3,
    ];
}

fn cycle_phrase(period: Option<usize>) -> String {
    match period {
        Some(p) => format!("{p}-step cycle"),
        None => "no cycle".to_string(),
    }
}

fn spike_phrase(spike: bool) -> &'static str {
    if spike {
        "one spike"
    } else {
        "no spike"
    }
}

pub fn render_caption(a: &Attributes, template: CaptionTemplate) -> String {
    let trend = a.trend.word();
    let cycle = cycle_phrase(a.period);
    let spike = spike_phrase(a.spike);
    let noise = a.noise.phrase();
    match template {
        CaptionTemplate::Canonical => {
            let sync = a.sync.map(|s| format!(", {}", s.phrase())).unwrap_or_default();
            format!("{trend} trend, {cycle}, {spike}, {noise}{sync}")
        }
        CaptionTemplate::Paraphrase1 => {
            let sync = a.sync.map(|s| format!("; {}", s.phrase())).unwrap_or_default();
            format!("a {trend} signal with {cycle}, {spike} and {noise}{sync}")
        }
        CaptionTemplate::Paraphrase2 => {
            let sync = a.sync.map(|s| format!(", {}", s.phrase())).unwrap_or_default();
            format!("{noise}, {spike}, {cycle}, {trend} trend{sync}")
        }
        CaptionTemplate::Paraphrase3 => {
            let sync = a.sync.map(|s| format!("; {}", s.phrase())).unwrap_or_default();
            format!("{trend}; {cycle}; {spike}; {noise}{sync}")
        }
        CaptionTemplate::Prompt => {
            let sync = a.sync.map(|s| format!(", channels {}", s.phrase())).unwrap_or_default();
            format!("{spike} on a {trend} series with {noise} and {cycle}{sync}")
        }
    }
}

/// Values each attribute may take; a single-element list forces that value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeVocabulary {
    pub trends: Vec<Trend>,
    /// Cycle lengths; serialised with 0 standing for "no cycle".
    #[serde(with = "period_list")]
    pub periods: Vec<Option<usize>>,
    pub spikes: Vec<bool>,
    pub noise_levels: Vec<NoiseLevel>,
    pub syncs: Vec<Sync>,
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self {
            trends: vec![Trend::Rising, Trend::Falling, Trend::Flat],
            periods: vec![None, Some(8), Some(16), Some(32)],
            spikes: vec![false, true],
            noise_levels: vec![NoiseLevel::Low, NoiseLevel::High],
            syncs: vec![Sync::InSync, Sync::OutOfSync],
        }
    }
}

mod period_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|p| p.unwrap_or(0)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        Ok(Vec::<usize>::deserialize(d)?
            .into_iter()
            .map(|p| (p > 0).then_some(p))
            .collect())
    }
}

/// Parameters of one synthetic source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub min_channels: usize,
    pub max_channels: usize,
    /// Candidate lengths; each must be a multiple of every vocabulary period.
    pub lengths: Vec<usize>,
    pub frequency: FrequencyClass,
    pub vocabulary: AttributeVocabulary,
    /// Every spike reaches at least this |z-score| within its channel.
    pub spike_z_threshold: f64,
    /// Paraphrases per caption (0..=3).
    pub num_paraphrases: usize,
    /// Probability that a non-spike timestep is unobserved.
    pub missing_rate: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            min_channels: 1,
            max_channels: 3,
            lengths: vec![128, 192, 256],
            frequency: FrequencyClass::Hourly,
            vocabulary: AttributeVocabulary::default(),
            spike_z_threshold: 3.0,
            num_paraphrases: 3,
            missing_rate: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vocabulary;
        if v.trends.is_empty() || v.periods.is_empty() || v.spikes.is_empty() || v.noise_levels.is_empty() {
            return Err(SlipError::Config(
                "attribute vocabulary has an empty attribute list".into(),
            ));
        }
        if self.max_channels > 1 && v.syncs.is_empty() {
            return Err(SlipError::Config(
                "multivariate generation needs a non-empty sync vocabulary".into(),
            ));
        }
        if self.min_channels == 0 || self.min_channels > self.max_channels {
            return Err(SlipError::Config(format!(
                "invalid channel range {}..={}",
                self.min_channels, self.max_channels
            )));
        }
        if self.lengths.is_empty() {
            return Err(SlipError::Config("no candidate lengths".into()));
        }
        for &len in &self.lengths {
            if len < 32 {
                return Err(SlipError::Config(format!("length {len} is below the minimum of 32")));
            }
            for p in v.periods.iter().flatten() {
                if *p < 4 || len % p != 0 || 2 * p > len {
                    return Err(SlipError::Config(format!(
                        "period {p} must be >= 4, divide length {len} and fit at least two cycles"
                    )));
                }
            }
        }
        if self.num_paraphrases > CaptionTemplate::PARAPHRASES.len() {
            return Err(SlipError::Config(format!(
                "at most {} paraphrases are available",
                CaptionTemplate::PARAPHRASES.len()
            )));
        }
        if !(0.0..0.5).contains(&self.missing_rate) {
            return Err(SlipError::Config("missing_rate must lie in [0, 0.5)".into()));
        }
        if self.spike_z_threshold <= 0.0 || self.spike_z_threshold > 3.5 {
            return Err(SlipError::Config(
                "spike_z_threshold must lie in (0, 3.5]; larger values are not guaranteed by the generator".into(),
            ));
        }
        Ok(())
    }
}

/// A generated pair together with the attributes its caption describes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub series: SensorSeries,
    pub caption: CaptionRecord,
    pub attributes: Attributes,
}

/// Deterministic in `seed`: the same `(seed, spec)` always yields identical output.
pub fn generate_synthetic_pair(seed: u64, spec: &GeneratorSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &spec.vocabulary;
    let channels = rng.random_range(spec.min_channels..=spec.max_channels);
    let len = *spec.lengths.choose(&mut rng).expect("validated non-empty");
    let attributes = Attributes {
        trend: *v.trends.choose(&mut rng).expect("validated"),
        period: *v.periods.choose(&mut rng).expect("validated"),
        spike: *v.spikes.choose(&mut rng).expect("validated"),
        noise: *v.noise_levels.choose(&mut rng).expect("validated"),
        sync: if channels > 1 {
            Some(*v.syncs.choose(&mut rng).expect("validated"))
        } else {
            None
        },
    };

    let slope = match attributes.trend {
        Trend::Rising => TREND_SPAN,
        Trend::Falling => -TREND_SPAN,
        Trend::Flat => 0.0,
    };
    let base_phase = rng.random_range(0.0..2.0 * PI);
    let half_width = attributes.noise.half_width();
    let shared_noise: Vec<f64> = (0..len).map(|_| rng.random_range(-half_width..half_width)).collect();
    let spike_range = len / 8..len - len / 8;
    let shared_spike = rng.random_range(spike_range.clone());
    let in_sync = attributes.sync != Some(Sync::OutOfSync);

    let mut values = Vec::with_capacity(channels);
    let mut spike_positions = Vec::with_capacity(channels);
    for c in 0..channels {
        let gain = rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1);
        let offset = rng.random_range(-2.0..2.0);
        let phase = if in_sync || c == 0 { base_phase } else { base_phase + PI };
        let noise: Vec<f64> = if in_sync {
            shared_noise
                .iter()
                .map(|n| {
                    n + if channels > 1 {
                        rng.random_range(-SYNC_JITTER..SYNC_JITTER)
                    } else {
                        0.0
                    }
                })
                .collect()
        } else if c == 0 {
            shared_noise.clone()
        } else {
            (0..len).map(|_| rng.random_range(-half_width..half_width)).collect()
        };
        let spike_at = if in_sync || c == 0 {
            shared_spike
        } else {
            rng.random_range(spike_range.clone())
        };
        spike_positions.push(spike_at);
        let denom = (len - 1).max(1) as f64;
        let ch: Vec<f64> = (0..len)
            .map(|t| {
                let u = t as f64 / denom - 0.5;
                let mut x = slope * u + noise[t];
                if let Some(p) = attributes.period {
                    x += (2.0 * PI * t as f64 / p as f64 + phase).sin();
                }
                if attributes.spike && t == spike_at {
                    x += SPIKE_HEIGHT;
                }
                // Stored on disk as f32; round here so in-memory and loaded data agree.
                (offset + gain * x) as f32 as f64
            })
            .collect();
        values.push(ch);
    }

    let mut mask = vec![vec![true; len]; channels];
    if spec.missing_rate > 0.0 {
        for (c, m) in mask.iter_mut().enumerate() {
            let keep = spike_positions[c];
            for (t, obs) in m.iter_mut().enumerate() {
                if t + 1 >= keep && t <= keep + 1 {
                    continue;
                }
                if rng.random::<f64>() < spec.missing_rate {
                    *obs = false;
                }
            }
        }
    }

    let series = SensorSeries {
        values,
        mask,
        time_index: (0..len as i64).collect(),
        frequency: spec.frequency,
        channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
    };
    let paraphrases = CaptionTemplate::PARAPHRASES[..spec.num_paraphrases]
        .iter()
        .map(|&t| render_caption(&attributes, t))
        .collect();
    let caption = CaptionRecord::new(render_caption(&attributes, CaptionTemplate::Canonical), paraphrases)?;
    Ok(SyntheticPair {
        series,
        caption,
        attributes,
    })
}

/// Weighted least squares via the normal equations (Gaussian elimination with
/// partial pivoting). Returns coefficients and the weighted residual vector.
fn least_squares(basis: &[Vec<f64>], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = basis.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = (0..y.len()).map(|t| w[t] * basis[i][t] * basis[j][t]).sum();
        }
        a[i][k] = (0..y.len()).map(|t| w[t] * basis[i][t] * y[t]).sum();
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        let d = a[col][col];
        if d.abs() < 1e-12 {
            continue;
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col] / d;
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k)
        .map(|i| if a[i][i].abs() < 1e-12 { 0.0 } else { a[i][k] / a[i][i] })
        .collect();
    let resid = (0..y.len())
        .map(|t| y[t] - (0..k).map(|i| coef[i] * basis[i][t]).sum::<f64>())
        .collect();
    (coef, resid)
}

struct ChannelFit {
    slope_total: f64,
    period: Option<usize>,
    noise_std: f64,
    spike: bool,
    detrended: Vec<f64>,
}

fn fit_channel(values: &[f64], mask: &[bool], candidate_periods: &[usize]) -> ChannelFit {
    let len = values.len();
    let mut x = values.to_vec();
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    let mut best: Option<(usize, f64)> = None;
    for t in 1..len.saturating_sub(1) {
        if !(mask[t - 1] && mask[t] && mask[t + 1]) {
            continue;
        }
        let d = (x[t] - 0.5 * (x[t - 1] + x[t + 1])).abs();
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((t, d));
        }
    }
    let spike = matches!(best, Some((_, d)) if d > SPIKE_DETECT);
    if let (true, Some((t, _))) = (spike, best) {
        x[t] = 0.5 * (x[t - 1] + x[t + 1]);
    }

    let denom = (len - 1).max(1) as f64;
    let ones = vec![1.0; len];
    let ramp: Vec<f64> = (0..len).map(|t| t as f64 / denom - 0.5).collect();
    let (line_coef, line_resid) = least_squares(&[ones.clone(), ramp.clone()], &x, &w);
    let sse = |r: &[f64]| r.iter().zip(&w).map(|(v, wt)| wt * v * v).sum::<f64>();

    let mut chosen: Option<(usize, Vec<f64>, Vec<f64>, f64)> = None;
    for &p in candidate_periods {
        let s: Vec<f64> = (0..len).map(|t| (2.0 * PI * t as f64 / p as f64).sin()).collect();
        let c: Vec<f64> = (0..len).map(|t| (2.0 * PI * t as f64 / p as f64).cos()).collect();
        let (coef, resid) = least_squares(&[ones.clone(), ramp.clone(), s, c], &x, &w);
        let e = sse(&resid);
        if chosen.as_ref().is_none_or(|(_, _, _, be)| e < *be) {
            chosen = Some((p, coef, resid, e));
        }
    }
    let (period, slope_total, resid) = match chosen {
        Some((p, coef, resid, _)) if coef[2].hypot(coef[3]) > CYCLE_DETECT => (Some(p), coef[1], resid),
        _ => (None, line_coef[1], line_resid.clone()),
    };
    let n_obs = w.iter().sum::<f64>().max(1.0);
    let mean_r = resid.iter().zip(&w).map(|(r, wt)| r * wt).sum::<f64>() / n_obs;
    let noise_std = (resid
        .iter()
        .zip(&w)
        .map(|(r, wt)| wt * (r - mean_r) * (r - mean_r))
        .sum::<f64>()
        / n_obs)
        .sqrt();
    ChannelFit {
        slope_total,
        period,
        noise_std,
        spike,
        detrended: line_resid,
    }
}

fn weighted_corr(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let n = w.iter().sum::<f64>().max(1.0);
    let ma = a.iter().zip(w).map(|(x, wt)| x * wt).sum::<f64>() / n;
    let mb = b.iter().zip(w).map(|(x, wt)| x * wt).sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for t in 0..a.len() {
        let (da, db) = (a[t] - ma, b[t] - mb);
        sab += w[t] * da * db;
        saa += w[t] * da * da;
        sbb += w[t] * db * db;
    }
    sab / (saa.sqrt() * sbb.sqrt()).max(1e-12)
}

/// Rule-based inverse of [`generate_synthetic_pair`], operating on raw
/// (un-normalised) values. `candidate_periods` lists the cycle lengths to test.
pub fn extract_attributes(series: &SensorSeries, candidate_periods: &[usize]) -> Attributes {
    let fits: Vec<ChannelFit> = series
        .values
        .iter()
        .zip(&series.mask)
        .map(|(v, m)| fit_channel(v, m, candidate_periods))
        .collect();
    let primary = &fits[0];
    let trend = if primary.slope_total > TREND_DETECT {
        Trend::Rising
    } else if primary.slope_total < -TREND_DETECT {
        Trend::Falling
    } else {
        Trend::Flat
    };
    let noise = if primary.noise_std > NOISE_DETECT {
        NoiseLevel::High
    } else {
        NoiseLevel::Low
    };
    let sync = if fits.len() > 1 {
        let together = fits[1..].iter().enumerate().all(|(i, f)| {
            let w: Vec<f64> = series.mask[0]
                .iter()
                .zip(&series.mask[i + 1])
                .map(|(&a, &b)| if a && b { 1.0 } else { 0.0 })
                .collect();
            weighted_corr(&primary.detrended, &f.detrended, &w) > SYNC_DETECT
        });
        Some(if together { Sync::InSync } else { Sync::OutOfSync })
    } else {
        None
    };
    Attributes {
        trend,
        period: primary.period,
        spike: fits.iter().any(|f| f.spike),
        noise,
        sync,
    }
}

/// Periods named by a vocabulary, for use with [`extract_attributes`].
pub fn vocabulary_periods(v: &AttributeVocabulary) -> Vec<usize> {
    let mut p: Vec<usize> = v.periods.iter().flatten().copied().collect();
    p.sort_unstable();
    p.dedup();
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls_slope(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mt = (n - 1.0) / 2.0;
        let mv = v.iter().sum::<f64>() / n;
        let num: f64 = v.iter().enumerate().map(|(t, x)| (t as f64 - mt) * (x - mv)).sum();
        let den: f64 = (0..v.len()).map(|t| (t as f64 - mt).powi(2)).sum();
        num / den
    }

    #[test]
    fn forced_rising_trend_has_positive_slope_and_caption_term() {
        let spec = GeneratorSpec {
            min_channels: 1,
            max_channels: 1,
            vocabulary: AttributeVocabulary {
                trends: vec![Trend::Rising],
                ..Default::default()
            },
            ..Default::default()
        };
        let pair = generate_synthetic_pair(0, &spec).unwrap();
        assert!(ls_slope(&pair.series.values[0]) > 0.0);
        assert!(pair.caption.caption.contains("rising"));
        assert_eq!(pair.series.num_channels(), 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = GeneratorSpec::default();
        let a = generate_synthetic_pair(42, &spec).unwrap();
        let b = generate_synthetic_pair(42, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_pair(43, &spec).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn forced_spike_exceeds_declared_z_threshold() {
        let spec = GeneratorSpec {
            vocabulary: AttributeVocabulary {
                spikes: vec![true],
                ..Default::default()
            },
            ..Default::default()
        };
        let pair = generate_synthetic_pair(1, &spec).unwrap();
        for ch in &pair.series.values {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let max_z = ch.iter().map(|v| ((v - mean) / std).abs()).fold(0.0, f64::max);
            assert!(max_z > spec.spike_z_threshold, "max |z| {max_z}");
        }
    }

    #[test]
    fn empty_vocabulary_is_config_error() {
        let spec = GeneratorSpec {
            vocabulary: AttributeVocabulary {
                trends: vec![],
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_pair(0, &spec), Err(SlipError::Config(_))));
    }

    #[test]
    fn incompatible_length_and_period_rejected() {
        let spec = GeneratorSpec {
            lengths: vec![100],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn attributes_recovered_for_every_sample() {
        for missing_rate in [0.0, 0.2] {
            let spec = GeneratorSpec {
                lengths: vec![64, 128, 192, 256],
                max_channels: 4,
                missing_rate,
                ..Default::default()
            };
            let periods = vocabulary_periods(&spec.vocabulary);
            for seed in 0..600 {
                let pair = generate_synthetic_pair(seed, &spec).unwrap();
                let got = extract_attributes(&pair.series, &periods);
                assert_eq!(got, pair.attributes, "seed {seed} missing {missing_rate}");
            }
        }
    }

    #[test]
    fn templates_are_distinct_and_prompt_is_held_out() {
        let a = Attributes {
            trend: Trend::Falling,
            period: Some(16),
            spike: true,
            noise: NoiseLevel::High,
            sync: Some(Sync::OutOfSync),
        };
        let spec = GeneratorSpec::default();
        let prompt = render_caption(&a, CaptionTemplate::Prompt);
        let mut all = vec![render_caption(&a, CaptionTemplate::Canonical)];
        all.extend(CaptionTemplate::PARAPHRASES.iter().map(|&t| render_caption(&a, t)));
        assert_eq!(spec.num_paraphrases, 3);
        for (i, x) in all.iter().enumerate() {
            assert_ne!(x, &prompt);
            for y in &all[i + 1..] {
                assert_ne!(x, y);
            }
        }
        assert_eq!(
            all[0],
            "falling trend, 16-step cycle, one spike, high noise, out of sync"
        );
    }
}
