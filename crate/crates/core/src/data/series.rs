use serde::{Deserialize, Serialize};

use super::frequency::FrequencyClass;
use crate::error::{Result, SlipError};

/// Floor on the per-channel standard deviation used by [`normalize`].
pub const NORM_STD_FLOOR: f64 = 1e-6;

/// One multivariate time series, channel-major (`values[c][t]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSeries {
    pub values: Vec<Vec<f64>>,
    /// `true` where the timestep was observed.
    pub mask: Vec<Vec<bool>>,
    pub time_index: Vec<i64>,
    pub frequency: FrequencyClass,
    pub channel_names: Vec<String>,
}

impl SensorSeries {
    /// Fully observed series with time index `0..L`.
    pub fn from_values(values: Vec<Vec<f64>>, frequency: FrequencyClass) -> Result<Self> {
        let len = values.first().map_or(0, Vec::len);
        let mask = values.iter().map(|ch| vec![true; ch.len()]).collect();
        let channel_names = (0..values.len()).map(|c| format!("ch{c}")).collect();
        let s = Self {
            values,
            mask,
            time_index: (0..len as i64).collect(),
            frequency,
            channel_names,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.time_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_index.is_empty()
    }

    pub fn is_multivariate(&self) -> bool {
        self.num_channels() > 1
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.values.len();
        if c == 0 {
            return Err(SlipError::Argument("series needs at least one channel".into()));
        }
        let l = self.time_index.len();
        if l == 0 {
            return Err(SlipError::Argument("series needs at least one timestep".into()));
        }
        if self.mask.len() != c || self.channel_names.len() != c {
            return Err(SlipError::Argument(format!(
                "series has {c} value channels, {} mask channels and {} names",
                self.mask.len(),
                self.channel_names.len()
            )));
        }
        for (ch, (v, m)) in self.values.iter().zip(&self.mask).enumerate() {
            if v.len() != l || m.len() != l {
                return Err(SlipError::Argument(format!(
                    "channel {ch} has {} values and {} mask entries, expected {l}",
                    v.len(),
                    m.len()
                )));
            }
        }
        if self.time_index.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SlipError::Argument("time_index must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Caption text plus optional paraphrases of the same content.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption: String,
    #[serde(default)]
    pub paraphrases: Vec<String>,
}

impl CaptionRecord {
    pub fn new(caption: impl Into<String>, paraphrases: Vec<String>) -> Result<Self> {
        let r = Self {
            caption: caption.into(),
            paraphrases,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption.is_empty() || self.paraphrases.iter().any(String::is_empty) {
            return Err(SlipError::Argument("captions and paraphrases must be non-empty".into()));
        }
        Ok(())
    }

    /// Caption followed by every paraphrase.
    pub fn variants(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str()).chain(self.paraphrases.iter().map(String::as_str))
    }

    pub fn num_variants(&self) -> usize {
        1 + self.paraphrases.len()
    }
}

/// Per-sample, per-channel z-score over observed positions (population std,
/// floored at [`NORM_STD_FLOOR`]); unobserved positions become 0.
pub fn normalize(series: &SensorSeries) -> SensorSeries {
    let mut out = series.clone();
    for (vals, mask) in out.values.iter_mut().zip(&series.mask) {
        let observed: Vec<f64> = vals.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        if observed.is_empty() {
            vals.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(NORM_STD_FLOOR);
        for (v, &m) in vals.iter_mut().zip(mask) {
            *v = if m { (*v - mean) / std } else { 0.0 };
        }
    }
    out
}
