use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SlipError;

/// Sampling-rate class of a series; selects the candidate patch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyClass {
    Daily,
    Hourly,
    Minute,
    Second,
}

impl FrequencyClass {
    pub const ALL: [FrequencyClass; 4] = [
        FrequencyClass::Daily,
        FrequencyClass::Hourly,
        FrequencyClass::Minute,
        FrequencyClass::Second,
    ];

    /// Allowed patch sizes, ascending.
    pub fn allowed_patch_sizes(self) -> &'static [usize] {
        match self {
            FrequencyClass::Daily => &[16, 32],
            FrequencyClass::Hourly => &[6, 8, 16, 24, 32, 64],
            FrequencyClass::Minute => &[16, 24, 128],
            FrequencyClass::Second => &[4, 6, 8, 12, 16, 20, 25, 32, 64, 128],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrequencyClass::Daily => "daily",
            FrequencyClass::Hourly => "hourly",
            FrequencyClass::Minute => "minute",
            FrequencyClass::Second => "second",
        }
    }
}

impl fmt::Display for FrequencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrequencyClass {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "daily" | "day" | "d" => Ok(FrequencyClass::Daily),
            "hourly" | "hour" | "h" => Ok(FrequencyClass::Hourly),
            "minute" | "min" | "minutely" | "t" => Ok(FrequencyClass::Minute),
            "second" | "sec" | "s" => Ok(FrequencyClass::Second),
            other => Err(SlipError::Config(format!("unknown frequency tag {other:?}"))),
        }
    }
}

/// Picks the allowed patch size whose token count `ceil(length / ps)` is
/// closest to `target_tokens`; ties go to the smaller patch.
pub fn patch_size_for(frequency: FrequencyClass, length: usize, target_tokens: usize) -> Result<usize, SlipError> {
    if length == 0 || target_tokens == 0 {
        return Err(SlipError::Argument(format!(
            "patch_size_for needs length >= 1 and target_tokens >= 1 (got {length}, {target_tokens})"
        )));
    }
    let best = frequency
        .allowed_patch_sizes()
        .iter()
        .copied()
        .min_by_key(|&ps| (length.div_ceil(ps).abs_diff(target_tokens), ps))
        .expect("allowed sets are non-empty");
    Ok(best)
}

/// Parses a frequency tag and applies [`patch_size_for`].
pub fn patch_size_for_tag(tag: &str, length: usize, target_tokens: usize) -> Result<usize, SlipError> {
    patch_size_for(tag.parse()?, length, target_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive scan with an explicit tie rule, independent of `min_by_key`.
    fn brute(freq: FrequencyClass, length: usize, target: usize) -> usize {
        let mut best = usize::MAX;
        let mut best_dist = usize::MAX;
        for &ps in freq.allowed_patch_sizes() {
            let tokens = (length + ps - 1) / ps;
            let dist = if tokens > target {
                tokens - target
            } else {
                target - tokens
            };
            if dist < best_dist || (dist == best_dist && ps < best) {
                best = ps;
                best_dist = dist;
            }
        }
        best
    }

    #[test]
    fn worked_examples() {
        assert_eq!(patch_size_for(FrequencyClass::Hourly, 720, 24).unwrap(), 32);
        assert_eq!(patch_size_for(FrequencyClass::Daily, 64, 4).unwrap(), 16);
        assert_eq!(patch_size_for(FrequencyClass::Second, 128, 8).unwrap(), 16);
    }

    #[test]
    fn unknown_tag_is_config_error() {
        let err = patch_size_for_tag("weekly", 64, 4).unwrap_err();
        assert!(matches!(err, SlipError::Config(_)));
        assert_eq!(patch_size_for_tag("hourly", 720, 24).unwrap(), 32);
    }

    #[test]
    fn zero_arguments_rejected() {
        assert!(patch_size_for(FrequencyClass::Daily, 0, 4).is_err());
        assert!(patch_size_for(FrequencyClass::Daily, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn total_and_matches_brute_force(fi in 0usize..4, length in 1usize..5000, target in 1usize..200) {
            let freq = FrequencyClass::ALL[fi];
            let ps = patch_size_for(freq, length, target).unwrap();
            prop_assert!(freq.allowed_patch_sizes().contains(&ps));
            prop_assert_eq!(ps, brute(freq, length, target));
        }
    }
}
