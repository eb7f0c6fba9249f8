//! On-disk corpus layout (`manifest.json` plus one binary file per series) and
//! stratified batch sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frequency::FrequencyClass;
use super::series::{CaptionRecord, SensorSeries};
use super::synth::{generate_synthetic_pair, Attributes, GeneratorSpec};
use crate::error::{Result, SlipError};

pub const SERIES_MAGIC: [u8; 4] = *b"SLPS";
pub const SERIES_VERSION: u16 = 1;
pub const SERIES_HEADER_LEN: usize = 16;
pub const MANIFEST_FORMAT: &str = "slip-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Encodes a series: 16-byte header (`SLPS`, u16 version, u16 reserved,
/// u32 channels, u32 length; little-endian) followed by `C·L` f32 values,
/// `C·L` f32 mask entries (1.0 observed, 0.0 missing), and `L` i64 time
/// indices, all row-major and little-endian.
pub fn encode_series(series: &SensorSeries) -> Vec<u8> {
    let c = series.num_channels();
    let l = series.len();
    let mut out = Vec::with_capacity(SERIES_HEADER_LEN + 8 * c * l + 8 * l);
    out.extend_from_slice(&SERIES_MAGIC);
    out.extend_from_slice(&SERIES_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    for ch in &series.values {
        for &v in ch {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for ch in &series.mask {
        for &m in ch {
            out.extend_from_slice(&(if m { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
    }
    for &t in &series.time_index {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_series`]; frequency and channel names live in the manifest.
pub fn decode_series(bytes: &[u8], frequency: FrequencyClass, channel_names: Vec<String>) -> Result<SensorSeries> {
    if bytes.len() < SERIES_HEADER_LEN || bytes[..4] != SERIES_MAGIC {
        return Err(SlipError::Format("series file has no SLPS header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SERIES_VERSION {
        return Err(SlipError::Format(format!(
            "unsupported series format version {version}"
        )));
    }
    let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let l = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = SERIES_HEADER_LEN + 8 * c * l + 8 * l;
    if bytes.len() != expected {
        return Err(SlipError::Format(format!(
            "series file of {} bytes does not match header ({c} channels, length {l}, expected {expected} bytes)",
            bytes.len()
        )));
    }
    let mut pos = SERIES_HEADER_LEN;
    let f32_block = |pos: &mut usize| -> Vec<Vec<f32>> {
        (0..c)
            .map(|_| {
                (0..l)
                    .map(|_| {
                        let v = f32::from_le_bytes(bytes[*pos..*pos + 4].try_into().expect("4 bytes"));
                        *pos += 4;
                        v
                    })
                    .collect()
            })
            .collect()
    };
    let values = f32_block(&mut pos);
    let mask = f32_block(&mut pos);
    let time_index = (0..l)
        .map(|i| {
            let s = pos + 8 * i;
            i64::from_le_bytes(bytes[s..s + 8].try_into().expect("8 bytes"))
        })
        .collect();
    if channel_names.len() != c {
        return Err(SlipError::Format(format!(
            "manifest lists {} channel names for a {c}-channel series",
            channel_names.len()
        )));
    }
    let series = SensorSeries {
        values: values
            .into_iter()
            .map(|ch| ch.into_iter().map(f64::from).collect())
            .collect(),
        mask: mask
            .into_iter()
            .map(|ch| ch.into_iter().map(|m| m != 0.0).collect())
            .collect(),
        time_index,
        frequency,
        channel_names,
    };
    series.validate().map_err(|e| SlipError::Format(e.to_string()))?;
    Ok(series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub series_path: String,
    pub caption_record: CaptionRecord,
    pub frequency: FrequencyClass,
    pub num_channels: usize,
    pub length: usize,
    pub channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_samples: usize,
    pub num_multivariate: usize,
    pub num_univariate: usize,
    pub total_timepoints: usize,
    pub by_frequency: BTreeMap<String, usize>,
    pub num_distinct_captions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub stats: CorpusStats,
}

/// One loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub series: SensorSeries,
    pub captions: CaptionRecord,
    pub attributes: Option<Attributes>,
}

/// Immutable in-memory corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    multivariate: Vec<usize>,
    univariate: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(SlipError::Argument("dataset is empty".into()));
        }
        for s in &samples {
            s.series.validate()?;
            s.captions.validate()?;
        }
        let (multivariate, univariate) = (0..samples.len()).partition(|&i| samples[i].series.is_multivariate());
        Ok(Self {
            samples,
            multivariate,
            univariate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn stats(&self) -> CorpusStats {
        let mut by_frequency = BTreeMap::new();
        for s in &self.samples {
            *by_frequency.entry(s.series.frequency.to_string()).or_insert(0) += 1;
        }
        let distinct: BTreeSet<&str> = self.samples.iter().map(|s| s.captions.caption.as_str()).collect();
        CorpusStats {
            num_samples: self.samples.len(),
            num_multivariate: self.multivariate.len(),
            num_univariate: self.univariate.len(),
            total_timepoints: self
                .samples
                .iter()
                .map(|s| s.series.len() * s.series.num_channels())
                .sum(),
            by_frequency,
            num_distinct_captions: distinct.len(),
        }
    }

    /// Writes `manifest.json` and `series/NNNNNN.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<SampleManifest> {
        let series_dir = dir.join("series");
        fs::create_dir_all(&series_dir).map_err(|e| SlipError::io(&series_dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("series/{i:06}.bin");
            let path = dir.join(&rel);
            fs::write(&path, encode_series(&s.series)).map_err(|e| SlipError::io(&path, e))?;
            entries.push(ManifestEntry {
                series_path: rel,
                caption_record: s.captions.clone(),
                frequency: s.series.frequency,
                num_channels: s.series.num_channels(),
                length: s.series.len(),
                channel_names: s.series.channel_names.clone(),
                attributes: s.attributes,
            });
        }
        let manifest = SampleManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            entries,
            stats: self.stats(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| SlipError::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n").map_err(|e| SlipError::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a corpus from a directory containing `manifest.json` (or from the
    /// manifest path itself), checking every entry against its stored array.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path: PathBuf = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(|e| SlipError::io(&manifest_path, e))?;
        let manifest: SampleManifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(SlipError::Format(format!(
                "unsupported manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let p = root.join(&e.series_path);
            let bytes = fs::read(&p).map_err(|err| SlipError::io(&p, err))?;
            let series = decode_series(&bytes, e.frequency, e.channel_names)?;
            if series.num_channels() != e.num_channels || series.len() != e.length {
                return Err(SlipError::Format(format!(
                    "{}: manifest declares ({}, {}) but file holds ({}, {})",
                    e.series_path,
                    e.num_channels,
                    e.length,
                    series.num_channels(),
                    series.len()
                )));
            }
            samples.push(Sample {
                series,
                captions: e.caption_record,
                attributes: e.attributes,
            });
        }
        Self::new(samples)
    }

    /// Draws `batch_size` samples with replacement: multivariate with
    /// probability 2/3, univariate with 1/3, then one caption variant uniformly.
    /// If a stratum is empty every draw is uniform over the corpus and a
    /// warning is logged.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> SampledBatch {
        let fallback = self.multivariate.is_empty() || self.univariate.is_empty();
        if fallback {
            log::warn!(
                "corpus has {} multivariate and {} univariate samples; sampling uniformly",
                self.multivariate.len(),
                self.univariate.len()
            );
        }
        let draws = (0..batch_size)
            .map(|_| {
                let index = if fallback {
                    rng.random_range(0..self.samples.len())
                } else {
                    let stratum = if rng.random::<f64>() < 2.0 / 3.0 {
                        &self.multivariate
                    } else {
                        &self.univariate
                    };
                    stratum[rng.random_range(0..stratum.len())]
                };
                let rec = &self.samples[index].captions;
                let variant = rng.random_range(0..rec.num_variants());
                let caption = rec.variants().nth(variant).expect("in range").to_string();
                Draw { index, caption }
            })
            .collect();
        SampledBatch {
            draws,
            uniform_fallback: fallback,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub draws: Vec<Draw>,
    /// Set when a stratum was empty and draws were uniform.
    pub uniform_fallback: bool,
}

/// Settings for generating a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_samples: usize,
    pub seed: u64,
    pub generator: GeneratorSpec,
    /// Fraction of samples that are univariate; the rest use the generator's
    /// channel range with at least two channels.
    pub univariate_fraction: f64,
    /// Reject samples whose canonical caption already occurs.
    pub unique_captions: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_samples: 512,
            seed: 7,
            generator: GeneratorSpec::default(),
            univariate_fraction: 1.0 / 3.0,
            unique_captions: false,
        }
    }
}

/// Builds a corpus deterministically from `spec.seed`. Sample `i` is derived
/// from a per-sample seed, so prefixes of larger corpora coincide.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.generator.validate()?;
    if !(0.0..=1.0).contains(&spec.univariate_fraction) {
        return Err(SlipError::Config("univariate_fraction must lie in [0, 1]".into()));
    }
    let uni_spec = GeneratorSpec {
        min_channels: 1,
        max_channels: 1,
        ..spec.generator.clone()
    };
    let multi_spec = GeneratorSpec {
        min_channels: spec.generator.min_channels.max(2),
        max_channels: spec.generator.max_channels.max(2),
        ..spec.generator.clone()
    };
    let num_uni = (spec.num_samples as f64 * spec.univariate_fraction).round() as usize;
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut attempt: u64 = 0;
    let max_attempts = 200 * spec.num_samples as u64 + 1000;
    while samples.len() < spec.num_samples {
        if attempt >= max_attempts {
            return Err(SlipError::Config(format!(
                "could only find {} distinct captions for {} requested samples",
                samples.len(),
                spec.num_samples
            )));
        }
        let g = if samples.len() < num_uni {
            &uni_spec
        } else {
            &multi_spec
        };
        let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt);
        attempt += 1;
        let pair = generate_synthetic_pair(seed, g)?;
        if spec.unique_captions && !seen.insert(pair.caption.caption.clone()) {
            continue;
        }
        samples.push(Sample {
            series: pair.series,
            captions: pair.caption,
            attributes: Some(pair.attributes),
        });
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize) -> Dataset {
        generate_corpus(&CorpusSpec {
            num_samples: n,
            generator: GeneratorSpec {
                lengths: vec![64],
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn stratified_fraction_near_two_thirds() {
        let ds = corpus(30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = ds.sample_batch(30_000, &mut rng);
        let multi = batch
            .draws
            .iter()
            .filter(|d| ds.get(d.index).series.is_multivariate())
            .count();
        let frac = multi as f64 / 30_000.0;
        assert!((0.64..=0.69).contains(&frac), "{frac}");
        assert!(!batch.uniform_fallback);
    }

    #[test]
    fn univariate_only_falls_back_with_flag() {
        let ds = generate_corpus(&CorpusSpec {
            num_samples: 5,
            univariate_fraction: 1.0,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.sample_batch(50, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(batch.uniform_fallback);
        assert!(batch.draws.iter().all(|d| !ds.get(d.index).series.is_multivariate()));
    }

    #[test]
    fn paraphrase_variants_uniform() {
        let ds = corpus(1);
        assert_eq!(ds.get(0).captions.num_variants(), 4);
        let batch = ds.sample_batch(4000, &mut ChaCha8Rng::seed_from_u64(2));
        for v in ds.get(0).captions.variants() {
            let f = batch.draws.iter().filter(|d| d.caption == v).count() as f64 / 4000.0;
            assert!((0.20..=0.30).contains(&f), "{v}: {f}");
        }
    }

    #[test]
    fn binary_roundtrip_and_corruption() {
        let ds = corpus(3);
        let s = &ds.get(2).series;
        let bytes = encode_series(s);
        assert_eq!(&bytes[..4], b"SLPS");
        let back = decode_series(&bytes, s.frequency, s.channel_names.clone()).unwrap();
        assert_eq!(&back, s);
        assert!(decode_series(&bytes[..bytes.len() - 1], s.frequency, s.channel_names.clone()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_series(&bad, s.frequency, s.channel_names.clone()).is_err());
    }

    #[test]
    fn unique_captions_are_distinct() {
        let ds = generate_corpus(&CorpusSpec {
            num_samples: 64,
            unique_captions: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.stats().num_distinct_captions, 64);
    }
}
