//! Series and caption types, the synthetic generator, and corpus I/O.

pub mod dataset;
pub mod frequency;
pub mod series;
pub mod synth;

pub use dataset::{
    generate_corpus, CorpusSpec, CorpusStats, Dataset, Draw, ManifestEntry, Sample, SampleManifest, SampledBatch,
};
pub use frequency::{patch_size_for, patch_size_for_tag, FrequencyClass};
pub use series::{normalize, CaptionRecord, SensorSeries, NORM_STD_FLOOR};
pub use synth::{
    extract_attributes, generate_synthetic_pair, render_caption, vocabulary_periods, AttributeVocabulary, Attributes,
    CaptionTemplate, GeneratorSpec, NoiseLevel, Sync, SyntheticPair, Trend,
};
