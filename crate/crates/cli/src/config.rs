//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slip_core::data::CorpusSpec;
use slip_core::diagnostics::GeometryConfig;
use slip_core::evaluation::{AttributeTask, ClassAxis, ProbeConfig};
use slip_core::model::ModelConfig;
use slip_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Attributes whose value combinations define the classes.
    pub task_axes: Vec<ClassAxis>,
    pub recall_k: Vec<usize>,
    pub caption_max_len: usize,
    /// Caption at most this many samples (0: all).
    pub caption_limit: usize,
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task_axes: vec![ClassAxis::Trend, ClassAxis::Spike],
            recall_k: vec![1, 5],
            caption_max_len: 160,
            caption_limit: 0,
            chunk: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the model, training, probe and corpus seeds.
    pub seed: Option<u64>,
    /// Parent of the per-invocation run directories.
    pub output_dir: PathBuf,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub geometry: GeometryConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("runs"),
            train_data: None,
            test_data: None,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            geometry: GeometryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that does not parse as a TOML value is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty component");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override key {key:?}: {p:?} is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = cfg.seed {
            cfg.model.init_seed = seed;
            cfg.train.seed = seed;
            cfg.probe.seed = seed;
            cfg.corpus.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        self.geometry.validate()?;
        self.corpus.generator.validate()?;
        if self.eval.recall_k.contains(&0) {
            bail!("recall_k entries must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn task(&self) -> AttributeTask {
        AttributeTask {
            axes: self.eval.task_axes.clone(),
            vocabulary: self.corpus.generator.vocabulary.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nsteps = 50\nbatch_size = 4\nwarmup_steps = 5\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.steps=70".into(), "model.hidden_dim=32".into()]).unwrap();
        assert_eq!(cfg.train.steps, 70);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.train.peak_lr, TrainConfig::default().peak_lr);
    }

    #[test]
    fn snapshot_roundtrip_and_errors() {
        let cfg = RunConfig::load(None, &["seed=11".into(), "train.loss.mode=\"caption_only\"".into()]).unwrap();
        assert_eq!(cfg.model.init_seed, 11);
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::load(None, &["train.nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
        assert!(RunConfig::load(None, &["train.warmup_steps=5000".into()]).is_err());
    }
}
