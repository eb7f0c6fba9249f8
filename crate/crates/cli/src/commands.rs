use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use slip_core::checkpoint::Checkpoint;
use slip_core::data::{generate_corpus, Dataset};
use slip_core::diagnostics::{geometry_report, GeometryProbe};
use slip_core::encoder::AttentionMode;
use slip_core::error::SlipError;
use slip_core::evaluation::{
    accuracy, caption_overlap_metrics, held_out_losses, linear_probe, macro_f1, probe_features, recall_at_k,
    wilcoxon_signed_rank, zero_shot_retrieve, AttributeTask, CaptionMetrics, HeldOutLosses, ProbeReport, RecallReport,
    WilcoxonResult,
};
use slip_core::model::{PreparedSensor, SensorSource, SlipModel};
use slip_core::objectives::LossMode;
use slip_core::trainer::{parse_metric_line, train, MetricRecord, StepRecord, TrainMode, TrainOptions};

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};
use crate::rundir::RunDir;
use crate::{Command, Common};

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<SlipError>(), Some(SlipError::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

pub fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', "; ")
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn load_dataset(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<(PathBuf, Dataset)> {
    let path = flag
        .or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("no {what} given (flag or config)")))?;
    let ds = Dataset::load(&path).with_context(|| format!("loading {what} from {}", path.display()))?;
    Ok((path, ds))
}

fn load_model(path: &Path) -> Result<(Checkpoint, SlipModel)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.into_model()?;
    Ok((ckpt, model))
}

fn prepare(model: &SlipModel, ds: &Dataset) -> Result<Vec<PreparedSensor>> {
    Ok(ds
        .samples()
        .iter()
        .map(|s| model.prepare_sensor(&s.series))
        .collect::<slip_core::error::Result<_>>()?)
}

/// Indices of samples that carry a label under `task`, with those labels.
fn labelled(ds: &Dataset, task: &AttributeTask) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in ds.samples().iter().enumerate() {
        if let Some(l) = s.attributes.as_ref().and_then(|a| task.label(a)) {
            idx.push(i);
            labels.push(l);
        }
    }
    if idx.len() < ds.len() {
        log::warn!(
            "{} of {} samples have no label under the task and are skipped",
            ds.len() - idx.len(),
            ds.len()
        );
    }
    (idx, labels)
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub num_samples: usize,
    pub num_classes: usize,
    pub sensor_source: SensorSource,
    pub use_projection: bool,
}

pub fn zero_shot_eval(model: &SlipModel, ds: &Dataset, task: &AttributeTask) -> Result<ZeroShotReport> {
    let (idx, labels) = labelled(ds, task);
    if idx.is_empty() {
        return Err(usage("no labelled samples for zero-shot evaluation"));
    }
    let prepared = prepare(model, ds)?;
    let refs: Vec<&PreparedSensor> = idx.iter().map(|&i| &prepared[i]).collect();
    let prompts = task.prompts()?;
    let pred = zero_shot_retrieve(model, &refs, &prompts)?;
    Ok(ZeroShotReport {
        accuracy: accuracy(&pred, &labels),
        macro_f1: macro_f1(&pred, &labels),
        num_samples: labels.len(),
        num_classes: prompts.len(),
        sensor_source: model.config.zero_shot_sensor_source,
        use_projection: model.config.zero_shot_use_projection,
    })
}

/// Sensor-to-caption recall with the contrastive embeddings and canonical captions.
pub fn recall_eval(model: &SlipModel, ds: &Dataset, ks: &[usize], chunk: usize) -> Result<Vec<RecallReport>> {
    let prepared = prepare(model, ds)?;
    let refs: Vec<&PreparedSensor> = prepared.iter().collect();
    let f = model.sensor_features(&refs, chunk)?;
    let caps: Vec<&str> = ds.samples().iter().map(|s| s.captions.caption.as_str()).collect();
    let (_, te) = model.text_features(&caps, chunk)?;
    ks.iter()
        .filter(|&&k| k <= ds.len())
        .map(|&k| Ok(recall_at_k(&f.cls_embedding, &te, k)?))
        .collect()
}

pub fn probe_eval(model: &SlipModel, train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<ProbeReport> {
    let task = cfg.task();
    let feats = |ds: &Dataset| -> Result<(slip_core::tensor::Matrix, Vec<usize>)> {
        let (idx, labels) = labelled(ds, &task);
        let prepared = prepare(model, ds)?;
        let refs: Vec<&PreparedSensor> = idx.iter().map(|&i| &prepared[i]).collect();
        Ok((probe_features(model, &refs)?, labels))
    };
    let (trx, try_) = feats(train)?;
    let (tex, tey) = feats(test)?;
    Ok(linear_probe(&trx, &try_, &tex, &tey, &cfg.probe)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct CaptionReport {
    pub metrics: CaptionMetrics,
    /// Fraction of predictions equal to one of the sample's caption variants.
    pub exact_match: f64,
    pub num_samples: usize,
}

pub fn caption_eval(
    model: &SlipModel,
    ds: &Dataset,
    limit: usize,
    max_len: usize,
) -> Result<(CaptionReport, Vec<String>)> {
    let n = if limit == 0 { ds.len() } else { limit.min(ds.len()) };
    let mut preds = Vec::with_capacity(n);
    let mut exact = 0;
    for s in &ds.samples()[..n] {
        let p = model.caption(&model.prepare_sensor(&s.series)?, max_len)?;
        if s.captions.variants().any(|v| v == p) {
            exact += 1;
        }
        preds.push(p);
    }
    let refs: Vec<String> = ds.samples()[..n].iter().map(|s| s.captions.caption.clone()).collect();
    Ok((
        CaptionReport {
            metrics: caption_overlap_metrics(&preds, &refs)?,
            exact_match: exact as f64 / n as f64,
            num_samples: n,
        },
        preds,
    ))
}

#[derive(Serialize)]
struct PretrainReport {
    steps_completed: usize,
    stopped_early: bool,
    final_step: Option<StepRecord>,
    temperature: f64,
    num_parameters: usize,
    num_trainable: usize,
    train_recall: Vec<RecallReport>,
    checkpoint: PathBuf,
}

fn run_training(
    cfg: &RunConfig,
    rd: &RunDir,
    model: &mut SlipModel,
    data: &Dataset,
    state: Option<slip_core::trainer::TrainState>,
) -> Result<PretrainReport> {
    let probe = if cfg.train.geometry_every > 0 {
        let probe_ds = match &cfg.test_data {
            Some(p) => Dataset::load(p).with_context(|| format!("loading geometry probe set {}", p.display()))?,
            None => data.clone(),
        };
        Some((
            GeometryProbe::from_dataset(model, &probe_ds, cfg.geometry.probe_size)?,
            cfg.geometry.clone(),
        ))
    } else {
        None
    };
    let mut metrics = rd.metrics_writer()?;
    let outcome = train(
        model,
        data,
        &cfg.train,
        state,
        TrainOptions {
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(rd.file("checkpoints")),
            dump_dir: Some(rd.path.clone()),
            geometry: probe,
            ..Default::default()
        },
    )?;
    Ok(PretrainReport {
        steps_completed: outcome.state.step,
        stopped_early: outcome.stopped_early,
        final_step: outcome.steps().last().cloned(),
        temperature: model.temperature(),
        num_parameters: model.store.num_scalars(),
        num_trainable: model.store.num_trainable_scalars(),
        train_recall: recall_eval(model, data, &cfg.eval.recall_k, cfg.eval.chunk)?,
        checkpoint: rd.file("checkpoints").join("final.ckpt"),
    })
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(v);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| usage(format!("{}: {t:?} is not a number", path.display())))
        })
        .collect()
}

#[derive(Serialize)]
struct StatsReport {
    a: PathBuf,
    b: PathBuf,
    result: WilcoxonResult,
}

#[derive(Clone, Debug, Serialize)]
struct AblationRow {
    variant: String,
    zero_shot_accuracy: f64,
    recall_at_1: f64,
    held_out: HeldOutLosses,
    probe_top1: f64,
    final_train_loss: f64,
}

pub const ABLATION_VARIANTS: [&str; 7] = [
    "joint",
    "caption_only",
    "contrastive_only",
    "random_paired",
    "grouped_attention",
    "frozen_text_encoder",
    "fixed_patch_size",
];

/// The run configuration for one named ablation variant.
pub fn ablation_config(base: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    c.train.mode = TrainMode::Pretrain;
    match variant {
        "joint" => c.train.loss.mode = LossMode::Joint,
        "caption_only" => c.train.loss.mode = LossMode::CaptionOnly,
        "contrastive_only" => c.train.loss.mode = LossMode::ContrastiveOnly,
        "random_paired" => c.train.loss.mode = LossMode::RandomPaired,
        "grouped_attention" => c.model.attention_mode = AttentionMode::Grouped,
        "frozen_text_encoder" => c.model.freeze_all_text_encoder = true,
        "fixed_patch_size" => c.model.fixed_patch_size = Some(c.model.base_patch),
        other => {
            return Err(usage(format!(
                "unknown ablation variant {other:?}; known: {}",
                ABLATION_VARIANTS.join(", ")
            )))
        }
    }
    c.validate().map_err(|e| usage(format!("variant {variant}: {e:#}")))?;
    Ok(c)
}

fn step_series(records: &[MetricRecord]) -> Vec<&StepRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            _ => None,
        })
        .collect()
}

fn render_plots(metrics: &Path, rd: &RunDir) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let records: Vec<MetricRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_metric_line)
        .collect::<slip_core::error::Result<_>>()
        .with_context(|| format!("parsing {}", metrics.display()))?;
    let steps = step_series(&records);
    let pts = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(|s| (s.step as f64, f(s))).collect::<Vec<_>>();
    let mut written = Vec::new();
    let mut put = |name: &str, svg: String| -> Result<()> {
        let p = rd.file(name);
        fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
        Ok(())
    };
    put(
        "losses.svg",
        line_chart(
            "training losses",
            "step",
            &[
                Series {
                    label: "contrastive",
                    points: pts(&|s| s.contrastive_loss),
                },
                Series {
                    label: "caption",
                    points: pts(&|s| s.caption_loss),
                },
                Series {
                    label: "total",
                    points: pts(&|s| s.total),
                },
            ],
        ),
    )?;
    put(
        "schedule.svg",
        line_chart(
            "learning rate",
            "step",
            &[Series {
                label: "lr",
                points: pts(&|s| s.lr),
            }],
        ),
    )?;
    let geo: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Geometry(g) => Some(g),
            _ => None,
        })
        .collect();
    if !geo.is_empty() {
        let gp = |f: &dyn Fn(&slip_core::diagnostics::GeometryRecord) -> f64| {
            geo.iter().map(|g| (g.step as f64, f(g))).collect::<Vec<_>>()
        };
        put(
            "geometry.svg",
            line_chart(
                "embedding geometry (lower is better)",
                "step",
                &[
                    Series {
                        label: "sensor uniformity",
                        points: gp(&|g| g.sensor_uniformity),
                    },
                    Series {
                        label: "text uniformity",
                        points: gp(&|g| g.text_uniformity),
                    },
                    Series {
                        label: "alignment",
                        points: gp(&|g| g.alignment),
                    },
                ],
            ),
        )?;
    }
    Ok(written)
}

fn print_done(rd: &RunDir, summary: &str) {
    println!("{summary}");
    println!("run directory: {}", rd.path.display());
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, dest } => {
            let cfg = load_config(&common)?;
            let ds = generate_corpus(&cfg.corpus)?;
            let manifest = ds.save(&dest)?;
            let rd = RunDir::create(&cfg.output_dir, "gen-data")?;
            rd.write_config(&cfg)?;
            rd.append_metrics(&[])?;
            rd.write_report(&serde_json::json!({ "dest": dest, "stats": manifest.stats }))?;
            print_done(&rd, &format!("wrote {} samples to {}", ds.len(), dest.display()));
        }
        Command::Pretrain { common, data, resume } => {
            let mut cfg = load_config(&common)?;
            if cfg.train.mode != TrainMode::Pretrain {
                return Err(usage(
                    "pretrain needs train.mode = \"pretrain\"; use the sft subcommand",
                ));
            }
            let (_, ds) = load_dataset(data, &cfg.train_data, "training data")?;
            let (mut model, state) = match resume {
                Some(p) => {
                    let (ckpt, model) = load_model(&p)?;
                    let state = ckpt
                        .train_state()
                        .ok_or_else(|| usage(format!("{} holds no optimiser state", p.display())))?;
                    let stored = ckpt
                        .header
                        .train
                        .clone()
                        .expect("training checkpoints store their config");
                    if stored != cfg.train || ckpt.header.model != cfg.model {
                        log::warn!("resuming with the configuration stored in {}", p.display());
                    }
                    cfg.train = stored;
                    cfg.model = ckpt.header.model.clone();
                    (model, Some(state))
                }
                None => (SlipModel::new(cfg.model.clone())?, None),
            };
            let rd = RunDir::create(&cfg.output_dir, "pretrain")?;
            rd.write_config(&cfg)?;
            let report = run_training(&cfg, &rd, &mut model, &ds, state)?;
            rd.write_report(&report)?;
            let last = report.final_step.as_ref().map(|s| s.total).unwrap_or(f64::NAN);
            print_done(
                &rd,
                &format!(
                    "pretrained {} steps, final total loss {last:.4}",
                    report.steps_completed
                ),
            );
        }
        Command::Sft {
            common,
            checkpoint,
            data,
        } => {
            let mut cfg = load_config(&common)?;
            let (_, ds) = load_dataset(data, &cfg.train_data, "training data")?;
            let (_, mut model) = load_model(&checkpoint)?;
            cfg.model = model.config.clone();
            cfg.train.mode = TrainMode::Sft;
            let rd = RunDir::create(&cfg.output_dir, "sft")?;
            rd.write_config(&cfg)?;
            let report = run_training(&cfg, &rd, &mut model, &ds, None)?;
            rd.write_report(&report)?;
            print_done(&rd, &format!("finetuned {} steps", report.steps_completed));
        }
        Command::Probe {
            common,
            checkpoint,
            train_data,
            test_data,
        } => {
            let mut cfg = load_config(&common)?;
            let (_, train_ds) = load_dataset(train_data, &cfg.train_data, "probe training data")?;
            let (_, test_ds) = load_dataset(test_data, &cfg.test_data, "probe test data")?;
            let (_, model) = load_model(&checkpoint)?;
            cfg.model = model.config.clone();
            let rd = RunDir::create(&cfg.output_dir, "probe")?;
            rd.write_config(&cfg)?;
            let trained = probe_eval(&model, &train_ds, &test_ds, &cfg)?;
            let baseline = probe_eval(&SlipModel::new(model.config.clone())?, &train_ds, &test_ds, &cfg)?;
            rd.append_metrics(&[
                MetricRecord::Eval(slip_core::trainer::EvalRecord {
                    step: 0,
                    name: "probe_top1".into(),
                    value: trained.top1_accuracy,
                }),
                MetricRecord::Eval(slip_core::trainer::EvalRecord {
                    step: 0,
                    name: "probe_macro_f1".into(),
                    value: trained.macro_f1,
                }),
            ])?;
            rd.write_report(&serde_json::json!({ "probe": trained, "random_init_baseline": baseline }))?;
            print_done(
                &rd,
                &format!(
                    "probe top-1 {:.4}, macro-F1 {:.4} (random init {:.4})",
                    trained.top1_accuracy, trained.macro_f1, baseline.top1_accuracy
                ),
            );
        }
        Command::Retrieve {
            common,
            checkpoint,
            data,
        } => {
            let mut cfg = load_config(&common)?;
            let (_, ds) = load_dataset(data, &cfg.test_data, "evaluation data")?;
            let (_, model) = load_model(&checkpoint)?;
            cfg.model = model.config.clone();
            let rd = RunDir::create(&cfg.output_dir, "retrieve")?;
            rd.write_config(&cfg)?;
            let zs = zero_shot_eval(&model, &ds, &cfg.task())?;
            let recall = recall_eval(&model, &ds, &cfg.eval.recall_k, cfg.eval.chunk)?;
            rd.append_metrics(&[MetricRecord::Eval(slip_core::trainer::EvalRecord {
                step: 0,
                name: "zero_shot_accuracy".into(),
                value: zs.accuracy,
            })])?;
            rd.write_report(&serde_json::json!({
                "accuracy": zs.accuracy,
                "zero_shot": zs,
                "recall": recall,
            }))?;
            print_done(
                &rd,
                &format!("zero-shot accuracy {:.4} over {} samples", zs.accuracy, zs.num_samples),
            );
        }
        Command::Caption {
            common,
            checkpoint,
            data,
        } => {
            let mut cfg = load_config(&common)?;
            let (_, ds) = load_dataset(data, &cfg.test_data, "evaluation data")?;
            let (_, model) = load_model(&checkpoint)?;
            cfg.model = model.config.clone();
            let rd = RunDir::create(&cfg.output_dir, "caption")?;
            rd.write_config(&cfg)?;
            let (report, preds) = caption_eval(&model, &ds, cfg.eval.caption_limit, cfg.eval.caption_max_len)?;
            let lines: String = preds
                .iter()
                .zip(ds.samples())
                .enumerate()
                .map(|(i, (p, s))| {
                    serde_json::json!({ "index": i, "prediction": p, "reference": s.captions.caption }).to_string()
                        + "\n"
                })
                .collect();
            fs::write(rd.file("captions.jsonl"), lines)?;
            rd.append_metrics(&[])?;
            rd.write_report(&report)?;
            print_done(
                &rd,
                &format!(
                    "BLEU-4 {:.4}, ROUGE-L {:.4}, exact match {:.4}",
                    report.metrics.bleu4, report.metrics.rouge_l, report.exact_match
                ),
            );
        }
        Command::Diagnose {
            common,
            checkpoint,
            data,
            metrics,
        } => {
            let mut cfg = load_config(&common)?;
            if checkpoint.is_none() && metrics.is_none() {
                return Err(usage("diagnose needs --checkpoint and/or --metrics"));
            }
            let geometry = match &checkpoint {
                Some(p) => {
                    let (_, ds) = load_dataset(data, &cfg.test_data, "probe data")?;
                    let (ckpt, model) = load_model(p)?;
                    cfg.model = model.config.clone();
                    let probe = GeometryProbe::from_dataset(&model, &ds, cfg.geometry.probe_size)?;
                    Some(geometry_report(&model, &probe, &cfg.geometry, ckpt.header.step)?)
                }
                None => None,
            };
            let rd = RunDir::create(&cfg.output_dir, "diagnose")?;
            rd.write_config(&cfg)?;
            let plots = match &metrics {
                Some(m) => render_plots(m, &rd)?,
                None => Vec::new(),
            };
            rd.append_metrics(&geometry.iter().cloned().map(MetricRecord::Geometry).collect::<Vec<_>>())?;
            rd.write_report(&serde_json::json!({ "geometry": geometry, "plots": plots }))?;
            let summary = match &geometry {
                Some(g) => format!(
                    "sensor uniformity {:.4}, text uniformity {:.4}, alignment {:.4}",
                    g.sensor_uniformity, g.text_uniformity, g.alignment
                ),
                None => format!("rendered {} plot(s)", plots.len()),
            };
            print_done(&rd, &summary);
        }
        Command::StatsTest { common, a, b } => {
            let cfg = load_config(&common)?;
            let sa = read_scores(&a)?;
            let sb = read_scores(&b)?;
            if sa.len() != sb.len() {
                return Err(usage(format!(
                    "pairing error: {} has {} scores but {} has {}",
                    a.display(),
                    sa.len(),
                    b.display(),
                    sb.len()
                )));
            }
            let result = wilcoxon_signed_rank(&sa, &sb).map_err(|e| match e {
                SlipError::UndefinedTest(m) => usage(format!("test undefined: {m}")),
                other => other.into(),
            })?;
            let rd = RunDir::create(&cfg.output_dir, "stats-test")?;
            rd.write_config(&cfg)?;
            rd.append_metrics(&[])?;
            rd.write_report(&StatsReport { a, b, result })?;
            print_done(
                &rd,
                &format!(
                    "W = {}, n = {}, two-sided p = {:.6}{}",
                    result.statistic,
                    result.n,
                    result.p_value,
                    if result.significant {
                        " (significant at 0.05)"
                    } else {
                        ""
                    }
                ),
            );
        }
        Command::Ablate {
            common,
            data,
            test_data,
            variants,
        } => {
            let cfg = load_config(&common)?;
            let (_, train_ds) = load_dataset(data, &cfg.train_data, "training data")?;
            let (_, test_ds) = load_dataset(test_data, &cfg.test_data, "test data")?;
            let names: Vec<String> = if variants.is_empty() {
                ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect()
            } else {
                variants
            };
            let configs: Vec<(String, RunConfig)> = names
                .iter()
                .map(|n| Ok((n.clone(), ablation_config(&cfg, n)?)))
                .collect::<Result<_>>()?;
            let rd = RunDir::create(&cfg.output_dir, "ablate")?;
            rd.write_config(&cfg)?;
            let mut rows = Vec::new();
            for (name, vcfg) in &configs {
                log::info!("ablation variant {name}");
                let vdir = RunDir { path: rd.file(name) };
                fs::create_dir_all(&vdir.path)?;
                vdir.write_config(vcfg)?;
                let mut model = SlipModel::new(vcfg.model.clone())?;
                let mut metrics = vdir.metrics_writer()?;
                let outcome = train(
                    &mut model,
                    &train_ds,
                    &vcfg.train,
                    None,
                    TrainOptions {
                        metrics: Some(&mut metrics),
                        dump_dir: Some(vdir.path.clone()),
                        ..Default::default()
                    },
                )?;
                Checkpoint::weights(&model).save(&vdir.file("final.ckpt"))?;
                let zs = zero_shot_eval(&model, &test_ds, &vcfg.task())?;
                let recall = recall_eval(&model, &test_ds, &[1], vcfg.eval.chunk)?;
                let row = AblationRow {
                    variant: name.clone(),
                    zero_shot_accuracy: zs.accuracy,
                    recall_at_1: recall.first().map_or(f64::NAN, |r| r.sensor_to_text),
                    held_out: held_out_losses(&model, &test_ds, vcfg.eval.chunk)?,
                    probe_top1: probe_eval(&model, &train_ds, &test_ds, vcfg)?.top1_accuracy,
                    final_train_loss: outcome.steps().last().map_or(f64::NAN, |s| s.total),
                };
                vdir.write_report(&row)?;
                rows.push(row);
            }
            let mut table = String::from(
                "| variant | zero-shot acc | R@1 | held-out caption loss | held-out contrastive loss | probe top-1 |\n|---|---|---|---|---|---|\n",
            );
            for r in &rows {
                table.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                    r.variant,
                    r.zero_shot_accuracy,
                    r.recall_at_1,
                    r.held_out.caption,
                    r.held_out.contrastive,
                    r.probe_top1
                ));
            }
            fs::write(rd.file("ablation.md"), &table)?;
            rd.append_metrics(&[])?;
            rd.write_report(&rows)?;
            print!("{table}");
            print_done(&rd, &format!("{} variants evaluated", rows.len()));
        }
    }
    Ok(())
}
