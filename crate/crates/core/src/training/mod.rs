//! Two-stage training: contrastive representation learning for the encoder
//! and projection head, then focal-loss fine-tuning of the auxiliary
//! featurizer and classifier on top of the frozen encoder.

mod optimizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::data::{augment, epoch_batches, AugmentPolicy, DataSplits, Dataset, Sample, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::inference::{argmax_rows, aux_stats_batch, predict, representations};
use crate::losses::{check_unit_rows, focal_loss_from_log_probs, supervised_contrastive_loss, LossConfig};
use crate::model::{Group, Model, ModelConfig, ModelParams};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::derive_seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.mscn";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub optimizer_stage1: OptimizerConfig,
    pub optimizer_stage2: OptimizerConfig,
    pub augment: AugmentPolicy,
    /// Feed two augmented views of every sample to the contrastive stage.
    pub two_view: bool,
    /// Log loss and accuracy on the validation and test splits each epoch.
    pub evaluate_each_epoch: bool,
    /// Report zero wall time so that reports are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            epochs_stage1: 15,
            epochs_stage2: 10,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            loss: LossConfig::default(),
            model,
            optimizer_stage1: OptimizerConfig::default(),
            optimizer_stage2: OptimizerConfig::default(),
            augment: AugmentPolicy::default(),
            two_view: false,
            evaluate_each_epoch: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_stage1 == 0 {
            return Err(Error::config("train.epochs_stage1", "must be at least 1"));
        }
        if self.epochs_stage2 == 0 {
            return Err(Error::config("train.epochs_stage2", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        self.loss.validate()?;
        let c = self.model.num_classes;
        if self.loss.alpha.len() != 1 && self.loss.alpha.len() != c {
            return Err(Error::config(
                "train.loss.alpha",
                format!("needs 1 or {c} entries, got {}", self.loss.alpha.len()),
            ));
        }
        self.model.validate()?;
        self.optimizer_stage1.validate("train.optimizer_stage1")?;
        self.optimizer_stage2.validate("train.optimizer_stage2")?;
        self.augment.validate()
    }

    /// Parameters before any training.
    pub fn initial_params(&self) -> Result<ModelParams> {
        ModelParams::init(&self.model, derive_seed(self.seed, &[7]))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Degenerate("training split is empty".into()));
        }
        if data.num_classes() != self.model.num_classes {
            return Err(Error::config(
                "train.model.num_classes",
                format!("data has {} classes, model has {}", data.num_classes(), self.model.num_classes),
            ));
        }
        if let Some(shape) = data.image_shape() {
            if shape != self.model.image_shape {
                return Err(Error::config(
                    "train.model.image_shape",
                    format!("data images are {shape:?}, model expects {:?}", self.model.image_shape),
                ));
            }
        }
        Ok(())
    }
}

/// Loss and accuracy on a held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub seconds: f64,
    pub batch_size: usize,
    pub batches: usize,
    /// Contrastive batches in which no anchor had a positive.
    pub degenerate_batches: usize,
    /// Samples left out because they formed a final batch of one.
    pub skipped_samples: usize,
    pub val: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub final_metrics: Option<FinalMetrics>,
}

impl TrainReport {
    fn new(cfg: &TrainConfig) -> Self {
        TrainReport {
            seed: cfg.seed,
            config: cfg.clone(),
            records: Vec::new(),
            final_metrics: None,
        }
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// One JSON object per epoch record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = serde_json::json!({
            "seed": self.seed,
            "config": self.config,
            "final_metrics": self.final_metrics,
        });
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
    }
}

fn param_grads(bound: &crate::model::Bound, grads: &crate::numerics::Gradients, into: &mut BTreeMap<String, Tensor>) {
    for (name, id) in bound.iter() {
        if let Some(g) = grads.get(id) {
            match into.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    into.insert(name.to_string(), g.clone());
                }
            }
        }
    }
}

fn numerical(stage: u8, epoch: usize, batch: usize, what: &str, v: f64) -> Error {
    Error::Numerical(format!("stage {stage} epoch {epoch} batch {batch}: {what} is {v}"))
}

fn augment_seed(cfg: &TrainConfig, stage: u8, epoch: usize, index: usize, view: usize) -> u64 {
    derive_seed(cfg.seed, &[100 + stage as u64, epoch as u64, index as u64, view as u64])
}

struct ContrastiveStep {
    loss: f64,
    anchors_with_positives: usize,
    grads: BTreeMap<String, Tensor>,
}

/// Contrastive loss of one batch of images and, when `with_grads`, the
/// gradients of the encoder and projection parameters.
fn contrastive_step(
    model: &Model,
    params: &ModelParams,
    images: &[Tensor],
    labels: &[usize],
    tau: f64,
    with_grads: bool,
) -> Result<ContrastiveStep> {
    struct Tape {
        graph: Graph,
        bound: crate::model::Bound,
        rep: NodeId,
    }
    let tapes = images
        .par_iter()
        .map(|img| -> Result<Tape> {
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph, &[Group::Encoder], with_grads);
            let x = graph.constant(img.clone());
            let rep = model.encoder_forward(&mut graph, &bound, x)?;
            Ok(Tape { graph, bound, rep })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::new();
    let pb = params.bind(&mut g, &[Group::Projection], with_grads);
    let reps: Vec<NodeId> = tapes
        .iter()
        .map(|t| {
            let v = t.graph.value(t.rep).clone();
            if with_grads {
                g.param(v)
            } else {
                g.constant(v)
            }
        })
        .collect();
    let stacked = g.stack_rows(&reps)?;
    let z = model.projection_forward(&mut g, &pb, stacked)?;
    if check_unit_rows(g.value(z)).is_err() {
        // Overflowed activations; the caller reports the location.
        return Ok(ContrastiveStep {
            loss: f64::NAN,
            anchors_with_positives: 0,
            grads: BTreeMap::new(),
        });
    }
    let out = supervised_contrastive_loss(&mut g, z, labels, tau)?;
    let loss = g.value(out.loss).item();
    let mut grads = BTreeMap::new();
    if !with_grads || out.anchors_with_positives == 0 || !loss.is_finite() {
        return Ok(ContrastiveStep {
            loss,
            anchors_with_positives: out.anchors_with_positives,
            grads,
        });
    }
    let mut bg = g.backward(out.loss)?;
    param_grads(&pb, &bg, &mut grads);
    let seeds: Vec<Tensor> = reps
        .iter()
        .map(|&r| bg.take(r).expect("representation leaves receive gradients"))
        .collect();
    let per_sample = tapes
        .par_iter()
        .zip(seeds)
        .map(|(t, seed)| -> Result<BTreeMap<String, Tensor>> {
            let sg = t.graph.backward_seeded(t.rep, seed)?;
            let mut m = BTreeMap::new();
            param_grads(&t.bound, &sg, &mut m);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    // Fixed-order reduction keeps the sum independent of the thread count.
    for m in per_sample {
        for (name, gr) in m {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&gr),
                None => {
                    grads.insert(name, gr);
                }
            }
        }
    }
    Ok(ContrastiveStep {
        loss,
        anchors_with_positives: out.anchors_with_positives,
        grads,
    })
}

fn sorted_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..len)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean unaugmented contrastive loss over consecutive batches of a split.
fn contrastive_metrics(model: &Model, params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<Option<SplitMetrics>> {
    let batches: Vec<Vec<usize>> = sorted_batches(data.len(), cfg.batch_size)
        .into_iter()
        .filter(|b| b.len() >= 2)
        .collect();
    if batches.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for b in &batches {
        let images: Vec<Tensor> = b.iter().map(|&i| data.get(i).image.clone()).collect();
        let labels: Vec<usize> = b.iter().map(|&i| data.get(i).label).collect();
        total += contrastive_step(model, params, &images, &labels, cfg.loss.tau, false)?.loss;
    }
    Ok(Some(SplitMetrics {
        loss: total / batches.len() as f64,
        accuracy: None,
    }))
}

/// Stage 1 starting from the configured initialization.
pub fn train_representation(data: &DataSplits, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let params = cfg.initial_params()?;
    let mut report = TrainReport::new(cfg);
    let params = representation_stage(data, params, cfg, &mut report)?;
    Ok((params, report))
}

/// Stage 1 starting from `params`; records are appended to `report`.
pub fn representation_stage(
    data: &DataSplits,
    mut params: ModelParams,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<ModelParams> {
    cfg.validate()?;
    cfg.check_data(&data.train)?;
    if cfg.batch_size < 2 {
        return Err(Error::config(
            "train.batch_size",
            "the contrastive stage needs at least 2 samples per batch",
        ));
    }
    let model = Model::new(cfg.model.clone())?;
    let train = &data.train;
    let mut opt = Optimizer::new(cfg.optimizer_stage1.clone());
    let views = if cfg.two_view { 2 } else { 1 };
    for epoch in 1..=cfg.epochs_stage1 {
        let start = Instant::now();
        let batches = epoch_batches(train.len(), cfg.batch_size, derive_seed(cfg.seed, &[1]), epoch)?;
        let (mut total, mut counted, mut degenerate, mut skipped) = (0.0, 0, 0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            if batch.len() < 2 {
                skipped += batch.len();
                continue;
            }
            let mut images = Vec::with_capacity(batch.len() * views);
            let mut labels = Vec::with_capacity(batch.len() * views);
            for view in 0..views {
                let augmented = batch
                    .par_iter()
                    .map(|&i| augment(train.get(i), &cfg.augment, augment_seed(cfg, 1, epoch, i, view)))
                    .collect::<Result<Vec<Sample>>>()?;
                for s in augmented {
                    labels.push(s.label);
                    images.push(s.image);
                }
            }
            let step = contrastive_step(&model, &params, &images, &labels, cfg.loss.tau, true)?;
            if !step.loss.is_finite() {
                return Err(numerical(1, epoch, bi + 1, "contrastive loss", step.loss));
            }
            counted += 1;
            total += step.loss;
            if step.anchors_with_positives == 0 {
                degenerate += 1;
                continue;
            }
            opt.step(&mut params, &step.grads)?;
        }
        if counted == 0 {
            return Err(Error::Degenerate("no training batch has two or more samples".into()));
        }
        let (val, test) = if cfg.evaluate_each_epoch {
            (
                data.val.as_ref().map(|d| contrastive_metrics(&model, &params, d, cfg)).transpose()?.flatten(),
                data.test.as_ref().map(|d| contrastive_metrics(&model, &params, d, cfg)).transpose()?.flatten(),
            )
        } else {
            (None, None)
        };
        let record = EpochRecord {
            stage: 1,
            epoch,
            mean_loss: total / counted as f64,
            train_accuracy: None,
            seconds: if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
            batch_size: cfg.batch_size,
            batches: counted,
            degenerate_batches: degenerate,
            skipped_samples: skipped,
            val,
            test,
        };
        log::info!(
            "stage 1 epoch {epoch}: loss {:.6} ({} batches)",
            record.mean_loss,
            record.batches
        );
        report.records.push(record);
    }
    Ok(params)
}

fn classifier_step(
    model: &Model,
    params: &ModelParams,
    samples: &[&Sample],
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<(f64, usize, BTreeMap<String, Tensor>)> {
    let reps = representations(model, params, samples)?;
    let stats = aux_stats_batch(samples, model.config().aux_kinds())?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut g = Graph::new();
    let b = params.bind(&mut g, &[Group::AuxFeaturizer, Group::Classifier], with_grads);
    let r = g.constant(reps);
    let mut feats = Vec::new();
    for &kind in model.config().aux_kinds() {
        let s = g.constant(stats[&kind].clone());
        feats.push(model.aux_featurize(&mut g, &b, kind, s)?);
    }
    let fused = model.fuse(&mut g, r, &feats)?;
    let lp = model.classifier_log_probs(&mut g, &b, fused)?;
    let loss = focal_loss_from_log_probs(&mut g, lp, &labels, loss_cfg)?;
    let value = g.value(loss).item();
    let correct = argmax_rows(g.value(lp))
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let mut grads = BTreeMap::new();
    if with_grads && value.is_finite() {
        param_grads(&b, &g.backward(loss)?, &mut grads);
    }
    Ok((value, correct, grads))
}

fn classifier_metrics(model: &Model, params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<SplitMetrics> {
    let (mut total, mut correct) = (0.0, 0);
    let batches = sorted_batches(data.len(), cfg.batch_size);
    for b in &batches {
        let samples: Vec<&Sample> = b.iter().map(|&i| data.get(i)).collect();
        let (loss, c, _) = classifier_step(model, params, &samples, &cfg.loss, false)?;
        total += loss * b.len() as f64;
        correct += c;
    }
    Ok(SplitMetrics {
        loss: total / data.len() as f64,
        accuracy: Some(correct as f64 / data.len() as f64),
    })
}

fn check_aux(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let available = data.common_aux();
    if let Some(missing) = cfg.model.aux_kinds().iter().find(|k| !available.contains(k)) {
        return Err(Error::config(
            "train.model.num_aux",
            format!(
                "{} auxiliaries requested but `{missing}` is not present on every sample",
                cfg.model.num_aux
            ),
        ));
    }
    Ok(())
}

/// Stage 2: freezes the encoder and projection and trains the auxiliary
/// featurizer and classifier.
pub fn train_classifier(data: &DataSplits, params: ModelParams, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let mut report = TrainReport::new(cfg);
    let params = classifier_stage(data, params, cfg, &mut report)?;
    Ok((params, report))
}

fn classifier_stage(
    data: &DataSplits,
    mut params: ModelParams,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<ModelParams> {
    cfg.validate()?;
    cfg.check_data(&data.train)?;
    check_aux(cfg, &data.train)?;
    let model = Model::new(cfg.model.clone())?;
    params.freeze_group(Group::Encoder);
    params.freeze_group(Group::Projection);
    let train = &data.train;
    let mut opt = Optimizer::new(cfg.optimizer_stage2.clone());
    for epoch in 1..=cfg.epochs_stage2 {
        let start = Instant::now();
        let batches = epoch_batches(train.len(), cfg.batch_size, derive_seed(cfg.seed, &[2]), epoch)?;
        let (mut total, mut correct) = (0.0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let samples = batch
                .par_iter()
                .map(|&i| augment(train.get(i), &cfg.augment, augment_seed(cfg, 2, epoch, i, 0)))
                .collect::<Result<Vec<Sample>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (loss, c, grads) = classifier_step(&model, &params, &refs, &cfg.loss, true)?;
            if !loss.is_finite() {
                return Err(numerical(2, epoch, bi + 1, "focal loss", loss));
            }
            total += loss;
            correct += c;
            opt.step(&mut params, &grads)?;
        }
        let (val, test) = if cfg.evaluate_each_epoch {
            (
                data.val.as_ref().map(|d| classifier_metrics(&model, &params, d, cfg)).transpose()?,
                data.test.as_ref().map(|d| classifier_metrics(&model, &params, d, cfg)).transpose()?,
            )
        } else {
            (None, None)
        };
        let record = EpochRecord {
            stage: 2,
            epoch,
            mean_loss: total / batches.len() as f64,
            train_accuracy: Some(correct as f64 / train.len() as f64),
            seconds: if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
            batch_size: cfg.batch_size,
            batches: batches.len(),
            degenerate_batches: 0,
            skipped_samples: 0,
            val,
            test,
        };
        log::info!(
            "stage 2 epoch {epoch}: loss {:.6}, train accuracy {:.4}",
            record.mean_loss,
            record.train_accuracy.unwrap_or(0.0)
        );
        report.records.push(record);
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    Both,
    RepresentationOnly,
}

fn accuracy(model: &Model, params: &ModelParams, data: &Dataset) -> Result<f64> {
    let pred = predict(model, params, data)?;
    let correct = pred.iter().zip(data.samples()).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Runs the configured stages and, when `out` is given, writes the
/// checkpoint, the per-epoch report and a summary there.
pub fn run_pipeline(
    cfg: &TrainConfig,
    data: &DataSplits,
    stages: Stages,
    out: Option<&Path>,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if stages == Stages::Both {
        check_aux(cfg, &data.train)?;
    }
    let mut report = TrainReport::new(cfg);
    let mut params = representation_stage(data, cfg.initial_params()?, cfg, &mut report)?;
    if stages == Stages::Both {
        params = classifier_stage(data, params, cfg, &mut report)?;
        let model = Model::new(cfg.model.clone())?;
        report.final_metrics = Some(FinalMetrics {
            val_accuracy: data.val.as_ref().map(|d| accuracy(&model, &params, d)).transpose()?,
            test_accuracy: data.test.as_ref().map(|d| accuracy(&model, &params, d)).transpose()?,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        params.save(dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(REPORT_FILE), report.to_jsonl().as_bytes())?;
        write_file(&dir.join(SUMMARY_FILE), report.summary_json().as_bytes())?;
    }
    Ok((params, report))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
