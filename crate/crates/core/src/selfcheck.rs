//! Runtime verification suite: finite-difference gradient checks for every
//! differentiable operation and for both composite losses, loss oracles,
//! and the stage-2 freeze invariant.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synthesize, SyntheticSpec};
use crate::error::Result;
use crate::losses::{
    cross_entropy_value, focal_loss_from_log_probs, focal_loss_value, supervised_contrastive_loss,
    supervised_contrastive_loss_value, LabeledEmbeddingBatch, LossConfig,
};
use crate::model::{AuxKind, Bound, EncoderKind, Group, Model, ModelConfig, ModelParams, AUX_STATS};
use crate::numerics::gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport, DEFAULT_STEP};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::training::{train_classifier, TrainConfig};

/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Random instances per gradient check.
pub const INSTANCES: usize = 20;
/// Coordinates compared per parameter tensor in the composite checks.
pub const COMPOSITE_COORDS: usize = 40;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Largest relative gradient error, for gradient checks.
    pub max_rel_error: Option<f64>,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so ReLU kinks stay out of reach of the step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Random weighting so every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let y = g.mul_const(x, w.clone())?;
    Ok(g.sum(y))
}

fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let r = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    match op {
        "matmul" => {
            let k = rng.gen_range(1..5);
            let w = rand_tensor(rng, &[r, c]);
            (
                vec![rand_tensor(rng, &[r, k]), rand_tensor(rng, &[k, c])],
                Box::new(move |g, x| {
                    let y = g.matmul(x[0], x[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "transpose" => {
            let w = rand_tensor(rng, &[c, r]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.transpose(x[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "add" | "mul" => {
            let w = rand_tensor(rng, &[r, c]);
            let is_add = op == "add";
            (
                vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = if is_add { g.add(x[0], x[1])? } else { g.mul(x[0], x[1])? };
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "add_row_bias" => {
            let w = rand_tensor(rng, &[r, c]);
            (
                vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])],
                Box::new(move |g, x| {
                    let y = g.add_row_bias(x[0], x[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "conv2d" => {
            let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let size = rng.gen_range(3..7);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let o = (size + 2 * pad - 3) / stride + 1;
            let w = rand_tensor(rng, &[co, o, o]);
            (
                vec![rand_tensor(rng, &[ci, size, size]), rand_tensor(rng, &[co, ci, 3, 3])],
                Box::new(move |g, x| {
                    let y = g.conv2d(x[0], x[1], stride, pad)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "add_channel_bias" => {
            let w = rand_tensor(rng, &[c, r, r]);
            (
                vec![rand_tensor(rng, &[c, r, r]), rand_tensor(rng, &[c])],
                Box::new(move |g, x| {
                    let y = g.add_channel_bias(x[0], x[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "relu" => {
            let w = rand_tensor(rng, &[r, c]);
            (
                vec![rand_away_from_zero(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.relu(x[0]);
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "concat" => {
            let c2 = rng.gen_range(1..4);
            let w = rand_tensor(rng, &[r, c + c2]);
            (
                vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c2])],
                Box::new(move |g, x| {
                    let y = g.concat(x[0], x[1])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "stack_rows" => {
            let w = rand_tensor(rng, &[r, c]);
            (
                (0..r).map(|_| rand_tensor(rng, &[c])).collect(),
                Box::new(move |g, x| {
                    let y = g.stack_rows(x)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "reshape" => {
            let w = rand_tensor(rng, &[r * c]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.reshape(x[0], &[r * c])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "global_avg_pool" => {
            let w = rand_tensor(rng, &[c]);
            (
                vec![rand_tensor(rng, &[c, r, r + 1])],
                Box::new(move |g, x| {
                    let y = g.global_avg_pool(x[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "l2_normalize" => {
            let w = rand_tensor(rng, &[r, c]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.l2_normalize(x[0])?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "log_softmax" => {
            let w = rand_tensor(rng, &[r, c]);
            let mask: Vec<bool> = (0..r * c).map(|k| k % c != k / c % c).collect();
            let masked = rng.gen_bool(0.5);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = if masked {
                        g.masked_log_softmax(x[0], mask.clone())?
                    } else {
                        g.log_softmax(x[0])?
                    };
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "exp" => {
            let w = rand_tensor(rng, &[r, c]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.exp(x[0]);
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "ln" | "pow_scalar" => {
            let w = rand_tensor(rng, &[r, c]);
            let p = rng.gen_range(-2.0..3.0);
            let is_ln = op == "ln";
            let x0 = rand_tensor(rng, &[r, c]).map(|v| v.abs() + 0.2);
            (
                vec![x0],
                Box::new(move |g, x| {
                    let y = if is_ln { g.ln(x[0], 1e-15) } else { g.pow_scalar(x[0], p) };
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "pick_rows" => {
            let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let w = rand_tensor(rng, &[r]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.pick_rows(x[0], &idx)?;
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "mul_const" => {
            let k = rand_tensor(rng, &[r, c]);
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.mul_const(x[0], k.clone())?;
                    let y = g.mul(y, x[0])?;
                    Ok(g.sum(y))
                }),
            )
        }
        "affine" => {
            let w = rand_tensor(rng, &[r, c]);
            let (s, t) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let y = g.affine(x[0], s, t);
                    weighted_sum(g, y, &w)
                }),
            )
        }
        "sum" | "mean" => {
            let is_sum = op == "sum";
            (
                vec![rand_tensor(rng, &[r, c])],
                Box::new(move |g, x| {
                    let sq = g.mul(x[0], x[0])?;
                    if is_sum {
                        Ok(g.sum(sq))
                    } else {
                        g.mean(sq)
                    }
                }),
            )
        }
        other => panic!("no gradient check for `{other}`"),
    }
}

fn grad_outcome(name: &str, started: Instant, reports: Result<Vec<GradCheckReport>>) -> CheckOutcome {
    let seconds = started.elapsed().as_secs_f64();
    match reports {
        Ok(reports) => {
            let mut total = GradCheckReport::default();
            for r in &reports {
                total.merge(r);
            }
            let passed = total.checked > 0 && total.max_rel_error <= GRAD_TOLERANCE;
            CheckOutcome {
                name: name.to_string(),
                passed,
                max_rel_error: Some(total.max_rel_error),
                detail: format!(
                    "{} instances, {} coordinates, {} skipped at kinks",
                    reports.len(),
                    total.checked,
                    total.skipped
                ),
                seconds,
            }
        }
        Err(e) => CheckOutcome {
            name: name.to_string(),
            passed: false,
            max_rel_error: None,
            detail: e.to_string(),
            seconds,
        },
    }
}

fn outcome(name: &str, started: Instant, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, e.to_string()));
    CheckOutcome {
        name: name.to_string(),
        passed,
        max_rel_error: None,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Gradient check of one operation on [`INSTANCES`] random instances.
pub fn check_op(op: &str, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = (0..INSTANCES)
        .map(|_| {
            let (inputs, f) = op_instance(op, &mut rng);
            check_gradients(&inputs, DEFAULT_STEP, |g, x| f(g, x))
        })
        .collect();
    grad_outcome(&format!("grad/{op}"), started, reports)
}

fn composite_config() -> ModelConfig {
    ModelConfig {
        encoder_kind: EncoderKind::SmallCnn,
        image_shape: [3, 8, 8],
        rep_dim: 6,
        mlp_hidden: 8,
        proj_hidden: 8,
        proj_out: 4,
        aux_feature_dim: 3,
        aux_dense: true,
        classifier_hidden: vec![8, 6],
        num_classes: 4,
        num_aux: 2,
    }
}

/// Inputs for a gradient check over every parameter of `groups`. Biases are
/// shifted off zero so their paths carry signal.
fn group_inputs(params: &ModelParams, groups: &[Group]) -> (Vec<String>, Vec<Tensor>) {
    let names: Vec<String> = groups
        .iter()
        .flat_map(|&gr| params.names_in(gr).map(str::to_string).collect::<Vec<_>>())
        .collect();
    let inputs = names.iter().map(|n| params.get(n).unwrap().map(|v| v + 0.05)).collect();
    (names, inputs)
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Vec<Tensor> {
    (0..n)
        .map(|_| rand_tensor(rng, &shape).map(|v| 0.5 + 0.5 * v))
        .collect()
}

/// Contrastive loss differentiated through encoder and projection head.
pub fn check_contrastive_composite(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let cfg = composite_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = (0..INSTANCES)
        .map(|i| {
            let params = ModelParams::init(&cfg, seed.wrapping_add(i as u64))?;
            let (names, inputs) = group_inputs(&params, &[Group::Encoder, Group::Projection]);
            let n = rng.gen_range(3..6);
            let images = random_images(&mut rng, n, cfg.image_shape);
            let labels: Vec<usize> = (0..n).map(|k| if k < 2 { 0 } else { rng.gen_range(0..3) }).collect();
            let tau = [0.1, 0.5, 1.0][i % 3];
            check_gradients_sampled(&inputs, DEFAULT_STEP, COMPOSITE_COORDS, &mut rng, |g, ids| {
                let b = Bound::from_pairs(names.iter().cloned().zip(ids.iter().copied()));
                let mut zs = Vec::with_capacity(n);
                for img in &images {
                    let x = g.constant(img.clone());
                    let rep = model.encoder_forward(g, &b, x)?;
                    zs.push(model.projection_forward(g, &b, rep)?);
                }
                let z = g.stack_rows(&zs)?;
                Ok(supervised_contrastive_loss(g, z, &labels, tau)?.loss)
            })
        })
        .collect();
    grad_outcome("grad/contrastive_composite", started, reports)
}

/// Focal loss differentiated through encoder, auxiliary featurizer, fusion
/// and classifier.
pub fn check_focal_composite(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let cfg = composite_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = (0..INSTANCES)
        .map(|i| {
            let params = ModelParams::init(&cfg, seed.wrapping_add(i as u64))?;
            let groups = [Group::Encoder, Group::AuxFeaturizer, Group::Classifier];
            let (names, inputs) = group_inputs(&params, &groups);
            let n = rng.gen_range(2..5);
            let images = random_images(&mut rng, n, cfg.image_shape);
            let stats: Vec<Tensor> = cfg
                .aux_kinds()
                .iter()
                .map(|_| rand_tensor(&mut rng, &[n, AUX_STATS]))
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
            let loss_cfg = LossConfig {
                tau: 0.1,
                alpha: (0..cfg.num_classes).map(|_| rng.gen_range(0.1..1.0)).collect(),
                gamma: [0.0, 1.0, 2.0][i % 3],
            };
            let kinds: &[AuxKind] = cfg.aux_kinds();
            check_gradients_sampled(&inputs, DEFAULT_STEP, COMPOSITE_COORDS, &mut rng, |g, ids| {
                let b = Bound::from_pairs(names.iter().cloned().zip(ids.iter().copied()));
                let mut reps = Vec::with_capacity(n);
                for img in &images {
                    let x = g.constant(img.clone());
                    reps.push(model.encoder_forward(g, &b, x)?);
                }
                let r = g.stack_rows(&reps)?;
                let mut feats = Vec::new();
                for (&kind, st) in kinds.iter().zip(&stats) {
                    let s = g.constant(st.clone());
                    feats.push(model.aux_featurize(g, &b, kind, s)?);
                }
                let fused = model.fuse(g, r, &feats)?;
                let lp = model.classifier_log_probs(g, &b, fused)?;
                focal_loss_from_log_probs(g, lp, &labels, &loss_cfg)
            })
        })
        .collect();
    grad_outcome("grad/focal_composite", started, reports)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Anchor-by-anchor double loop; anchors without positives contribute nothing.
fn contrastive_double_loop(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        let (mut acc, mut count) = (0.0, 0usize);
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                acc += ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total -= acc / count as f64;
        }
    }
    total
}

/// Vectorized contrastive loss against the double loop on 100 random
/// batches, plus the three-sample worked example.
pub fn check_contrastive_oracle(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for case in 0..100 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=32);
            let tau = [0.1, 0.5, 1.0][case % 3];
            let z = unit_rows(&mut rng, n, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let batch = LabeledEmbeddingBatch::new(Tensor::from_rows(&z)?, labels.clone(), 4)?;
            let got = supervised_contrastive_loss_value(&batch, tau)?;
            worst = worst.max((got - contrastive_double_loop(&z, &labels, tau)).abs());
        }
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let batch = LabeledEmbeddingBatch::new(Tensor::from_rows(&z)?, vec![0, 0, 1], 2)?;
        let worked = supervised_contrastive_loss_value(&batch, 1.0)?;
        let passed = worst <= 1e-9 && (worked - 1.006409).abs() <= 1e-6;
        Ok((passed, format!("max |vectorized - loop| {worst:.3e}; worked example {worked:.6}")))
    };
    outcome("oracle/contrastive", started, run())
}

/// Focal loss against direct evaluation, and against cross-entropy at
/// γ = 0, α = 1.
pub fn check_focal_oracle(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut direct_err, mut ce_err) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let c = rng.gen_range(2..6);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let p = Tensor::from_rows(&rows)?;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let alpha: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gamma = rng.gen_range(0.0..4.0);
            let direct = labels
                .iter()
                .enumerate()
                .map(|(i, &t)| -alpha[t] * (1.0 - rows[i][t]).powf(gamma) * rows[i][t].ln())
                .sum::<f64>()
                / n as f64;
            let cfg = LossConfig { tau: 0.1, alpha, gamma };
            direct_err = direct_err.max((focal_loss_value(&p, &labels, &cfg)?.0 - direct).abs());
            let (fl, _) = focal_loss_value(&p, &labels, &LossConfig::cross_entropy(c, 0.1))?;
            ce_err = ce_err.max((fl - cross_entropy_value(&p, &labels)?).abs());
        }
        let half = Tensor::from_rows(&[vec![0.5, 0.5]])?;
        let cfg = LossConfig { tau: 0.1, alpha: vec![0.8], gamma: 2.0 };
        let example = focal_loss_value(&half, &[0], &cfg)?.0;
        let passed = direct_err <= 1e-12 && ce_err <= 1e-12 && (example - 0.138629).abs() <= 1e-6;
        Ok((
            passed,
            format!("max |focal - direct| {direct_err:.3e}; max |focal(γ=0,α=1) - CE| {ce_err:.3e}; p_t=0.5 gives {example:.6}"),
        ))
    };
    outcome("oracle/focal", started, run())
}

/// Encoder and projection bytes before and after a 10-epoch classifier
/// stage on a small synthetic set.
pub fn check_freeze(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let run = || -> Result<(bool, String)> {
        let data = synthesize(&SyntheticSpec {
            num_train: 24,
            num_val: 0,
            num_test: 0,
            image_size: 8,
            aux_size: 4,
            seed,
            ..SyntheticSpec::default()
        })?;
        let mut cfg = TrainConfig {
            epochs_stage2: 10,
            batch_size: 8,
            seed,
            evaluate_each_epoch: false,
            ..TrainConfig::default()
        };
        cfg.model.image_shape = [3, 8, 8];
        cfg.model.rep_dim = 8;
        cfg.model.proj_hidden = 8;
        cfg.model.proj_out = 4;
        cfg.model.classifier_hidden = vec![8];
        let init = cfg.initial_params()?;
        let (trained, report) = train_classifier(&data, init.clone(), &cfg)?;
        let frozen_same = [Group::Encoder, Group::Projection]
            .iter()
            .all(|&gr| trained.group_bytes(gr) == init.group_bytes(gr));
        let trained_moved = trained.group_bytes(Group::Classifier) != init.group_bytes(Group::Classifier);
        Ok((
            frozen_same && trained_moved && report.records.len() == 10,
            format!(
                "encoder/projection identical: {frozen_same}; classifier updated: {trained_moved}; {} epochs",
                report.records.len()
            ),
        ))
    };
    outcome("freeze/stage2", started, run())
}

/// Names of every check run by [`run_selfcheck`], in order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = crate::numerics::OP_NAMES.iter().map(|op| format!("grad/{op}")).collect();
    names.extend(
        [
            "grad/contrastive_composite",
            "grad/focal_composite",
            "oracle/contrastive",
            "oracle/focal",
            "freeze/stage2",
        ]
        .map(String::from),
    );
    names
}

/// Runs every check on the calling thread.
pub fn run_selfcheck(seed: u64) -> SelfCheckReport {
    run_selfcheck_with(seed, |_| {})
}

/// Like [`run_selfcheck`], calling `progress` after each check.
pub fn run_selfcheck_with(seed: u64, mut progress: impl FnMut(&CheckOutcome)) -> SelfCheckReport {
    let mut report = SelfCheckReport::default();
    let mut push = |c: CheckOutcome| {
        progress(&c);
        report.checks.push(c);
    };
    for (i, op) in crate::numerics::OP_NAMES.iter().enumerate() {
        push(check_op(op, seed.wrapping_add(i as u64)));
    }
    push(check_contrastive_composite(seed));
    push(check_focal_composite(seed));
    push(check_contrastive_oracle(seed));
    push(check_focal_oracle(seed));
    push(check_freeze(seed));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{set_gradient_perturbation, OP_NAMES};

    #[test]
    fn every_op_passes_its_gradient_check() {
        for op in OP_NAMES {
            let c = check_op(op, 1);
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn oracles_and_freeze_pass() {
        for c in [check_contrastive_oracle(2), check_focal_oracle(2), check_freeze(2)] {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn perturbed_rule_fails_its_own_check() {
        for op in ["matmul", "conv2d", "l2_normalize", "pick_rows", "pow_scalar"] {
            set_gradient_perturbation(Some(op));
            let c = check_op(op, 3);
            set_gradient_perturbation(None);
            assert!(!c.passed, "{op}: {c:?}");
            assert!(c.max_rel_error.unwrap() > 1e-4);
        }
    }

    #[test]
    fn names_cover_the_suite() {
        assert_eq!(check_names().len(), OP_NAMES.len() + 5);
    }
}
