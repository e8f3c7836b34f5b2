//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr so the verdicts survive output capture.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use mscn_core::data::{generate_synthetic, load_dataset_dir, synthesize, DataSplits, SyntheticSpec};
use mscn_core::eval::{evaluate_classifier, evaluate_embeddings};
use mscn_core::losses::{
    cross_entropy_value, focal_loss_value, supervised_contrastive_loss_value, LabeledEmbeddingBatch, LossConfig,
};
use mscn_core::model::{Group, Model, ModelParams};
use mscn_core::numerics::{Tensor, OP_NAMES};
use mscn_core::selfcheck::{check_contrastive_composite, check_focal_composite, check_op, GRAD_TOLERANCE};
use mscn_core::training::{train_classifier, train_representation, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: [u64; 3] = [0, 1, 2];
const MINORITY: usize = 3;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: u8, name: &str, passed: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} {}: {name}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// 1. gradients

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _g = serial();
    let started = Instant::now();
    let mut outcomes: Vec<_> = OP_NAMES.iter().enumerate().map(|(i, op)| check_op(op, 100 + i as u64)).collect();
    outcomes.push(check_contrastive_composite(100));
    outcomes.push(check_focal_composite(100));
    let elapsed = started.elapsed();
    let worst = outcomes.iter().filter_map(|c| c.max_rel_error).fold(0.0f64, f64::max);
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let passed = failed.is_empty() && worst <= GRAD_TOLERANCE && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient correctness",
        passed,
        &format!(
            "{} checks, max relative error {worst:.2e}, {:.1}s, failed {failed:?}",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 2. loss oracles

fn double_loop_contrastive(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..z.len() {
        let positives: Vec<usize> = (0..z.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..z.len() {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &p in &positives {
            s += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
    }
    total
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[test]
fn criterion_2_losses_match_independent_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut contrastive_err = 0.0f64;
    for case in 0..100 {
        let n = rng.gen_range(2..=16);
        let d = rng.gen_range(2..=32);
        let tau = [0.1, 0.5, 1.0][case % 3];
        let z = random_unit_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let batch = LabeledEmbeddingBatch::new(Tensor::from_rows(&z).unwrap(), labels.clone(), 4).unwrap();
        let got = supervised_contrastive_loss_value(&batch, tau).unwrap();
        contrastive_err = contrastive_err.max((got - double_loop_contrastive(&z, &labels, tau)).abs());
    }

    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let batch = LabeledEmbeddingBatch::new(Tensor::from_rows(&z).unwrap(), vec![0, 0, 1], 2).unwrap();
    let worked = supervised_contrastive_loss_value(&batch, 1.0).unwrap();
    // Anchor 0 gives ln(1 + 1/e), anchor 1 gives ln 2, anchor 2 has no positive.
    let by_hand = (1.0 + (-1f64).exp()).ln() + 2f64.ln();
    assert!((by_hand - 1.006409).abs() <= 1e-6);

    let (mut focal_err, mut ce_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let c = rng.gen_range(2..=6);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let alpha: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let gamma = rng.gen_range(0.0..5.0);
        let p = Tensor::from_rows(&probs).unwrap();

        let direct: f64 = labels
            .iter()
            .zip(&probs)
            .map(|(&t, row)| -alpha[t] * (1.0 - row[t]).powf(gamma) * row[t].ln())
            .sum::<f64>()
            / n as f64;
        let cfg = LossConfig { tau: 0.1, alpha, gamma };
        focal_err = focal_err.max((focal_loss_value(&p, &labels, &cfg).unwrap().0 - direct).abs());

        let ce_direct: f64 = labels.iter().zip(&probs).map(|(&t, row)| -row[t].ln()).sum::<f64>() / n as f64;
        let plain = LossConfig { tau: 0.1, alpha: vec![1.0; c], gamma: 0.0 };
        let fl = focal_loss_value(&p, &labels, &plain).unwrap().0;
        ce_err = ce_err
            .max((fl - ce_direct).abs())
            .max((fl - cross_entropy_value(&p, &labels).unwrap()).abs());
    }

    let passed = contrastive_err <= 1e-9 && (worked - 1.006409).abs() <= 1e-6 && focal_err <= 1e-12 && ce_err <= 1e-12;
    verdict(
        2,
        "loss oracle equivalence",
        passed,
        &format!(
            "contrastive vs double loop {contrastive_err:.2e}, worked example {worked:.6}, \
             focal vs direct {focal_err:.2e}, focal(γ=0,α=1) vs cross-entropy {ce_err:.2e}"
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 3-6. the trend experiment: one stage-1 run per seed, shared by every
// stage-2 variant (stage 1 depends only on the encoder settings and seed).

struct StageTwo {
    accuracy: f64,
    minority_recall: f64,
    seconds: f64,
}

struct SeedRun {
    sep_init: f64,
    sep_trained: f64,
    first_loss: f64,
    last_loss: f64,
    stage1_seconds: f64,
    encoder_frozen: bool,
    aux4: StageTwo,
    aux1: StageTwo,
    aux0: StageTwo,
    cross_entropy: StageTwo,
}

fn experiment_data(seed: u64) -> DataSplits {
    synthesize(&SyntheticSpec {
        num_val: 0,
        num_test: 2000,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn base_config(seed: u64, data: &DataSplits) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        evaluate_each_epoch: false,
        ..TrainConfig::default()
    };
    cfg.model.image_shape = data.train.image_shape().unwrap();
    cfg
}

fn stage_two(data: &DataSplits, stage1: &ModelParams, cfg: &TrainConfig, check_freeze: bool) -> (StageTwo, bool) {
    let started = Instant::now();
    let mut init = cfg.initial_params().unwrap();
    for group in [Group::Encoder, Group::Projection] {
        let names: Vec<String> = stage1.names_in(group).map(String::from).collect();
        for name in names {
            init.set(&name, stage1.get(&name).unwrap().clone()).unwrap();
        }
    }
    let before = init.group_bytes(Group::Encoder);
    let (trained, report) = train_classifier(data, init, cfg).unwrap();
    assert_eq!(report.records.len(), cfg.epochs_stage2);
    let frozen = !check_freeze || trained.group_bytes(Group::Encoder) == before;
    let model = Model::new(cfg.model.clone()).unwrap();
    let eval = evaluate_classifier(&model, &trained, data.test.as_ref().unwrap()).unwrap();
    let run = StageTwo {
        accuracy: eval.accuracy,
        minority_recall: eval.per_class_recall[MINORITY].unwrap(),
        seconds: started.elapsed().as_secs_f64(),
    };
    (run, frozen)
}

fn run_seed(seed: u64) -> SeedRun {
    let data = experiment_data(seed);
    let cfg = base_config(seed, &data);
    let model = Model::new(cfg.model.clone()).unwrap();

    let started = Instant::now();
    let init = cfg.initial_params().unwrap();
    let sep_init = evaluate_embeddings(&model, &init, &data.train).unwrap().separation_ratio;
    let (stage1, report) = train_representation(&data, &cfg).unwrap();
    let sep_trained = evaluate_embeddings(&model, &stage1, &data.train).unwrap().separation_ratio;
    let losses: Vec<f64> = report.stage(1).map(|r| r.mean_loss).collect();
    assert_eq!(losses.len(), 15);
    let stage1_seconds = started.elapsed().as_secs_f64();

    let with_aux = |n: usize| {
        let mut c = cfg.clone();
        c.model.num_aux = n;
        c
    };
    let (aux4, encoder_frozen) = stage_two(&data, &stage1, &with_aux(4), true);
    let (aux1, _) = stage_two(&data, &stage1, &with_aux(1), false);
    let (aux0, _) = stage_two(&data, &stage1, &with_aux(0), false);
    let mut ce = with_aux(4);
    ce.loss = LossConfig::cross_entropy(ce.model.num_classes, ce.loss.tau);
    let (cross_entropy, _) = stage_two(&data, &stage1, &ce, false);

    SeedRun {
        sep_init,
        sep_trained,
        first_loss: losses[0],
        last_loss: losses[14],
        stage1_seconds,
        encoder_frozen,
        aux4,
        aux1,
        aux0,
        cross_entropy,
    }
}

fn experiment() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn mean(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

#[test]
fn criterion_3_encoder_is_frozen_through_stage_two() {
    let _g = serial();
    let runs = experiment();
    let passed = runs.iter().all(|r| r.encoder_frozen);
    let per_seed: Vec<bool> = runs.iter().map(|r| r.encoder_frozen).collect();
    verdict(
        3,
        "freeze invariant",
        passed,
        &format!("encoder bytes identical after 10-epoch stage 2, per seed {per_seed:?}"),
    );
    assert!(passed);
}

#[test]
fn criterion_4_stage_one_clusters_the_classes() {
    let _g = serial();
    let runs = experiment();
    let ok = |r: &SeedRun| r.sep_trained > r.sep_init && r.last_loss < r.first_loss && r.stage1_seconds < 300.0;
    let passed = runs.iter().all(ok);
    let detail: Vec<String> = SEEDS
        .iter()
        .zip(runs)
        .map(|(s, r)| {
            format!(
                "seed {s}: separation {:.4} -> {:.4}, loss {:.3} -> {:.3}, {:.0}s",
                r.sep_init, r.sep_trained, r.first_loss, r.last_loss, r.stage1_seconds
            )
        })
        .collect();
    verdict(4, "clustering effect of stage 1", passed, &detail.join("; "));
    assert!(passed);
}

#[test]
fn criterion_5_more_auxiliaries_help() {
    let _g = serial();
    let runs = experiment();
    let (a4, a1, a0) = (
        mean(runs, |r| r.aux4.accuracy),
        mean(runs, |r| r.aux1.accuracy),
        mean(runs, |r| r.aux0.accuracy),
    );
    let slowest = runs
        .iter()
        .flat_map(|r| [&r.aux4, &r.aux1, &r.aux0].map(|s| r.stage1_seconds + s.seconds))
        .fold(0.0f64, f64::max);
    let passed = a4 >= a0 + 0.05 && a4 >= a1 && slowest < 600.0;
    verdict(
        5,
        "multimodal fusion trend",
        passed,
        &format!("3-seed mean test accuracy 4-aux {a4:.4}, 1-aux {a1:.4}, 0-aux {a0:.4}; slowest configuration {slowest:.0}s"),
    );
    assert!(passed);
}

#[test]
fn criterion_6_focal_loss_keeps_minority_recall() {
    let _g = serial();
    let runs = experiment();
    let (focal_recall, ce_recall) = (
        mean(runs, |r| r.aux4.minority_recall),
        mean(runs, |r| r.cross_entropy.minority_recall),
    );
    let (focal_acc, ce_acc) = (mean(runs, |r| r.aux4.accuracy), mean(runs, |r| r.cross_entropy.accuracy));
    let passed = focal_recall >= ce_recall && (focal_acc - ce_acc).abs() <= 0.03;
    verdict(
        6,
        "class-imbalance behavior",
        passed,
        &format!(
            "3-seed mean minority recall focal {focal_recall:.4} vs cross-entropy {ce_recall:.4}; \
             accuracy focal {focal_acc:.4} vs cross-entropy {ce_acc:.4}"
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 7. determinism through the binary

fn mscn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mscn"))
        .args(args)
        .env("MSCN_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn criterion_7_deterministic_runs_are_byte_identical() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = mscn(&[
        "generate",
        "--out",
        p(&data),
        "--set",
        "synthetic.num_train=64",
        "--set",
        "synthetic.num_val=16",
        "--set",
        "synthetic.num_test=16",
        "--set",
        "synthetic.image_size=16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut identical = Vec::new();
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for run in &runs {
        let out = mscn(&["train", "--data", p(&data), "--out", p(run), "--set", "train.seed=5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["checkpoint.mscn", "report.jsonl", "summary.json"] {
        let a = fs::read(runs[0].join(file)).unwrap();
        let b = fs::read(runs[1].join(file)).unwrap();
        identical.push((file, a == b));
    }
    let records = fs::read_to_string(runs[0].join("report.jsonl")).unwrap().lines().count();
    let passed = identical.iter().all(|(_, same)| *same) && records == 25;
    verdict(
        7,
        "determinism",
        passed,
        &format!("two default-schedule runs ({records} records), identical files {identical:?}"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 8. format round-trips

fn random_spec(rng: &mut ChaCha8Rng) -> SyntheticSpec {
    let classes = rng.gen_range(2..=5);
    let weights: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut proportions: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let rest: f64 = proportions[1..].iter().sum();
    proportions[0] = 1.0 - rest;
    let num_aux = rng.gen_range(0..=4);
    SyntheticSpec {
        num_train: rng.gen_range(classes..40),
        num_val: rng.gen_range(0..10),
        num_test: rng.gen_range(0..10),
        class_proportions: proportions,
        image_size: rng.gen_range(4..=20),
        aux_size: rng.gen_range(2..=12),
        separation: rng.gen_range(0.5..6.0),
        aux_informativeness: (0..num_aux).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        noise: rng.gen_range(0.0..2.0),
        seed: rng.gen(),
    }
}

#[test]
fn criterion_8_formats_round_trip() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();

    let mut ckpt_ok = true;
    for seed in 0..5 {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        cfg.model.num_aux = [0, 1, 2, 4, 4][seed as usize];
        let params = cfg.initial_params().unwrap();
        let first = tmp.path().join(format!("p{seed}.mscn"));
        let second = tmp.path().join(format!("q{seed}.mscn"));
        params.save(&first).unwrap();
        let loaded = ModelParams::load(&first).unwrap();
        loaded.save(&second).unwrap();
        ckpt_ok &= fs::read(&first).unwrap() == fs::read(&second).unwrap() && loaded == params;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut errors = Vec::new();
    for i in 0..10 {
        let spec = random_spec(&mut rng);
        let dir = tmp.path().join(format!("d{i}"));
        let result = generate_synthetic(&spec, &dir)
            .and_then(|_| load_dataset_dir(&dir, spec.num_classes()))
            .map(|loaded| {
                let memory = synthesize(&spec).unwrap();
                loaded.train == memory.train && loaded.val == memory.val && loaded.test == memory.test
            });
        match result {
            Ok(true) => {}
            Ok(false) => errors.push(format!("spec {i}: loaded data differs from synthesis")),
            Err(e) => errors.push(format!("spec {i}: {e}")),
        }
    }

    let passed = ckpt_ok && errors.is_empty();
    verdict(
        8,
        "format round-trips",
        passed,
        &format!("checkpoint save-load-save identical: {ckpt_ok}; 10 random datasets, errors {errors:?}"),
    );
    assert!(passed);
}
