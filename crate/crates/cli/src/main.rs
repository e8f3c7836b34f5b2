//! `mscn`: synthetic data generation, two-stage training, evaluation,
//! embedding export and self-verification.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mscn_core::data::{generate_synthetic, load_dataset_dir, DataSplits, Dataset, Split};
use mscn_core::eval::{evaluate_classifier, evaluate_embeddings, EvalReport};
use mscn_core::inference::embeddings;
use mscn_core::model::{Model, ModelConfig, ModelParams};
use mscn_core::numerics::{set_gradient_perturbation, OP_NAMES};
use mscn_core::selfcheck::run_selfcheck_with;
use mscn_core::training::{run_pipeline, Stages, TrainReport};
use mscn_core::Error;

use config::RunConfig;

const CONFIG_FILE: &str = "config.json";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) | Error::Degenerate(_) => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mscn", version, about = "Multimodal supervised-contrastive land-use classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with manifests.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoder contrastively, then the fused classifier.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory containing train.csv (overrides `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for checkpoint and reports (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of auxiliary inputs fused into the classifier.
        #[arg(long)]
        num_aux: Option<usize>,
        /// Run only the representation stage.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Export projected embeddings as CSV.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run gradient checks, loss oracles and freeze invariants.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Corrupt the backward rule of one operation.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("MSCN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("MSCN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))
}

fn deterministic_env() -> bool {
    std::env::var("MSCN_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Generate { cfg, out } => cmd_generate(&cfg, out),
        Command::Train {
            cfg,
            data,
            out,
            num_aux,
            stage1_only,
        } => cmd_train(&cfg, data, out, num_aux, stage1_only),
        Command::Eval {
            ckpt,
            data,
            report,
            split,
        } => cmd_eval(&ckpt, &data, &report, split),
        Command::Embed { ckpt, data, out, split } => cmd_embed(&ckpt, &data, &out, split),
        Command::Selfcheck { seed, report, perturb } => cmd_selfcheck(seed, report.as_deref(), perturb.as_deref()),
    }
}

fn require_path(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(fallback)
        .ok_or_else(|| CliError::usage(format!("--{name} is required (or set `{name}_dir` in the config)")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_generate(args: &ConfigArgs, out: Option<PathBuf>) -> CliResult {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let out = require_path(out, cfg.out_dir.clone(), "out")?;
    let manifests = generate_synthetic(&cfg.synthetic, &out)?;
    for m in &manifests {
        let mut counts = vec![0usize; cfg.synthetic.class_proportions.len()];
        for row in &m.rows {
            counts[row.label] += 1;
        }
        println!("{}: {} samples, class counts {:?}", m.split, m.rows.len(), counts);
    }
    println!("wrote {}", out.join(Split::Train.manifest_file()).display());
    Ok(())
}

fn print_report(report: &TrainReport) {
    for r in &report.records {
        let mut line = format!("stage {} epoch {:>2}: loss {:.6}", r.stage, r.epoch, r.mean_loss);
        if let Some(acc) = r.train_accuracy {
            line += &format!(" train_acc {acc:.4}");
        }
        for (name, m) in [("val", &r.val), ("test", &r.test)] {
            if let Some(m) = m {
                line += &format!(" {name}_loss {:.6}", m.loss);
                if let Some(acc) = m.accuracy {
                    line += &format!(" {name}_acc {acc:.4}");
                }
            }
        }
        if r.degenerate_batches > 0 {
            line += &format!(" degenerate_batches {}", r.degenerate_batches);
        }
        println!("{line}");
    }
    if let Some(f) = &report.final_metrics {
        for (name, acc) in [("val", f.val_accuracy), ("test", f.test_accuracy)] {
            if let Some(acc) = acc {
                println!("final {name} accuracy {acc:.4}");
            }
        }
    }
}

fn cmd_train(
    args: &ConfigArgs,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    num_aux: Option<usize>,
    stage1_only: bool,
) -> CliResult {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let data_dir = require_path(data, cfg.data_dir.clone(), "data")?;
    let out = require_path(out, cfg.out_dir.clone(), "out")?;
    if let Some(n) = num_aux {
        cfg.train.model.num_aux = n;
    }
    if deterministic_env() {
        cfg.train.deterministic = true;
    }
    cfg.train.validate()?;
    let splits = load_dataset_dir(&data_dir, cfg.train.model.num_classes)?;
    if let Some(shape) = splits.train.image_shape() {
        cfg.train.model.image_shape = shape;
    }
    cfg.data_dir = Some(data_dir);
    cfg.out_dir = Some(out.clone());
    let stages = if stage1_only {
        Stages::RepresentationOnly
    } else {
        Stages::Both
    };
    let (_, report) = run_pipeline(&cfg.train, &splits, stages, Some(&out))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_file(&out.join(CONFIG_FILE), resolved + "\n")?;
    print_report(&report);
    println!("wrote {}", out.display());
    Ok(())
}

/// Checkpoint, model and the requested split of `data`.
fn load_for_inference(ckpt: &Path, data: &Path, split: Split) -> CliResult<(Model, ModelParams, Dataset)> {
    let params = ModelParams::load(ckpt)?;
    let probe = ModelConfig::infer(&params, None)?;
    let DataSplits { train, val, test } = load_dataset_dir(data, probe.num_classes)?;
    let dataset = match split {
        Split::Train => Some(train),
        Split::Val => val,
        Split::Test => test,
    }
    .ok_or_else(|| CliError::usage(format!("{} has no {split} split", data.display())))?;
    let cfg = ModelConfig::infer(&params, dataset.image_shape())?;
    Ok((Model::new(cfg)?, params, dataset))
}

fn cmd_eval(ckpt: &Path, data: &Path, report_path: &Path, split: Split) -> CliResult {
    let (model, params, dataset) = load_for_inference(ckpt, data, split)?;
    let classifier = evaluate_classifier(&model, &params, &dataset)?;
    let quality = match evaluate_embeddings(&model, &params, &dataset) {
        Ok(q) => Some(q),
        Err(Error::Degenerate(msg)) => {
            log::warn!("embedding quality not reported: {msg}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let report = EvalReport::new(classifier, quality);
    write_file(report_path, report.to_json() + "\n")?;
    println!("{split} accuracy {:.4}", report.accuracy);
    for (c, r) in report.per_class_recall.iter().enumerate() {
        match r {
            Some(r) => println!("class {c} recall {r:.4}"),
            None => println!("class {c} recall undefined"),
        }
    }
    if let Some(q) = &report.embedding_quality {
        println!("embedding silhouette {:.4}", q.silhouette);
    }
    Ok(())
}

fn cmd_embed(ckpt: &Path, data: &Path, out: &Path, split: Split) -> CliResult {
    let (model, params, dataset) = load_for_inference(ckpt, data, split)?;
    let z = embeddings(&model, &params, &dataset)?;
    let d = z.shape()[1];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..d).map(|k| format!("z{k}")));
    let csv_err = |e: csv::Error| CliError::usage(format!("cannot write {}: {e}", out.display()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let mut row = vec![s.id.clone(), s.label.to_string()];
        row.extend(z.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::usage(e.to_string()))?;
    write_file(out, bytes)?;
    println!("wrote {} embeddings of dimension {d} to {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_selfcheck(seed: u64, report_path: Option<&Path>, perturb: Option<&str>) -> CliResult {
    if let Some(op) = perturb {
        let name = OP_NAMES
            .iter()
            .find(|&&n| n == op)
            .ok_or_else(|| CliError::usage(format!("unknown operation `{op}`; expected one of {OP_NAMES:?}")))?;
        set_gradient_perturbation(Some(name));
    }
    let report = run_selfcheck_with(seed, |c| {
        let status = if c.passed { "PASS" } else { "FAIL" };
        match c.max_rel_error {
            Some(err) => println!("{status} {:<28} max_rel_error {err:.3e} ({})", c.name, c.detail),
            None => println!("{status} {:<28} {}", c.name, c.detail),
        }
    });
    set_gradient_perturbation(None);
    if let Some(path) = report_path {
        write_file(path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(CliError::check(format!("{} checks failed: {}", failed.len(), failed.join(", "))))
    }
}
