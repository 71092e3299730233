//! `qdvmr` command-line entry point.

mod visualize;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qdvmr::detrhead::{read_predictions, write_predictions};
use qdvmr::featurestore::synth::{generate_synthetic, SynthConfig};
use qdvmr::featurestore::Dataset;
use qdvmr::metrics::{validate_report_json, EvalOptions, EvalReport};
use qdvmr::trainer::{self, checkpoint, Toggles, TrainConfig};
use qdvmr::{Error, Execution};

const EXIT_VALIDATION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(
    name = "qdvmr",
    version,
    about = "Video moment retrieval and highlight detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with learnable query/clip structure.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoints plus a loss curve.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file and write the report JSON.
    Eval(EvalArgs),
    /// Write ranked moments and saliency scores as JSONL.
    Predict(PredictArgs),
    /// Train and evaluate each setting of the module ablation grid.
    Ablate(AblateArgs),
    /// Render an SVG timeline per sample from a prediction file.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of training samples.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Number of extra validation samples.
    #[arg(long, default_value_t = 0)]
    n_val: usize,
    /// Maximum clips per video.
    #[arg(long, default_value_t = 20)]
    clips: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters. Unset flags keep the config file or profile value.
#[derive(Args)]
struct TrainOpts {
    /// Base hyperparameter profile.
    #[arg(long, value_parser = ["desk", "paper"], conflicts_with = "config", default_value = "desk")]
    profile: String,
    /// JSON config file used instead of a profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed [default: from profile, or QDVMR_SEED]
    #[arg(long)]
    seed: Option<u64>,
    /// Enabled modules: `all`, `none` or a list such as gpa,ve,qe,cue [default: from profile]
    #[arg(long)]
    toggles: Option<Toggles>,
    /// [default: from profile]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: from profile]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: from profile]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Moments kept per sample [default: from profile]
    #[arg(long)]
    topk: Option<usize>,
    /// NMS threshold in (0, 1]; 1 disables suppression [default: from profile]
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => TrainConfig::profile(&self.profile)?,
        };
        cfg.apply_env()?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.toggles {
            cfg.toggles = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.topk {
            cfg.top_k = v;
        }
        if let Some(v) = self.nms_iou {
            cfg.nms_iou = v;
        }
        if self.sequential {
            cfg.execution = Execution::Sequential;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long, default_value = "ckpt")]
    out: PathBuf,
    /// Training split [default: train]
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ScoringOpts {
    /// Split to score.
    #[arg(long, default_value = "val")]
    split: String,
    /// Moments kept per sample.
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// NMS threshold in (0, 1]; 1 disables suppression.
    #[arg(long, default_value_t = 0.7)]
    nms_iou: f64,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ScoringOpts {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(Error::Invalid("--topk must be positive".into()).into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(
                Error::Invalid(format!("--nms-iou {} outside (0, 1]", self.nms_iou)).into(),
            );
        }
        Ok(())
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to evaluate.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Prediction JSONL to score instead of a checkpoint.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringOpts,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output JSONL path.
    #[arg(long, default_value = "predictions.jsonl")]
    out: PathBuf,
    #[command(flatten)]
    scoring: ScoringOpts,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the table, report JSON and per-setting checkpoints.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Setting ids from the grid a..j.
    #[arg(long, default_value = "abcdefghij")]
    settings: String,
    /// Split each trained setting is scored on.
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Prediction JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Only render this sample [default: every predicted sample]
    #[arg(long)]
    sample: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "viz")]
    out: PathBuf,
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!(
            "dataset directory {} does not exist",
            dir.display()
        ))
        .into());
    }
    Ok(Dataset::open(dir)?)
}

fn require_split(ds: &Dataset, split: &str) -> Result<()> {
    if !ds.manifest.has_split(split) {
        let mut names: Vec<&str> = ds
            .manifest
            .records
            .iter()
            .map(|r| r.split.as_str())
            .collect();
        names.sort();
        names.dedup();
        return Err(Error::Invalid(format!(
            "split {split:?} not in dataset (available: {})",
            names.join(", ")
        ))
        .into());
    }
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<checkpoint::Checkpoint> {
    if !dir.join(checkpoint::INDEX_FILE).is_file() {
        return Err(Error::Invalid(format!(
            "{} is not a checkpoint directory (no index.json)",
            dir.display()
        ))
        .into());
    }
    Ok(checkpoint::load(dir)?)
}

/// Serializes a report after checking it against the report schema.
fn report_json(report: &EvalReport) -> Result<String> {
    let value = serde_json::to_value(report)?;
    validate_report_json(&value).map_err(|e| Error::Invalid(format!("report schema: {e}")))?;
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        n_val: a.n_val,
        clips: a.clips,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let records = generate_synthetic(&cfg, &a.out)?;
    eprintln!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.opts.resolve()?;
    let ds = open_dataset(&a.data)?;
    if let Some(s) = a.split {
        cfg.train_split = s;
    }
    require_split(&ds, &cfg.train_split)?;
    cfg.ckpt_dir = Some(a.out.clone());
    let out = trainer::train_with(&cfg, &ds, |e, r| {
        let mut line = format!(
            "epoch {:4} loss {:.4} grad {:.3}",
            e.epoch, e.loss.total, e.grad_norm
        );
        if let Some(r) = r {
            line += &format!(
                " | R1@0.7 {:.3} mAP {:.3} HD-mAP {:.3}",
                r.r1_07, r.map_avg, r.hd_map
            );
        }
        eprintln!("{line}");
    })?;
    write_file(&a.out.join("report.json"), &report_json(&out.best_report)?)?;
    println!(
        "best epoch {} on {}: R1@0.7 {:.4} mAP {:.4}; checkpoint in {}",
        out.best_epoch,
        out.eval_split,
        out.best_report.r1_07,
        out.best_report.map_avg,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    a.scoring.validate()?;
    let ds = open_dataset(&a.data)?;
    require_split(&ds, &a.scoring.split)?;
    let exec = a.scoring.execution();
    let report = match (&a.ckpt, &a.pred) {
        (Some(dir), _) => {
            let ck = load_checkpoint(dir)?;
            trainer::evaluate(
                &ck.model,
                &ds,
                &a.scoring.split,
                a.scoring.topk,
                a.scoring.nms_iou,
                exec,
            )?
        }
        (None, Some(path)) => {
            let preds = read_predictions(path)?;
            trainer::score_predictions(
                &ds.records(&a.scoring.split),
                &preds,
                &EvalOptions::default(),
                exec,
            )?
        }
        (None, None) => unreachable!("clap requires --ckpt or --pred"),
    };
    let json = report_json(&report)?;
    eprint!("{}", report.to_table());
    match a.out {
        Some(path) => write_file(&path, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    a.scoring.validate()?;
    let ds = open_dataset(&a.data)?;
    require_split(&ds, &a.scoring.split)?;
    let ck = load_checkpoint(&a.ckpt)?;
    trainer::check_dims(&ck.model, &ds)?;
    let exec = a.scoring.execution();
    let samples = trainer::prepare_split(&ds, &a.scoring.split, exec)?;
    let preds =
        trainer::predict_prepared(&ck.model, &samples, a.scoring.topk, a.scoring.nms_iou, exec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_predictions(&a.out, &preds)?;
    // Read back so every written line passes the schema check.
    let n = read_predictions(&a.out)?.len();
    println!("wrote {n} predictions to {}", a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.opts.resolve()?;
    let settings: Vec<char> = a.settings.chars().collect();
    for &c in &settings {
        trainer::config::ablation_setting(c)?;
    }
    let ds = open_dataset(&a.data)?;
    require_split(&ds, &cfg.train_split)?;
    require_split(&ds, &a.split)?;
    cfg.ckpt_dir = Some(a.out.clone());
    let rows = trainer::ablate(&cfg, &ds, &settings, &a.split)?;
    for r in &rows {
        validate_report_json(&serde_json::to_value(&r.report)?)
            .map_err(|e| Error::Invalid(format!("setting ({}) report schema: {e}", r.setting)))?;
    }
    let table = trainer::ablation_table(&rows);
    write_file(&a.out.join("ablation.txt"), &table)?;
    write_file(
        &a.out.join("ablation.json"),
        &(serde_json::to_string_pretty(&rows)? + "\n"),
    )?;
    print!("{table}");
    Ok(())
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let preds = read_predictions(&a.pred)?;
    let chosen: Vec<_> = match &a.sample {
        Some(id) => {
            let p = preds.iter().find(|p| &p.sample_id == id).ok_or_else(|| {
                Error::Invalid(format!("sample {id:?} not in {}", a.pred.display()))
            })?;
            vec![p]
        }
        None => preds.iter().collect(),
    };
    let mut jobs = Vec::with_capacity(chosen.len());
    for p in chosen {
        let rec = ds
            .manifest
            .get(&p.sample_id)
            .ok_or_else(|| Error::Validation {
                sample_id: p.sample_id.clone(),
                message: format!("not in dataset {}", a.data.display()),
            })?;
        jobs.push((rec, p));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (rec, p) in &jobs {
        let path = a.out.join(visualize::file_name(&rec.sample_id));
        write_file(&path, &visualize::render(rec, p))?;
    }
    println!("wrote {} timeline(s) to {}", jobs.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
