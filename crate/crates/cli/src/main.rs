//! `fan`: generate data, train, evaluate, predict, run ablations and gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use fan_core::ablation::{format_table, run_ablation};
use fan_core::checkpoint::Checkpoint;
use fan_core::data::{self, Dataset, GenConfig, Split};
use fan_core::gradcheck;
use fan_core::train::{evaluate, train, TrainOptions, BEST, LAST};
use fan_core::{iou, tokenize, FanError, ModelConfig, Result, TrainConfig, Vocabulary};
use serde_json::{json, Map, Value};

#[derive(Debug, Parser)]
#[command(name = "fan", version, about = "Referring-expression segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render train/val/test splits of synthetic referring scenes.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints and per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Segment one image for one expression.
    Predict(PredictArgs),
    /// Train and score every ablation variant.
    Ablate(AblateArgs),
    /// Finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Padded token length, including SOS and EOS.
    #[arg(long, default_value_t = ModelConfig::default().max_len)]
    max_len: usize,
}

/// Config file plus per-key overrides.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat JSON config; missing keys take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5` or `--set vpm=single`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding `train/` and optionally `val/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write `report.json` and `run.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary PPM, sides a multiple of 32.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// Output PGM mask.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth PGM mask; prints the IoU when given.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Vocabulary file; defaults to the synthetic vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split the variants are scored on.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// One of the suites; all when omitted.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Reproducibility record written before a command does any work.
struct RunManifest {
    path: PathBuf,
    record: Map<String, Value>,
}

impl RunManifest {
    fn start(path: PathBuf, command: &str, config_path: Option<&Path>, config: Value, seed: u64, out: &Path) -> Result<Self> {
        let mut record = Map::new();
        record.insert("command".into(), json!(command));
        record.insert("argv".into(), json!(std::env::args().collect::<Vec<_>>()));
        record.insert("config_path".into(), json!(config_path.map(|p| p.display().to_string())));
        record.insert("config".into(), config);
        record.insert("seed".into(), json!(seed));
        record.insert("out".into(), json!(out.display().to_string()));
        record.insert("started_at".into(), json!(unix_now()));
        record.insert("finished_at".into(), Value::Null);
        let m = Self { path, record };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&self.record).expect("manifest serializes");
        std::fs::write(&self.path, text + "\n").map_err(|e| FanError::io(&self.path, e))
    }

    fn finish(mut self, result: Value) -> Result<()> {
        self.record.insert("finished_at".into(), json!(unix_now()));
        self.record.insert("result".into(), result);
        self.write()
    }
}

fn parse_set(pair: &str) -> Result<(String, Value)> {
    let (k, v) = pair
        .split_once('=')
        .ok_or_else(|| FanError::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::desk(),
        };
        let mut overrides = Map::new();
        for pair in &self.set {
            let (k, v) = parse_set(pair)?;
            overrides.insert(k, v);
        }
        if let Some(s) = self.seed {
            overrides.insert("seed".into(), json!(s));
        }
        if let Some(e) = self.epochs {
            overrides.insert("epochs".into(), json!(e));
        }
        if let Some(m) = self.max_steps {
            overrides.insert("max_steps".into(), json!(m));
        }
        base.with_overrides(&overrides)
    }
}

fn split_from_name(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(FanError::Config(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = GenConfig { size: a.size, ..GenConfig::default() };
    cfg.validate()?;
    let vocab = Vocabulary::synthetic();
    let snapshot = json!({
        "size": a.size, "train": a.train, "val": a.val, "test": a.test, "max_len": a.max_len,
    });
    let manifest = RunManifest::start(a.out.join("run.json"), "gen-data", None, snapshot, a.seed, &a.out)?;
    for (split, n) in [(Split::Train, a.train), (Split::Val, a.val), (Split::Test, a.test)] {
        let samples = data::generate_split(split, n, a.seed, &cfg, &vocab, a.max_len)?;
        let dir = a.out.join(split.name());
        data::write_dataset(&Dataset { vocab: vocab.clone(), samples }, &dir)?;
        println!("{}: {n} samples in {}", split.name(), dir.display());
    }
    manifest.finish(json!({"train": a.train, "val": a.val, "test": a.test}))?;
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let manifest = RunManifest::start(
        a.out.join("run.json"),
        "train",
        a.config.config.as_deref(),
        Value::Object(cfg.to_json_map()),
        cfg.seed,
        &a.out,
    )?;
    let train_set = data::read_dataset(&a.data.join("train"))?;
    let val_dir = a.data.join("val");
    let val_set = if val_dir.join(data::MANIFEST).exists() { Some(data::read_dataset(&val_dir)?) } else { None };
    let opts = TrainOptions { out_dir: Some(a.out.clone()), verbose: !a.quiet };
    let outcome = train(&cfg, &train_set, val_set.as_ref(), &opts)?;
    if outcome.epochs.is_empty() {
        outcome.checkpoint(&cfg).save(&a.out.join(LAST))?;
    }
    let last = outcome.step_losses.last().copied();
    println!(
        "trained {} steps; final loss {}; best val IoU {}",
        outcome.step_losses.len(),
        last.map_or("-".into(), |l| format!("{l:.5}")),
        outcome.best_val_iou.map_or("-".into(), |v| format!("{v:.4}"))
    );
    println!("checkpoints: {} {}", a.out.join(LAST).display(), a.out.join(BEST).display());
    manifest.finish(json!({
        "steps": outcome.step_losses.len(),
        "final_loss": last,
        "best_val_iou": outcome.best_val_iou,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    split_from_name(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = match &a.out {
        Some(dir) => Some(RunManifest::start(
            dir.join("run.json"),
            "eval",
            Some(&a.checkpoint),
            Value::Object(ckpt.config.to_json_map()),
            ckpt.config.seed,
            dir,
        )?),
        None => None,
    };
    let model = ckpt.model()?;
    let dataset = data::read_dataset(&a.data.join(&a.split))?;
    let report = evaluate(&model, &dataset.samples)?;
    println!(
        "{}: n={} mIoU={:.4} P@0.5={:.4} P@0.7={:.4} P@0.9={:.4}",
        a.split, report.count, report.mean_iou, report.p50, report.p70, report.p90
    );
    if let (Some(dir), Some(m)) = (&a.out, manifest) {
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| FanError::io(&path, e))?;
        m.finish(json!({"mean_iou": report.mean_iou, "p50": report.p50, "p70": report.p70, "p90": report.p90}))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn predict_cmd(a: PredictArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = RunManifest::start(
        a.out.with_extension("run.json"),
        "predict",
        Some(&a.checkpoint),
        Value::Object(ckpt.config.to_json_map()),
        ckpt.config.seed,
        &a.out,
    )?;
    let model = ckpt.model()?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::synthetic(),
    };
    if vocab.len() != model.config.vocab_size {
        return Err(FanError::Compatibility(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let image = data::read_image(&a.image)?;
    let tokens = tokenize(&a.text, &vocab, model.config.max_len)?;
    let pred = model.predict(&image, &tokens)?;
    data::write_mask(&a.out, &pred.mask)?;
    println!("mask: {} ({} foreground pixels)", a.out.display(), pred.mask.count());
    let score = match &a.mask {
        Some(p) => {
            let gt = data::read_mask(p)?;
            let v = iou(&pred.mask, &gt)?;
            println!("IoU: {v:.4}");
            Some(v)
        }
        None => None,
    };
    manifest.finish(json!({"text": a.text, "foreground": pred.mask.count(), "iou": score}))?;
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: AblateArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    split_from_name(&a.split)?;
    let manifest = RunManifest::start(
        a.out.join("run.json"),
        "ablate",
        a.config.config.as_deref(),
        Value::Object(cfg.to_json_map()),
        cfg.seed,
        &a.out,
    )?;
    let train_set = data::read_dataset(&a.data.join("train"))?;
    let eval_set = data::read_dataset(&a.data.join(&a.split))?;
    let rows = run_ablation(&cfg, &train_set, &eval_set, cfg.max_steps, Some(&a.out), !a.quiet)?;
    let table = format_table(&rows);
    print!("{table}");
    let table_path = a.out.join("ablation.txt");
    std::fs::write(&table_path, &table).map_err(|e| FanError::io(&table_path, e))?;
    let json_path = a.out.join("ablation.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    std::fs::write(&json_path, text + "\n").map_err(|e| FanError::io(&json_path, e))?;
    manifest.finish(json!({"rows": rows.len()}))?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    if a.trials == 0 {
        return Err(FanError::Config("--trials must be at least 1".into()));
    }
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => gradcheck::MODULES.to_vec(),
    };
    let mut ok = true;
    for m in modules {
        let c = gradcheck::run_module(m, a.trials, a.seed)?;
        let pass = c.passes(a.tolerance);
        ok &= pass;
        println!(
            "{:<18} {} max_rel_error={:.3e} coords={} worst={}",
            c.module,
            if pass { "ok  " } else { "FAIL" },
            c.max_rel_error,
            c.coordinates,
            c.worst
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
