//! `dlab`: one binary driving the whole distillation pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dlab_core::model::{ModelConfig, ProjTarget, Transformer};

use dlab::checkpoint;
use dlab::dataset;
use dlab::eval;
use dlab::hyperopt::{self, SearchSpace};
use dlab::manifest::RunManifest;
use dlab::report;
use dlab::trainer::{self, PretrainConfig, TrainConfig};
use dlab::transfer::{self, PromptStrategy};

#[derive(Parser)]
#[command(name = "dlab", version, about = "Desk-scale knowledge-distillation laboratory")]
struct Cli {
    /// JSON file with default values for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness. Falls back to $DLAB_SEED, then 42.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic arithmetic dataset splits.
    MakeDataset(MakeDatasetArgs),
    /// Pretrain a base model (teacher or student role) with plain
    /// next-token cross-entropy.
    PretrainTeacher(PretrainArgs),
    /// Run the teacher over prompt-modified queries and persist its
    /// responses and logits.
    BuildTransferSet(BuildArgs),
    /// LoRA fine-tune a student on a transfer set.
    Train(TrainArgs),
    /// Bayesian search over (alpha, temperature).
    Tune(TuneArgs),
    /// Zero-shot accuracy on an evaluation split.
    Evaluate(EvaluateArgs),
    /// Per-layer attention metrics across models on one prompt.
    AnalyzeAttention(AnalyzeArgs),
    /// Merge evaluation runs into one accuracy table.
    Report(ReportArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    difficulty: Option<usize>,
    /// Output directory; writes train.ndjson and test.ndjson.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Which default architecture to train: teacher or student.
    #[arg(long, default_value = "teacher")]
    role: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop early at this held-out response-token accuracy.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<PromptStrategy>,
    /// Use only the first N dataset entries.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Pristine student base checkpoint.
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    transfer: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Output directory; writes adapters.ckpt and train_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    transfer: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory; writes trials.csv and best.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Adapter checkpoint applied on top of the base model.
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Text appended to each question; empty string disables it.
    #[arg(long)]
    output_modifier: Option<String>,
    #[arg(long)]
    label: Option<String>,
    /// Output directory; writes eval_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Model checkpoints to compare (repeatable).
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Adapter checkpoint for the matching --model position; "-" skips.
    #[arg(long = "adapters")]
    adapters: Vec<String>,
    /// Labels matching --model positions; defaults to file stems.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long)]
    prompt: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing eval_report.json (repeatable).
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Output directory; writes summary.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<PromptStrategy, String> {
    PromptStrategy::parse(s)
        .ok_or_else(|| format!("unknown strategy {s:?}; expected none, teacher, ground-truth, or confidence"))
}

/// Flag > config file > built-in default.
struct Settings {
    file: serde_json::Value,
}

impl Settings {
    fn load(path: &Option<PathBuf>) -> Result<Settings> {
        let file = match path {
            None => serde_json::Value::Null,
            Some(p) => serde_json::from_str(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing {}", p.display()))?,
        };
        Ok(Settings { file })
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str, flag: Option<T>, default: T) -> T {
        if let Some(v) = flag {
            return v;
        }
        self.file
            .get(key)
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or(default)
    }
}

fn resolve_seed(settings: &Settings, flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Some(v) = settings.file.get("seed").and_then(|v| v.as_u64()) {
        return v;
    }
    std::env::var("DLAB_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(42)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(&cli.config)?;
    let seed = resolve_seed(&settings, cli.seed);
    match cli.command {
        Command::MakeDataset(a) => cmd_make_dataset(a, &settings, seed),
        Command::PretrainTeacher(a) => cmd_pretrain(a, &settings, seed),
        Command::BuildTransferSet(a) => cmd_build(a, &settings, seed),
        Command::Train(a) => cmd_train(a, &settings, seed),
        Command::Tune(a) => cmd_tune(a, &settings, seed),
        Command::Evaluate(a) => cmd_evaluate(a, &settings, seed),
        Command::AnalyzeAttention(a) => cmd_analyze(a, &settings, seed),
        Command::Report(a) => cmd_report(a, seed),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_make_dataset(a: MakeDatasetArgs, s: &Settings, seed: u64) -> Result<()> {
    let train_count = s.get("train_count", a.train_count, 2000);
    let test_count = s.get("test_count", a.test_count, 400);
    let difficulty = s.get("difficulty", a.difficulty, 1);
    ensure_dir(&a.out)?;
    let split = dataset::make_synthetic_with_counts(train_count, test_count, difficulty, seed)?;
    let train_path = a.out.join("train.ndjson");
    let test_path = a.out.join("test.ndjson");
    dataset::save_items(&train_path, &split.train)?;
    dataset::save_items(&test_path, &split.test)?;
    let mut m = RunManifest::new(
        "make-dataset",
        seed,
        serde_json::json!({"train_count": train_count, "test_count": test_count, "difficulty": difficulty}),
    );
    m.add_output(&train_path);
    m.add_output(&test_path);
    m.write_next_to(&a.out)?;
    println!("wrote {} train / {} test items", split.train.len(), split.test.len());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, s: &Settings, seed: u64) -> Result<()> {
    let items = dataset::load_items(&a.dataset)?;
    let config = match a.role.as_str() {
        "teacher" => ModelConfig::teacher_default(seed),
        "student" => ModelConfig::student_default(seed),
        other => bail!("unknown role {other:?}; expected teacher or student"),
    };
    let cfg = PretrainConfig {
        epoch_cap: s.get("epochs", a.epochs, 8),
        learning_rate: s.get("learning_rate", a.learning_rate, 3e-3),
        batch_size: s.get("batch_size", a.batch_size, 8),
        seed,
        target_accuracy: a.target_accuracy.or(Some(0.92)),
        max_steps: a.max_steps,
        validation_fraction: 0.1,
    };
    let mut model = Transformer::new(config).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let report = trainer::pretrain(&mut model, &items, &cfg)?;
    checkpoint::save_model(&a.out, &model)?;
    let mut m = RunManifest::new(
        "pretrain-teacher",
        seed,
        serde_json::json!({
            "role": a.role,
            "epochs": cfg.epoch_cap,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "target_accuracy": cfg.target_accuracy,
            "max_steps": cfg.max_steps,
            "steps_run": report.steps,
            "held_out_accuracy": report.held_out_accuracy,
        }),
    );
    m.add_input(&a.dataset)?;
    m.add_output(&a.out);
    m.write_next_to(&a.out)?;
    println!(
        "pretrained {} steps, held-out response-token accuracy {:.4}",
        report.steps, report.held_out_accuracy
    );
    Ok(())
}

fn cmd_build(a: BuildArgs, s: &Settings, seed: u64) -> Result<()> {
    let teacher = checkpoint::load_model(&a.teacher)?;
    let mut items = dataset::load_items(&a.dataset)?;
    if let Some(count) = a.count {
        items.truncate(count);
    }
    let strategy = match a.strategy {
        Some(st) => st,
        None => {
            let name: String = s.get("strategy", None, "none".to_string());
            PromptStrategy::parse(&name)
                .with_context(|| format!("unknown strategy {name:?} in config file"))?
        }
    };
    let max_new = s.get("max_new_tokens", a.max_new_tokens, 64);
    let workers = s.get("workers", a.workers, 1);
    let set = transfer::build_transfer_set(&teacher, &items, strategy, max_new, workers)?;
    transfer::save_transfer_set(&a.out, &set)?;
    let mut m = RunManifest::new(
        "build-transfer-set",
        seed,
        serde_json::json!({
            "strategy": strategy.as_str(),
            "count": items.len(),
            "max_new_tokens": max_new,
            "workers": workers,
            "degenerate_count": set.degenerate_count,
        }),
    );
    m.add_input(&a.teacher)?;
    m.add_input(&a.dataset)?;
    m.add_output(&a.out);
    m.write_next_to(&a.out)?;
    println!(
        "wrote {} records ({} degenerate excluded)",
        set.records.len(),
        set.degenerate_count
    );
    Ok(())
}

#[derive(Default)]
struct TrainOverrides {
    alpha: Option<f64>,
    temperature: Option<f64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    validation_fraction: Option<f64>,
}

fn train_config(s: &Settings, seed: u64, o: TrainOverrides) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: s.get("epochs", o.epochs, d.epochs),
        batch_size: s.get("batch_size", o.batch_size, d.batch_size),
        learning_rate: s.get("learning_rate", o.learning_rate, d.learning_rate),
        optimizer: d.optimizer,
        alpha: s.get("alpha", o.alpha, d.alpha),
        temperature: s.get("temperature", o.temperature, d.temperature),
        seed,
        validation_fraction: s.get("validation_fraction", o.validation_fraction, d.validation_fraction),
    }
}

fn cmd_train(a: TrainArgs, s: &Settings, seed: u64) -> Result<()> {
    let mut student = checkpoint::load_model(&a.student)?;
    let set = transfer::load_transfer_set(&a.transfer)?;
    let cfg = train_config(
        s,
        seed,
        TrainOverrides {
            alpha: a.alpha,
            temperature: a.temperature,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            validation_fraction: a.validation_fraction,
        },
    );
    let rank = s.get("lora_rank", a.lora_rank, 4);
    let lora_alpha = s.get("lora_alpha", a.lora_alpha, 8.0);
    student
        .attach_lora(rank, lora_alpha, &ProjTarget::ALL, seed)
        .map_err(|e| anyhow::anyhow!("attaching adapters: {e:?}"))?;
    let report = trainer::train(&mut student, &set.records, &cfg)?;
    ensure_dir(&a.out)?;
    let adapters_path = a.out.join("adapters.ckpt");
    checkpoint::save_adapters(&adapters_path, &student)?;
    let report_path = a.out.join("train_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let mut m = RunManifest::new(
        "train",
        seed,
        serde_json::json!({
            "lora_rank": rank,
            "lora_alpha": lora_alpha,
            "train": cfg.echo(),
            "final_val_loss": report.final_val_loss,
        }),
    );
    m.add_input(&a.student)?;
    m.add_input(&a.transfer)?;
    m.add_output(&adapters_path);
    m.add_output(&report_path);
    m.write_next_to(&a.out)?;
    println!("final validation loss {:.6}", report.final_val_loss);
    Ok(())
}

fn cmd_tune(a: TuneArgs, s: &Settings, seed: u64) -> Result<()> {
    let student = checkpoint::load_model(&a.student)?;
    let set = transfer::load_transfer_set(&a.transfer)?;
    let template = train_config(
        s,
        seed,
        TrainOverrides {
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            ..TrainOverrides::default()
        },
    );
    let rank = s.get("lora_rank", a.lora_rank, 4);
    let lora_alpha = s.get("lora_alpha", a.lora_alpha, 8.0);
    let space = SearchSpace {
        iterations: s.get("iterations", a.iterations, 50),
        ..SearchSpace::default()
    };
    let (best, trials) =
        hyperopt::tune_kd(&student, &set.records, &template, rank, lora_alpha, &space, seed)?;
    ensure_dir(&a.out)?;
    let trials_path = a.out.join("trials.csv");
    hyperopt::write_trials_csv(&trials_path, &trials)?;
    let best_path = a.out.join("best.json");
    std::fs::write(
        &best_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "trial": best.trial,
            "alpha": best.alpha,
            "temperature": best.temperature,
            "val_loss": best.val_loss,
        }))?,
    )?;
    let mut m = RunManifest::new(
        "tune",
        seed,
        serde_json::json!({"iterations": space.iterations, "lora_rank": rank, "lora_alpha": lora_alpha}),
    );
    m.add_input(&a.student)?;
    m.add_input(&a.transfer)?;
    m.add_output(&trials_path);
    m.add_output(&best_path);
    m.write_next_to(&a.out)?;
    println!(
        "best trial {}: alpha {:.4}, temperature {:.4}, val loss {:.6}",
        best.trial, best.alpha, best.temperature, best.val_loss
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, s: &Settings, seed: u64) -> Result<()> {
    let mut model = checkpoint::load_model(&a.model)?;
    if let Some(adapters) = &a.adapters {
        checkpoint::load_adapters_into(adapters, &mut model)?;
    }
    let items = dataset::load_items(&a.dataset)?;
    let max_new = s.get("max_new_tokens", a.max_new_tokens, 256);
    let modifier = s.get(
        "output_modifier",
        a.output_modifier,
        eval::DEFAULT_OUTPUT_MODIFIER.to_string(),
    );
    let label = a.label.unwrap_or_else(|| {
        a.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let report = eval::evaluate(&model, &items, max_new, &modifier, &label)?;
    ensure_dir(&a.out)?;
    let report_path = a.out.join("eval_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let mut m = RunManifest::new(
        "evaluate",
        seed,
        serde_json::json!({
            "label": label,
            "max_new_tokens": max_new,
            "output_modifier": modifier,
            "accuracy": report.accuracy,
        }),
    );
    m.add_input(&a.model)?;
    if let Some(adapters) = &a.adapters {
        m.add_input(adapters)?;
    }
    m.add_input(&a.dataset)?;
    m.add_output(&report_path);
    m.write_next_to(&a.out)?;
    println!("accuracy {:.3}", report.accuracy);
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, s: &Settings, seed: u64) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.models.len() {
        bail!("--label count must match --model count");
    }
    if !a.adapters.is_empty() && a.adapters.len() != a.models.len() {
        bail!("--adapters count must match --model count (use - to skip)");
    }
    let prompt = s.get(
        "prompt",
        a.prompt,
        report::ATTENTION_PROMPT.to_string(),
    );
    let mut models = Vec::new();
    for (i, path) in a.models.iter().enumerate() {
        let mut model = checkpoint::load_model(path)?;
        if let Some(ad) = a.adapters.get(i).filter(|p| p.as_str() != "-") {
            checkpoint::load_adapters_into(Path::new(ad), &mut model)?;
        }
        let label = a
            .labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("model{i}"))
            });
        models.push((label, model));
    }
    let refs: Vec<(String, &Transformer)> =
        models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let series = report::compare_models(&refs, &prompt)?;
    std::fs::write(&a.out, report::series_csv(&series))?;
    let mut m = RunManifest::new(
        "analyze-attention",
        seed,
        serde_json::json!({"prompt": prompt, "models": a.models.len()}),
    );
    for path in &a.models {
        m.add_input(path)?;
    }
    m.add_output(&a.out);
    m.write_next_to(&a.out)?;
    println!("wrote {} metric series", series.len());
    Ok(())
}

fn cmd_report(a: ReportArgs, seed: u64) -> Result<()> {
    let mut reports = Vec::new();
    for run in &a.runs {
        let path = run.join("eval_report.json");
        let report: eval::EvalReport = serde_json::from_str(
            &std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?;
        reports.push(report);
    }
    let csv = report::merged_accuracy_csv(&reports)?;
    ensure_dir(&a.out)?;
    let csv_path = a.out.join("summary.csv");
    std::fs::write(&csv_path, &csv)?;
    let json_path = a.out.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&reports)?)?;
    let mut m = RunManifest::new("report", seed, serde_json::json!({"runs": a.runs.len()}));
    for run in &a.runs {
        m.add_input(&run.join("eval_report.json"))?;
    }
    m.add_output(&csv_path);
    m.add_output(&json_path);
    m.write_next_to(&a.out)?;
    print!("{csv}");
    Ok(())
}
