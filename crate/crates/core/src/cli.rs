//! The `habnet` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{
    corpus_stats, load_corpus, load_embeddings, review_items, save_corpus, split_dataset, tokenize, Decision, EmbeddingTable,
    PaperRecord, SplitSpec, Vocabulary,
};
use crate::export::{self, Level, UnitFilter, WordOptions};
use crate::metrics::{self, render_table, EvalReport, LabeledPredictions, Metric};
use crate::model::{ModelConfig, ModelParams, Task, Variant};
use crate::trainer::{self, derive_seed, prepare, report_for, TrainConfig, TrainData};

pub const THREADS_VAR: &str = "HABNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "habnet", version, about = "Hierarchical attention over peer reviews: train, evaluate, predict, export")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, run log and manifest.
    Train(TrainArgs),
    /// Evaluate a trained model on a corpus.
    Evaluate(EvaluateArgs),
    /// Predict decisions or ratings for a corpus.
    Predict(PredictArgs),
    /// Compute the metric suite from a CSV of labels.
    Metrics(MetricsArgs),
    /// Export attention weights as CSV and optionally SVG.
    Attention(AttentionArgs),
    /// Write a synthetic keyword corpus, embeddings and config.
    Synth(SynthArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Decision,
    Rating,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Decision => Task::Decision,
            TaskArg::Rating => Task::Rating,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Corpus JSON.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub repeats: u32,
    /// Embedding file; overrides the config entry.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated metrics (acc, ma-f1, mi-f1, dm, op); defaults per task.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Partition to evaluate, re-derived from the training configuration.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus JSON; labels are ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CSV with a header row.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "true")]
    pub true_col: String,
    #[arg(long, default_value = "pred")]
    pub pred_col: String,
    /// Rating task: classes 1-10 and DM with d_max 9.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Largest possible label distance; enables DM.
    #[arg(long)]
    pub dmax: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Word,
    Sentence,
    Review,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub level: LevelArg,
    #[arg(long, default_value_t = 15)]
    pub top_k: usize,
    /// Rank words separately for accepted and rejected papers.
    #[arg(long)]
    pub by_class: bool,
    /// Occurrences a token type needs before it is ranked.
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    /// Restrict sentence/review exports to one paper.
    #[arg(long)]
    pub paper: Option<String>,
    /// Restrict sentence exports to one review slot.
    #[arg(long)]
    pub review: Option<usize>,
    /// CSV output file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub papers: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 60)]
    pub vocab: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

/// Explicit partition sizes; the 70/15/15 ratio applies when absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Shuffle seed; the training seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Contents of `--config` and of a model directory's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<SplitCounts>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            model: ModelConfig::new(task.default_embedding_dim(), Variant::Full, task),
            train: TrainConfig::for_task(task),
            embeddings: None,
            split: None,
        }
    }

    /// Task defaults overlaid with the fields present in `text`.
    pub fn from_json(text: &str, task: Option<Task>) -> anyhow::Result<Self> {
        let user: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        if !user.is_object() {
            bail!("config must be a JSON object");
        }
        let named = |section: &str| -> anyhow::Result<Option<Task>> {
            user.get(section)
                .and_then(|s| s.get("task"))
                .map(|t| serde_json::from_value::<Task>(t.clone()))
                .transpose()
                .with_context(|| format!("{section}.task"))
        };
        let mut resolved = task;
        for section in ["train", "model"] {
            if let Some(t) = named(section)? {
                match resolved {
                    Some(r) if r != t => bail!("config {section}.task {t:?} conflicts with task {r:?}"),
                    _ => resolved = Some(t),
                }
            }
        }
        let task = resolved.unwrap_or_default();
        let mut value = serde_json::to_value(Self::for_task(task))?;
        merge(&mut value, user.clone());
        let mut cfg: Self = serde_json::from_value(value).context("invalid config")?;
        cfg.model.task = task;
        cfg.train.task = task;
        if user.get("model").and_then(|m| m.get("gru_hidden")).is_none() {
            cfg.model.gru_hidden = cfg.model.review_width() / 2;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Provenance of an artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub corpus: String,
    pub corpus_sha256: String,
    pub embeddings_sha256: String,
    pub artifacts: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const CONFIG: &str = "config.json";
pub const EMBEDDINGS: &str = "embeddings.txt";
pub const RUNLOG: &str = "runlog.jsonl";
pub const TEST_REPORT: &str = "test_report.json";
pub const SUMMARY: &str = "summary.json";

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    write_atomic(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let threads = match std::env::var(THREADS_VAR) {
        Err(_) => 1,
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got {v:?}");
                return 2;
            }
        },
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Attention(a) => cmd_attention(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Stats(a) => cmd_stats(&a),
    }
}

/// Training/evaluation records for a task: whole papers, or one record per review.
pub fn task_records(task: Task, papers: &[PaperRecord]) -> Vec<PaperRecord> {
    match task {
        Task::Decision => papers.to_vec(),
        Task::Rating => review_items(papers),
    }
}

fn split_spec(cfg: &RunConfig, total: usize) -> SplitSpec {
    match cfg.split {
        Some(c) => SplitSpec {
            seed: c.seed.unwrap_or(cfg.train.seed),
            train: c.train,
            validation: c.validation,
            test: c.test,
        },
        None => SplitSpec::by_ratio(total, cfg.train.seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub test: std::collections::BTreeMap<String, MeanStd>,
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let task = Task::from(a.task);
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = RunConfig::from_json(&text, Some(task)).with_context(|| format!("config {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let embeddings_path = match (&a.embeddings, &cfg.embeddings) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_relative() => a.config.parent().unwrap_or(Path::new(".")).join(p),
        (None, Some(p)) => p.clone(),
        (None, None) => bail!("no embedding file: pass --embeddings or set \"embeddings\" in the config"),
    };

    let papers = load_corpus(&a.data)?;
    let records = task_records(task, &papers);
    let vocab = Vocabulary::from_papers(&records);
    let (embeddings, coverage) = load_embeddings(&embeddings_path, Some(&vocab))?;
    info!(
        "embedding coverage {}/{} ({:.1}%)",
        coverage.found,
        coverage.requested,
        100.0 * coverage.ratio()
    );
    if embeddings.dim() != cfg.model.d_e {
        bail!(
            "embedding file has width {}, config d_e is {}",
            embeddings.dim(),
            cfg.model.d_e
        );
    }
    let splits = split_dataset(&records, &split_spec(&cfg, records.len()))?;
    let train_items = prepare(&splits.train, &cfg.model, &embeddings.vocab);
    let validation_items = prepare(&splits.validation, &cfg.model, &embeddings.vocab);
    let test_items = prepare(&splits.test, &cfg.model, &embeddings.vocab);
    let data = TrainData {
        train: &train_items,
        validation: &validation_items,
        embeddings: &embeddings,
    };
    let corpus_sha256 = sha256_file(&a.data)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let base_seed = cfg.train.seed;
    let mut seeds = Vec::new();
    let mut reports = Vec::new();
    for k in 0..a.repeats as usize {
        let seed = derive_seed(base_seed, k);
        let dir = if a.repeats == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("run_{}", k + 1))
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        // the split stays fixed across repeats; only initialization and order vary
        run_cfg.split = Some(SplitCounts {
            train: splits.train.len(),
            validation: splits.validation.len(),
            test: splits.test.len(),
            seed: Some(split_spec(&cfg, records.len()).seed),
        });
        info!("run {} of {} (seed {seed})", k + 1, a.repeats);
        let outcome = trainer::train(&data, &run_cfg.model, &run_cfg.train)?;
        run_cfg.embeddings = Some(PathBuf::from(EMBEDDINGS));

        save_checkpoint(&outcome.params, &dir.join(CHECKPOINT))?;
        embeddings.save(dir.join(EMBEDDINGS))?;
        write_file(&dir.join(CONFIG), to_json(&run_cfg)?.as_bytes())?;
        write_file(&dir.join(RUNLOG), outcome.log.to_jsonl().as_bytes())?;
        let mut artifacts = vec![CHECKPOINT.to_string(), CONFIG.into(), EMBEDDINGS.into(), RUNLOG.into()];
        if let Ok(report) = trainer::evaluate(&run_cfg.model, &outcome.params, &embeddings, &test_items, &[]) {
            write_file(&dir.join(TEST_REPORT), to_json(&report)?.as_bytes())?;
            artifacts.push(TEST_REPORT.into());
            eprint!("{}", render_table(&report, &task.metrics()));
            reports.push(report);
        } else {
            warn!("test split has no labeled items; no test report");
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "train".into(),
            seed,
            config: run_cfg,
            corpus: a.data.display().to_string(),
            corpus_sha256: corpus_sha256.clone(),
            embeddings_sha256: sha256_file(&dir.join(EMBEDDINGS))?,
            artifacts,
        };
        write_file(&dir.join(MANIFEST), to_json(&manifest)?.as_bytes())?;
        seeds.push(seed);
    }

    if a.repeats > 1 {
        let mut test = std::collections::BTreeMap::new();
        if !reports.is_empty() {
            for m in [Metric::Acc, Metric::MacroF1, Metric::MicroF1, Metric::Dm, Metric::Op] {
                let values: Option<Vec<f64>> = reports.iter().map(|r| m.value(r)).collect();
                if let Some(values) = values {
                    test.insert(m.header().to_string(), MeanStd::of(values));
                }
            }
        }
        let summary = RepeatSummary {
            runs: a.repeats as usize,
            seeds: seeds.clone(),
            test,
        };
        for m in task.metrics() {
            if let Some(s) = summary.test.get(m.header()) {
                eprintln!("{:>6}: {:.4} ± {:.4}", m.header(), s.mean, s.std);
            }
        }
        write_file(&a.out.join(SUMMARY), to_json(&summary)?.as_bytes())?;
        let mut artifacts: Vec<String> = (1..=a.repeats).map(|k| format!("run_{k}")).collect();
        artifacts.push(SUMMARY.into());
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "train".into(),
            seed: base_seed,
            config: cfg,
            corpus: a.data.display().to_string(),
            corpus_sha256,
            embeddings_sha256: sha256_file(&embeddings_path)?,
            artifacts,
        };
        write_file(&a.out.join(MANIFEST), to_json(&manifest)?.as_bytes())?;
    }
    Ok(())
}

/// A trained model directory.
pub struct LoadedModel {
    pub config: RunConfig,
    pub params: ModelParams,
    pub embeddings: EmbeddingTable,
}

pub fn load_model_dir(dir: &Path) -> anyhow::Result<LoadedModel> {
    let path = dir.join(CONFIG);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.model.validate()?;
    let params = load_checkpoint(&dir.join(CHECKPOINT))?;
    params
        .check_compatible(&config.model)
        .context("checkpoint does not match its configuration")?;
    let (embeddings, _) = load_embeddings(dir.join(EMBEDDINGS), None)?;
    if embeddings.dim() != config.model.d_e {
        bail!("embedding width {} differs from d_e {}", embeddings.dim(), config.model.d_e);
    }
    Ok(LoadedModel {
        config,
        params,
        embeddings,
    })
}

fn parse_metrics(names: &[String], task: Task) -> anyhow::Result<Vec<Metric>> {
    if names.is_empty() {
        return Ok(task.metrics().to_vec());
    }
    names
        .iter()
        .map(|n| Metric::parse(n.trim()).ok_or_else(|| anyhow!("unknown metric {n:?}")))
        .collect()
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let m = load_model_dir(&a.model)?;
    let task = m.config.model.task;
    let requested = parse_metrics(&a.metrics, task)?;
    trainer::check_metrics(task, &requested)?;
    let papers = load_corpus(&a.data)?;
    let records = task_records(task, &papers);
    let selected = match a.split {
        SplitArg::All => records,
        part => {
            let s = split_dataset(&records, &split_spec(&m.config, records.len()))
                .context("re-deriving the split; is this the training corpus?")?;
            match part {
                SplitArg::Train => s.train,
                SplitArg::Validation => s.validation,
                _ => s.test,
            }
        }
    };
    let items = prepare(&selected, &m.config.model, &m.embeddings.vocab);
    let report = trainer::evaluate(&m.config.model, &m.params, &m.embeddings, &items, &requested)?;
    emit(None, &to_json(&report)?)?;
    eprint!("{}", render_table(&report, &requested));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPrediction {
    /// `[P(reject), P(accept)]`
    pub probabilities: Vec<f64>,
    pub label: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPrediction {
    /// Index of the review in the input record.
    pub review: usize,
    /// Probabilities of ratings 1 through 10.
    pub probabilities: Vec<f64>,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reviews: Vec<RatingPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub task: Task,
    pub predictions: Vec<Prediction>,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

pub fn predict_papers(m: &LoadedModel, papers: &[PaperRecord]) -> anyhow::Result<Predictions> {
    let cfg = &m.config.model;
    let mut kept_reviews = std::collections::BTreeMap::new();
    for p in papers {
        let mut kept = Vec::new();
        for (i, r) in p.reviews.iter().enumerate() {
            if tokenize(&r.text).is_empty() {
                warn!("paper {}: review {i} has no text and is skipped", p.id);
            } else {
                kept.push(i);
            }
        }
        if kept.len() > cfg.max_reviews {
            warn!("paper {}: only the first {} reviews are used", p.id, cfg.max_reviews);
        }
        kept_reviews.insert(p.id.clone(), kept);
    }
    let items = prepare(papers, cfg, &m.embeddings.vocab);
    let outputs = trainer::predict_items(cfg, &m.params, &m.embeddings, &items, false)?;
    let predictions = outputs
        .into_iter()
        .map(|out| {
            let kept = &kept_reviews[&out.id];
            let decision = out.decision.map(|p| DecisionPrediction {
                label: Decision::from_class(argmax(&p)),
                probabilities: p,
            });
            let reviews = if cfg.task == Task::Rating {
                out.ratings
                    .into_iter()
                    .zip(&out.review_slots)
                    .map(|(p, &slot)| RatingPrediction {
                        review: kept[slot],
                        rating: argmax(&p) as u8 + 1,
                        probabilities: p,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            Prediction {
                id: out.id,
                decision,
                reviews,
            }
        })
        .collect();
    Ok(Predictions {
        task: cfg.task,
        predictions,
    })
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_predict(a: &PredictArgs) -> anyhow::Result<()> {
    let m = load_model_dir(&a.model)?;
    let papers = load_corpus(&a.input)?;
    let preds = predict_papers(&m, &papers)?;
    emit(a.out.as_deref(), &to_json(&preds)?)
}

/// Reads integer label columns from a CSV with a header row.
pub fn read_label_csv(path: &Path, true_col: &str, pred_col: &str) -> anyhow::Result<(Vec<i64>, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers().with_context(|| format!("{}: reading header", path.display()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: no column {name:?} in header", path.display()))
    };
    let (ti, pi) = (column(true_col)?, column(pred_col)?);
    let (mut truth, mut predicted) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{}: line {line}: {e}", path.display())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> anyhow::Result<i64> {
            let raw = record
                .get(i)
                .ok_or_else(|| anyhow!("{}: line {line}: missing {name} value", path.display()))?;
            raw.parse()
                .map_err(|_| anyhow!("{}: line {line}: {name} value {raw:?} is not an integer", path.display()))
        };
        truth.push(field(ti, true_col)?);
        predicted.push(field(pi, pred_col)?);
    }
    Ok((truth, predicted))
}

fn cmd_metrics(a: &MetricsArgs) -> anyhow::Result<()> {
    let (truth, predicted) = read_label_csv(&a.pred, &a.true_col, &a.pred_col)?;
    let report: EvalReport = match a.task.map(Task::from) {
        Some(Task::Rating) if a.dmax.is_none() => report_for(Task::Rating, truth, predicted)?,
        Some(Task::Rating) => metrics::evaluate(&LabeledPredictions::ratings(truth, predicted)?, a.dmax)?,
        _ => metrics::evaluate(&LabeledPredictions::with_observed_classes(truth, predicted)?, a.dmax)?,
    };
    emit(None, &to_json(&report)?)?;
    let columns: Vec<Metric> = [Metric::Acc, Metric::MacroF1, Metric::MicroF1, Metric::Dm, Metric::Op]
        .into_iter()
        .filter(|m| m.value(&report).is_some())
        .collect();
    eprint!("{}", render_table(&report, &columns));
    Ok(())
}

fn cmd_attention(a: &AttentionArgs) -> anyhow::Result<()> {
    let m = load_model_dir(&a.model)?;
    let cfg = &m.config.model;
    let papers = load_corpus(&a.data)?;
    let records = task_records(cfg.task, &papers);
    let items = prepare(&records, cfg, &m.embeddings.vocab);
    let mut csv_out = Vec::new();
    let svg = match a.level {
        LevelArg::Word => {
            let available = m.embeddings.vocab.len().saturating_sub(2);
            let top_k = if a.top_k > available {
                warn!("--top-k {} exceeds the {available} known tokens; clamped", a.top_k);
                available
            } else {
                a.top_k
            };
            let opts = WordOptions {
                top_k,
                by_class: a.by_class,
                min_count: a.min_count,
            };
            let rows = export::word_rankings(cfg, &m.params, &m.embeddings, &items, &opts)?;
            export::write_csv(&rows, &mut csv_out)?;
            export::word_svg(&rows)
        }
        LevelArg::Sentence | LevelArg::Review => {
            let level = if a.level == LevelArg::Sentence {
                Level::Sentence
            } else {
                Level::Review
            };
            let filter = UnitFilter {
                paper: a.paper.clone(),
                review: a.review,
            };
            let rows = export::unit_weights(cfg, &m.params, &m.embeddings, &items, level, &filter)?;
            if rows.is_empty() {
                warn!("no units matched the filter");
            }
            export::write_csv(&rows, &mut csv_out)?;
            export::unit_svg(&rows)
        }
    };
    emit(a.out.as_deref(), std::str::from_utf8(&csv_out)?)?;
    if let Some(path) = &a.svg {
        write_file(path, svg.as_bytes())?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let corpus = generate(&SyntheticConfig {
        papers: a.papers,
        dim: a.dim,
        vocab_size: a.vocab,
        seed: a.seed,
        ..Default::default()
    });
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_corpus(a.out.join("corpus.json"), &corpus.papers)?;
    corpus.embeddings.save(a.out.join(EMBEDDINGS))?;
    let mut cfg = RunConfig::for_task(Task::Decision);
    cfg.model = ModelConfig::new(a.dim, Variant::Full, Task::Decision);
    cfg.embeddings = Some(PathBuf::from(EMBEDDINGS));
    write_file(&a.out.join(CONFIG), to_json(&cfg)?.as_bytes())?;
    eprintln!("wrote corpus.json, {EMBEDDINGS} and {CONFIG} to {}", a.out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> anyhow::Result<()> {
    let papers = load_corpus(&a.data)?;
    emit(None, &to_json(&corpus_stats(&papers))?)?;
    Ok(())
}
