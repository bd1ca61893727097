//! Experiment harness: leave-tail-out queries, the k sweep, baselines and report files.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_split_graphs, unseen_items, GraphConfig};
use crate::ingest::{self, EventSchema, IngestError, ItemSchema, Session, SyntheticConfig};
use crate::metrics::{self, accuracy_at_k, confusion_counts, confusion_scores, ild_curve, Embeddings, RankedList};
use crate::models::{self, ModelConfig, ModelKind, ModelOverrides, RecContext, TrainedModel};
use crate::preprocess::{run_pipeline, NoStemmer, PipelineConfig, PipelineReport, PreprocessedData};

pub use report::{csv_from_json, emit_report, parse_csv, percent, read_report, render_csv, render_json, CsvRow, ReportFormat, CSV_FILE, JSON_FILE};

pub const POPULARITY: &str = "popularity";
pub const RANDOM: &str = "random";
pub const AGGREGATION: &str = "macro mean over test-session queries";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("no test session has at least two items ({skipped} skipped)")]
    NoUsableQueries { skipped: usize },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Pipeline stage the error arose in.
    pub fn stage(&self) -> &'static str {
        match self {
            BenchError::InvalidConfig(_) => "config",
            BenchError::NoUsableQueries { .. } => "evaluate",
            BenchError::Stage { stage, .. } => stage,
            BenchError::Report(_) | BenchError::Io(_) | BenchError::Json(_) | BenchError::Csv(_) => "report",
        }
    }
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> BenchError {
    move |e| BenchError::Stage { stage, message: e.to_string() }
}

/// Where the interactions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory.
    Synthetic(SyntheticConfig),
    /// A directory written by `synth`.
    SyntheticDir { path: PathBuf },
    /// An event log plus optional item metadata.
    Events {
        events: PathBuf,
        #[serde(default)]
        schema: EventSchema,
        items: Option<PathBuf>,
        item_schema: Option<ItemSchema>,
    },
}

fn default_k() -> usize {
    10
}

fn default_holdout() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Models to run with per-kind overrides of their defaults.
    pub models: BTreeMap<ModelKind, ModelOverrides>,
    #[serde(default = "default_k")]
    pub k_max: usize,
    #[serde(default = "default_k")]
    pub k_eval: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Every model kind with its defaults.
    pub fn all_models(dataset: DatasetSpec) -> Self {
        ExperimentConfig {
            dataset,
            models: ModelKind::ALL.into_iter().map(|k| (k, ModelOverrides::default())).collect(),
            k_max: default_k(),
            k_eval: default_k(),
            holdout_fraction: default_holdout(),
            seed: 0,
            pipeline: PipelineConfig::default(),
            graph: GraphConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.k_max == 0 || self.k_eval == 0 {
            return bad("k_max and k_eval must be at least 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction {} outside (0,1)", self.holdout_fraction));
        }
        for (kind, o) in &self.models {
            if let Some(other) = o.kind.filter(|k| k != kind) {
                return bad(format!("entry {kind} names kind {other}"));
            }
            self.model_config(*kind).validate().map_err(|e| BenchError::InvalidConfig(format!("{kind}: {e}")))?;
        }
        Ok(())
    }

    /// Defaults for `kind`, seeded with the experiment seed, then the config's overrides.
    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let base = ModelConfig::defaults(kind).with_seed(self.seed);
        match self.models.get(&kind) {
            Some(o) => o.apply(base),
            None => base,
        }
    }

    /// The longest context any configured model reads.
    pub fn context_len(&self) -> usize {
        self.models.keys().map(|k| self.model_config(*k).max_len).max().unwrap_or(10)
    }

    /// Hash of everything that determines the results (the output directory excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let resolved: BTreeMap<ModelKind, ModelConfig> = c.models.keys().map(|k| (*k, c.model_config(*k))).collect();
        let text = serde_json::to_string(&(&c, &resolved)).expect("config serialises");
        crate::util::sha256_hex(text.as_bytes())
    }
}

/// One leave-tail-out evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub session_id: String,
    pub context: RecContext,
    pub relevant: BTreeSet<usize>,
}

/// Splits each test session with at least two items into a context and the
/// held-out tail `⌈fraction · |s|⌉` (at least 1, at most `|s| − 1`).
/// Returns the queries and the number of sessions skipped.
pub fn make_queries(sessions: &[Session<usize>], holdout_fraction: f64, max_len: usize) -> Result<(Vec<Query>, usize), BenchError> {
    let mut queries = Vec::new();
    let mut skipped = 0;
    for s in sessions {
        let n = s.items.len();
        if n < 2 {
            skipped += 1;
            continue;
        }
        let hold = ingest::train_count(holdout_fraction, n).clamp(1, n - 1);
        let cut = n - hold;
        queries.push(Query {
            session_id: s.session_id.clone(),
            context: RecContext::new(&s.items[..cut], max_len).map_err(stage("evaluate"))?,
            relevant: s.items[cut..].iter().copied().collect(),
        });
    }
    if queries.is_empty() {
        return Err(BenchError::NoUsableQueries { skipped });
    }
    Ok((queries, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub accuracy: f64,
    pub ild: f64,
}

/// Confusion metrics at `k_eval`, averaged over queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub k: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Queries where precision (recall) had a zero denominator and counted as 0.
    pub precision_undefined: usize,
    pub recall_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    /// Resolved configuration; absent for the baselines.
    pub config: Option<ModelConfig>,
    pub rows: Vec<EvalRow>,
    pub confusion: ConfusionSummary,
    pub n_queries: usize,
    pub final_loss: Option<f64>,
}

impl ModelReport {
    pub fn row(&self, k: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub data_fingerprint: String,
    pub aggregation: String,
    pub k_max: usize,
    pub k_eval: usize,
    pub holdout_fraction: f64,
    pub n_items: usize,
    pub n_queries: usize,
    pub skipped_sessions: usize,
    /// Items seen in test sessions but not in training; models score them through the cold-start rule.
    pub cold_items: Vec<usize>,
    pub models: Vec<ModelReport>,
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name)
    }
}

/// Wall-clock seconds per stage and model; kept apart from the report so the report stays reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub preprocess_seconds: f64,
    pub graph_seconds: f64,
    pub model_seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

pub struct RunOutput {
    pub report: EvalReport,
    pub pipeline_report: PipelineReport,
    pub timings: Timings,
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
    /// Where report files and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Evaluate checkpoints from this directory instead of training.
    pub checkpoints: Option<PathBuf>,
}

/// Loads the dataset named by `spec` as raw events and item records.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Vec<ingest::InteractionEvent>, Vec<ingest::ItemRecord>), BenchError> {
    let ingest_err = stage::<IngestError>("ingest");
    match spec {
        DatasetSpec::Synthetic(cfg) => {
            let (items, sessions) = ingest::generate_synthetic(cfg).map_err(&ingest_err)?;
            Ok((ingest::flatten_sessions(&sessions), items))
        }
        DatasetSpec::SyntheticDir { path } => {
            let (_, items, sessions) = ingest::read_synthetic(path).map_err(&ingest_err)?;
            Ok((ingest::flatten_sessions(&sessions), items))
        }
        DatasetSpec::Events { events, schema, items, item_schema } => {
            let loaded = ingest::load_events(events, schema).map_err(&ingest_err)?;
            if loaded.skip_count() > 0 {
                log::warn!("skipped {} malformed event rows", loaded.skip_count());
            }
            let items = match (items, item_schema) {
                (Some(path), Some(schema)) => ingest::load_items(path, schema).map_err(&ingest_err)?,
                (Some(_), None) => return Err(BenchError::InvalidConfig("items file given without item_schema".into())),
                (None, _) => Vec::new(),
            };
            Ok((loaded.events, items))
        }
    }
}

/// Loads and preprocesses the configured dataset.
pub fn prepare(config: &ExperimentConfig) -> Result<(PreprocessedData, PipelineReport), BenchError> {
    let (events, items) = load_dataset(&config.dataset)?;
    run_pipeline(events, items, &config.pipeline, &NoStemmer).map_err(stage("preprocess"))
}

/// Per-query accuracy@k and ILD@k for k = 1..k_max plus confusion metrics at `k_eval`,
/// averaged over queries. `scores` must give one score per catalog item.
pub fn evaluate<S, E>(scores: S, embeddings: &E, queries: &[Query], n_items: usize, k_max: usize, k_eval: usize) -> Result<(Vec<EvalRow>, ConfusionSummary), BenchError>
where
    S: Fn(usize, &Query) -> Result<Vec<f64>, BenchError> + Sync,
    E: Embeddings + Sync + ?Sized,
{
    let depth = k_max.max(k_eval).min(n_items);
    let per_query: Vec<(Vec<f64>, Vec<f64>, metrics::ConfusionScores)> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let s = scores(qi, q)?;
            if s.len() != n_items {
                return Err(BenchError::Stage { stage: "evaluate", message: format!("scorer returned {} scores for {n_items} items", s.len()) });
            }
            let exclude: BTreeSet<usize> = q.context.items.iter().copied().collect();
            let ranked = RankedList::from_scores(&s, &exclude, depth);
            let acc = (1..=k_max).map(|k| accuracy_at_k(&ranked, &q.relevant, k)).collect::<Result<Vec<_>, _>>().map_err(stage("evaluate"))?;
            let ild = ild_curve(&ranked, k_max, embeddings).map_err(stage("evaluate"))?;
            let top: BTreeSet<usize> = ranked.items().into_iter().take(k_eval).collect();
            let counts = confusion_counts(&top, &q.relevant, n_items).map_err(stage("evaluate"))?;
            Ok((acc, ild, confusion_scores(&counts).map_err(stage("evaluate"))?))
        })
        .collect::<Result<_, BenchError>>()?;

    let n = queries.len() as f64;
    let rows = (0..k_max)
        .map(|k| EvalRow {
            k: k + 1,
            accuracy: per_query.iter().map(|q| q.0[k]).sum::<f64>() / n,
            ild: per_query.iter().map(|q| q.1[k]).sum::<f64>() / n,
        })
        .collect();
    let confusion = ConfusionSummary {
        k: k_eval,
        accuracy: per_query.iter().map(|q| q.2.accuracy).sum::<f64>() / n,
        precision: per_query.iter().map(|q| q.2.precision).sum::<f64>() / n,
        recall: per_query.iter().map(|q| q.2.recall).sum::<f64>() / n,
        f1: per_query.iter().map(|q| q.2.f1).sum::<f64>() / n,
        precision_undefined: per_query.iter().filter(|q| q.2.precision_undefined).count(),
        recall_undefined: per_query.iter().filter(|q| q.2.recall_undefined).count(),
    };
    Ok((rows, confusion))
}

/// Training-set item frequencies.
pub fn popularity_scores(data: &PreprocessedData) -> Vec<f64> {
    let mut counts = vec![0.0; data.n_items()];
    for s in &data.split.train {
        for &i in &s.items {
            counts[i] += 1.0;
        }
    }
    counts
}

/// Uniform scores drawn from a generator keyed by the seed and query index.
pub fn random_scores(seed: u64, query_index: usize, n_items: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..n_items).map(|_| rng.gen::<f64>()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    crate::util::write_atomic(path, &bytes)?;
    Ok(())
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PIPELINE_REPORT_FILE: &str = "pipeline_report.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// preprocess → split → graphs → fit each model → per-k evaluation, with the
/// popularity and random baselines alongside. Writes the report files,
/// pipeline report, timings and checkpoints when `options.out_dir` is set.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutput, BenchError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = options.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(stage("config"))?;
    pool.install(|| run_in_pool(config, options))
}

fn run_in_pool(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutput, BenchError> {
    let started = Instant::now();
    let mut timings = Timings::default();

    let (data, pipeline_report) = prepare(config)?;
    timings.preprocess_seconds = started.elapsed().as_secs_f64();
    log::info!("preprocessed {} items, {} sessions", data.n_items(), data.sessions.len());

    let t = Instant::now();
    let (g_train, g_test) = build_split_graphs(&data.split, &data.item_categories, &config.graph);
    let cold: Vec<usize> = unseen_items(&g_train, &g_test).into_iter().collect();
    timings.graph_seconds = t.elapsed().as_secs_f64();
    log::info!("train graph: {} nodes, {} edges; {} test-only items", g_train.n_nodes(), g_train.n_edges(), cold.len());

    let (queries, skipped) = make_queries(&data.split.test, config.holdout_fraction, config.context_len())?;
    let n_items = data.n_items();
    let set = models::TrainingSet::from_preprocessed(&data);

    let kinds: Vec<ModelKind> = config.models.keys().copied().collect();
    let fitted: Vec<(TrainedModel, ModelReport, f64)> = kinds
        .par_iter()
        .map(|&kind| {
            let t = Instant::now();
            let mc = config.model_config(kind);
            let model = match &options.checkpoints {
                Some(dir) => load_checkpoint(dir, &mc, &set)?,
                None => fit_model(&mc, &set, &g_train)?,
            };
            let max_len = mc.max_len;
            let (rows, confusion) = evaluate(
                |_, q| {
                    let ctx = RecContext::new(&q.context.items, max_len).map_err(stage("evaluate"))?;
                    models::score(&model, &ctx).map_err(|e| BenchError::Stage { stage: "evaluate", message: format!("{kind}: {e}") })
                },
                &model.item_embeddings,
                &queries,
                n_items,
                config.k_max,
                config.k_eval,
            )?;
            let report = ModelReport {
                model: kind.to_string(),
                config: Some(mc),
                rows,
                confusion,
                n_queries: queries.len(),
                final_loss: model.training_log.last().copied(),
            };
            Ok((model, report, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, BenchError>>()?;

    let pop = popularity_scores(&data);
    let features = &data.feature_matrix;
    let mut reports = Vec::with_capacity(fitted.len() + 2);
    let mut trained = Vec::with_capacity(fitted.len());
    for (model, report, secs) in fitted {
        timings.model_seconds.insert(report.model.clone(), secs);
        reports.push(report);
        trained.push(model);
    }
    for (name, scorer) in [
        (POPULARITY, Box::new(|_: usize, _: &Query| Ok(pop.clone())) as Box<dyn Fn(usize, &Query) -> Result<Vec<f64>, BenchError> + Sync>),
        (RANDOM, Box::new(|qi: usize, _: &Query| Ok(random_scores(config.seed, qi, n_items)))),
    ] {
        let (rows, confusion) = evaluate(scorer, features, &queries, n_items, config.k_max, config.k_eval)?;
        reports.push(ModelReport { model: name.into(), config: None, rows, confusion, n_queries: queries.len(), final_loss: None });
    }

    let report = EvalReport {
        config_fingerprint: config.fingerprint(),
        data_fingerprint: set.fingerprint(),
        aggregation: AGGREGATION.into(),
        k_max: config.k_max,
        k_eval: config.k_eval,
        holdout_fraction: config.holdout_fraction,
        n_items,
        n_queries: queries.len(),
        skipped_sessions: skipped,
        cold_items: cold,
        models: reports,
    };
    timings.total_seconds = started.elapsed().as_secs_f64();

    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir)?;
        if options.checkpoints.is_none() {
            save_checkpoints(&trained, dir)?;
        }
        emit_report(&report, ReportFormat::Csv, dir)?;
        emit_report(&report, ReportFormat::Json, dir)?;
        write_json(&dir.join(PIPELINE_REPORT_FILE), &pipeline_report)?;
        write_json(&dir.join(TIMINGS_FILE), &timings)?;
    }
    Ok(RunOutput { report, pipeline_report, timings, models: trained })
}

fn fit_model(mc: &ModelConfig, set: &models::TrainingSet, g_train: &crate::graph::ItemGraph) -> Result<TrainedModel, BenchError> {
    log::info!("fitting {}", mc.kind);
    models::fit_on(mc, set, Some(g_train)).map_err(|e| BenchError::Stage { stage: "train", message: format!("{}: {e}", mc.kind) })
}

fn load_checkpoint(dir: &Path, mc: &ModelConfig, set: &models::TrainingSet) -> Result<TrainedModel, BenchError> {
    let fail = |message: String| BenchError::Stage { stage: "checkpoint", message };
    let m = TrainedModel::load(dir, mc.kind.as_str()).map_err(|e| fail(format!("{}: {e}", mc.kind)))?;
    if m.data_fingerprint != set.fingerprint() {
        return Err(fail(format!("{} checkpoint was trained on different data", mc.kind)));
    }
    if &m.config != mc {
        return Err(fail(format!("{} checkpoint config differs from the experiment config", mc.kind)));
    }
    Ok(m)
}

/// Writes `<kind>.ckpt` / `<kind>.json` under `dir/checkpoints`.
pub fn save_checkpoints(trained: &[TrainedModel], dir: &Path) -> Result<(), BenchError> {
    for m in trained {
        m.save(&dir.join(CHECKPOINT_DIR), m.kind().as_str()).map_err(stage("checkpoint"))?;
    }
    Ok(())
}

/// preprocess → graphs → fit every configured model, without evaluation.
pub fn train_models(config: &ExperimentConfig, options: &RunOptions) -> Result<Vec<TrainedModel>, BenchError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = options.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(stage("config"))?;
    pool.install(|| {
        let (data, _) = prepare(config)?;
        let (g_train, _) = build_split_graphs(&data.split, &data.item_categories, &config.graph);
        let set = models::TrainingSet::from_preprocessed(&data);
        let kinds: Vec<ModelKind> = config.models.keys().copied().collect();
        let trained = kinds.par_iter().map(|&k| fit_model(&config.model_config(k), &set, &g_train)).collect::<Result<Vec<_>, _>>()?;
        if let Some(dir) = &options.out_dir {
            save_checkpoints(&trained, dir)?;
        }
        Ok(trained)
    })
}
