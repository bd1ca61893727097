mod logging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::Level;
use serde_json::{json, Map};

use recbench::bench::{self, BenchError, DatasetSpec, ExperimentConfig, RunOptions};
use recbench::graph::build_split_graphs;
use recbench::ingest::{self, SyntheticConfig};
use recbench::models::{ModelConfig, ModelKind, ModelOverrides};

const DEFAULT_OUT: &str = "recbench-out";

/// Benchmark session-based item recommenders for accuracy and diversity.
#[derive(Debug, Parser)]
#[command(name = "recbench", version)]
struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset plus a config.json that points at it.
    Synth(SynthArgs),
    /// Clean, sessionize, encode and split; writes the pipeline report.
    Prepare(RunArgs),
    /// Build the train and test co-occurrence graphs.
    Graph(RunArgs),
    /// Fit the configured models and save checkpoints.
    Train(TrainArgs),
    /// Evaluate saved checkpoints and write the reports.
    Evaluate(EvaluateArgs),
    /// Train and evaluate all seven model kinds with their defaults.
    Sweep(SweepArgs),
    /// Re-render a report from a persisted report.json.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Experiment seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: config output_dir, else recbench-out].
    #[arg(long, env = "RECBENCH_OUT")]
    out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Epochs for every model.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate for every model.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size for every model.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Restrict to these model kinds (comma separated).
    #[arg(long = "model", value_delimiter = ',')]
    models: Vec<ModelKind>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint directory [default: <out>/checkpoints].
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Report format printed to stdout.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Report format printed to stdout.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 2000)]
    sessions: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    /// Fraction of out-of-block items.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory.
    #[arg(long, env = "RECBENCH_OUT", default_value = DEFAULT_OUT)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A report.json written by evaluate or sweep.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Also write the rendered report into this directory.
    #[arg(long, env = "RECBENCH_OUT")]
    out: Option<PathBuf>,
}

struct Failure {
    stage: &'static str,
    message: String,
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure { stage: e.stage(), message: e.to_string() }
    }
}

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure { stage, message: e.to_string() }
}

fn defaults_table() -> String {
    let mut s = String::from("Model defaults (change with --epochs, --lr, --batch or the config file):\n");
    s += &format!("  {:<12} {:>8} {:>6} {:>7} {:>8}\n", "kind", "lr", "batch", "epochs", "dropout");
    for kind in ModelKind::ALL {
        let c = ModelConfig::defaults(kind);
        s += &format!("  {:<12} {:>8} {:>6} {:>7} {:>8}\n", kind.as_str(), c.lr, c.batch, c.epochs, c.dropout);
    }
    s
}

fn parse() -> Cli {
    let table = defaults_table();
    let mut cmd = Cli::command().after_help(table.clone());
    for name in ["train", "evaluate", "sweep"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(table.clone()));
    }
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn load_config(run: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut config = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    let out = run.out.clone().or_else(|| config.output_dir.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    Ok((config, out))
}

fn apply_overrides(config: &mut ExperimentConfig, o: &Overrides) {
    for m in config.models.values_mut() {
        m.epochs = o.epochs.or(m.epochs);
        m.lr = o.lr.or(m.lr);
        m.batch = o.batch.or(m.batch);
    }
}

fn restrict(config: &mut ExperimentConfig, kinds: &[ModelKind]) -> Result<(), Failure> {
    if kinds.is_empty() {
        return Ok(());
    }
    for k in kinds {
        if !config.models.contains_key(k) {
            return Err(Failure { stage: "config", message: format!("model {k} is not in the config") });
        }
    }
    config.models.retain(|k, _| kinds.contains(k));
    Ok(())
}

fn log_config(config: &ExperimentConfig, out: &Path) {
    let resolved: Map<String, serde_json::Value> = config.models.keys().map(|&k| (k.as_str().to_string(), json!(config.model_config(k)))).collect();
    let mut fields = Map::new();
    fields.insert("config".into(), json!(config));
    fields.insert("models".into(), json!(resolved));
    fields.insert("out".into(), json!(out));
    logging::emit(Level::Info, "resolved config", fields);
}

fn print_report(report: &bench::EvalReport, format: Format) -> Result<(), Failure> {
    let text = match format {
        Format::Csv => bench::render_csv(report)?,
        Format::Json => bench::render_json(report)?,
    };
    print!("{text}");
    Ok(())
}

fn options(run: &RunArgs, out: PathBuf, checkpoints: Option<PathBuf>) -> RunOptions {
    RunOptions { jobs: run.jobs, out_dir: Some(out), checkpoints }
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let cfg = SyntheticConfig { n_items: a.items, n_sessions: a.sessions, n_blocks: a.blocks, noise: a.noise, seed: a.seed };
    let mut fields = Map::new();
    fields.insert("config".into(), json!(cfg));
    logging::emit(Level::Info, "resolved config", fields);
    let (items, sessions) = ingest::generate_synthetic(&cfg).map_err(fail("ingest"))?;
    ingest::write_synthetic(&a.out, &cfg, &items, &sessions).map_err(fail("ingest"))?;
    let path = std::fs::canonicalize(&a.out).map_err(fail("ingest"))?;
    let experiment = ExperimentConfig::all_models(DatasetSpec::SyntheticDir { path: path.clone() });
    let text = serde_json::to_string_pretty(&experiment).map_err(fail("config"))? + "\n";
    recbench::util::write_atomic(&path.join("config.json"), text.as_bytes()).map_err(fail("config"))?;
    log::info!("wrote {} items and {} sessions to {}", items.len(), sessions.len(), path.display());
    println!("{}", path.join("config.json").display());
    Ok(())
}

fn prepare(run: &RunArgs) -> Result<(), Failure> {
    let (config, out) = load_config(run)?;
    config.validate()?;
    log_config(&config, &out);
    let (data, report) = bench::prepare(&config)?;
    let write = |name: &str, text: String| recbench::util::write_atomic(&out.join(name), text.as_bytes()).map_err(fail("preprocess"));
    let report_text = serde_json::to_string_pretty(&report).map_err(fail("preprocess"))? + "\n";
    write(bench::PIPELINE_REPORT_FILE, report_text.clone())?;
    write("preprocessed.json", serde_json::to_string(&data).map_err(fail("preprocess"))?)?;
    print!("{report_text}");
    Ok(())
}

fn graph(run: &RunArgs) -> Result<(), Failure> {
    let (config, out) = load_config(run)?;
    config.validate()?;
    log_config(&config, &out);
    let (data, _) = bench::prepare(&config)?;
    let (g_train, g_test) = build_split_graphs(&data.split, &data.item_categories, &config.graph);
    g_train.save(&out.join("graph_train.ndjson")).map_err(fail("graph"))?;
    g_test.save(&out.join("graph_test.ndjson")).map_err(fail("graph"))?;
    let summary = json!({
        "train": { "nodes": g_train.n_nodes(), "edges": g_train.n_edges() },
        "test": { "nodes": g_test.n_nodes(), "edges": g_test.n_edges() },
        "unseen_test_items": recbench::graph::unseen_items(&g_train, &g_test).len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(fail("graph"))?);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let (mut config, out) = load_config(&a.run)?;
    restrict(&mut config, &a.models)?;
    apply_overrides(&mut config, &a.overrides);
    config.validate()?;
    log_config(&config, &out);
    let trained = bench::train_models(&config, &options(&a.run, out, None))?;
    println!("model,epochs,final_loss");
    for m in &trained {
        let loss = m.training_log.last().map_or(String::new(), |l| format!("{l:.6}"));
        println!("{},{},{loss}", m.kind(), m.training_log.len());
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let (mut config, out) = load_config(&a.train.run)?;
    restrict(&mut config, &a.train.models)?;
    apply_overrides(&mut config, &a.train.overrides);
    config.validate()?;
    log_config(&config, &out);
    let ckpt = a.checkpoints.clone().unwrap_or_else(|| out.join(bench::CHECKPOINT_DIR));
    let run = bench::run_experiment(&config, &options(&a.train.run, out, Some(ckpt)))?;
    print_report(&run.report, a.format)
}

fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    let (mut config, out) = load_config(&a.run)?;
    config.models = ModelKind::ALL.into_iter().map(|k| (k, ModelOverrides::default())).collect();
    apply_overrides(&mut config, &a.overrides);
    config.validate()?;
    log_config(&config, &out);
    let run = bench::run_experiment(&config, &options(&a.run, out, None))?;
    print_report(&run.report, a.format)
}

fn report(a: &ReportArgs) -> Result<(), Failure> {
    let report = bench::read_report(&a.input)?;
    if let Some(dir) = &a.out {
        let format = match a.format {
            Format::Csv => bench::ReportFormat::Csv,
            Format::Json => bench::ReportFormat::Json,
        };
        let path = bench::emit_report(&report, format, dir)?;
        log::info!("wrote {}", path.display());
    }
    print_report(&report, a.format)
}

fn main() -> ExitCode {
    let cli = parse();
    logging::init(cli.verbose, cli.quiet);
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Graph(a) => graph(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut fields = Map::new();
            fields.insert("stage".into(), json!(f.stage));
            logging::emit(Level::Error, &f.message, fields);
            ExitCode::from(1)
        }
    }
}
