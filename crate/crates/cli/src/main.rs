//! `tfa`: synthetic data, scorer training, incremental runs, sweeps and
//! report rendering.
//!
//! Exit codes: 0 ok, 2 configuration, 3 I/O or parse, 4 semantic validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use tfa_core::adaptor::BaseUpdatePolicy;
use tfa_core::alignment::{
    init_relation_with, load_checkpoint, save_checkpoint, train_alignment, AlignmentError,
    CheckpointMeta, RelationParams,
};
use tfa_core::embedding::{
    generate_synthetic, load_embeddings, load_prototypes, save_embeddings, save_prototypes,
    EmbeddingError, EmbeddingSet, PrototypeSet, Split, SynthConfig,
};
use tfa_core::metrics::{canonical_json, emit_report, AlignmentSummary, ReportFormat};
use tfa_core::protocol::{
    ablate, run_prepared, ExperimentConfig, Prepared, ProtocolError, SweepAxis, INIT_STREAM,
};
use tfa_core::rng::derive_seed;

const SEED_ENV: &str = "TFA_SEED";

#[derive(Parser)]
#[command(name = "tfa", version, about = "Training-free few-shot class-incremental adaptor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream and its class prototypes.
    Synth(SynthArgs),
    /// Train the relation scorer on base-task train records.
    TrainAlign(TrainArgs),
    /// Run the session protocol and write a report.
    Run(RunArgs),
    /// Sweep one adaptor setting and tabulate mean harmonic accuracy.
    Ablate(AblateArgs),
    /// Render a report as csv, md or json.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic data config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides TFA_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// EMB1 file holding task-0 train records only.
    #[arg(long)]
    base: PathBuf,
    /// EMB1 prototype file.
    #[arg(long)]
    protos: PathBuf,
    /// Experiment config (JSON); only `hidden`, `train` and `seed` are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output ALN1 checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides TFA_SEED and the config [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 25]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated hidden widths [default: 2048,1024]
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

#[derive(Args)]
struct Overrides {
    /// Residual ratio of the cache term [default: 2]
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Sharpness of the cache affinity [default: 2]
    #[arg(long)]
    beta: Option<f64>,
    /// Base cache capacity per class [default: 5]
    #[arg(long)]
    capacity: Option<usize>,
    /// Shots per novel class, K [default: 5]
    #[arg(long)]
    shots: Option<usize>,
    /// Number of trials [default: 10]
    #[arg(long)]
    trials: Option<usize>,
    /// Seed; overrides TFA_SEED and the config [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// When to admit base pseudo-labels: session0-only or always [default: session0-only]
    #[arg(long, value_parser = parse_policy)]
    base_update_policy: Option<BaseUpdatePolicy>,
}

#[derive(Args)]
struct Inputs {
    /// Directory with task_XX.emb files.
    #[arg(long)]
    tasks: PathBuf,
    /// Prototype file [default: TASKS/prototypes.emb]
    #[arg(long)]
    protos: Option<PathBuf>,
    /// ALN1 checkpoint; the scorer is trained on task 0 when omitted.
    #[arg(long)]
    align: Option<PathBuf>,
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    overrides: Overrides,
    /// Report path [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    overrides: Overrides,
    /// Setting to sweep: alpha, beta or cache-size.
    #[arg(long)]
    sweep: String,
    /// Comma-separated values, e.g. 0,0.5,1,2,3
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    /// Combined JSON report path; the table goes to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `run`.
    #[arg(long = "in")]
    input: PathBuf,
    /// csv, md or json [default: md]
    #[arg(long, default_value = "md")]
    format: String,
}

fn parse_policy(s: &str) -> Result<BaseUpdatePolicy, String> {
    match s {
        "session0-only" | "session0_only" => Ok(BaseUpdatePolicy::Session0Only),
        "always" => Ok(BaseUpdatePolicy::Always),
        other => Err(format!("unknown policy {other:?} (session0-only, always)")),
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Semantic(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Semantic(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config error", m),
            CliError::Io(m) => ("i/o error", m),
            CliError::Semantic(m) => ("invalid input", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        let msg = e.to_string();
        match e {
            EmbeddingError::InvalidConfig { .. } => CliError::Config(msg),
            EmbeddingError::DisjointnessViolation { .. } | EmbeddingError::DuplicateClassId(..) => {
                CliError::Semantic(msg)
            }
            _ => CliError::Io(msg),
        }
    }
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        let msg = e.to_string();
        match e {
            AlignmentError::Io { .. } | AlignmentError::BadCheckpoint(_) => CliError::Io(msg),
            AlignmentError::Shape(_) => CliError::Config(msg),
            _ => CliError::Semantic(msg),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::InvalidConfig(m) => CliError::Config(m),
            ProtocolError::Alignment(a) => a.into(),
            other => CliError::Semantic(other.to_string()),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Flag, then `TFA_SEED`, then the config value.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = read_json(&args.config)?;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    let (set, protos) = generate_synthetic(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;

    for task in set.tasks() {
        let part = set.filter(|r| r.task == task);
        let path = args.out.join(format!("task_{task:02}.emb"));
        save_embeddings(&part, &path)?;
        let train = part.records().iter().filter(|r| r.split == Split::Train).count();
        println!("{}\t{} train\t{} test", path.display(), train, part.len() - train);
    }
    let base = set.filter(|r| r.task == 0 && r.split == Split::Train);
    let base_path = args.out.join("base_train.emb");
    save_embeddings(&base, &base_path)?;
    println!("{}\t{} train", base_path.display(), base.len());
    let proto_path = args.out.join("prototypes.emb");
    save_prototypes(&protos, &proto_path)?;
    println!("{}\t{} prototypes\tdim {}", proto_path.display(), protos.len(), protos.dim());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if cfg.train.batch_size == 0 || cfg.train.lr.is_nan() || cfg.train.lr <= 0.0 || cfg.hidden.contains(&0) {
        return Err(CliError::Config("batch_size, lr and hidden widths must be positive".into()));
    }
    cfg.train.seed = cfg.seed;

    let base = load_embeddings(&args.base)?;
    let protos = load_prototypes(&args.protos)?;
    if let Some(r) = base.records().iter().find(|r| r.task != 0 || r.split != Split::Train) {
        return Err(CliError::Semantic(format!(
            "{} holds a task {} {:?} record; only task-0 train records are allowed",
            args.base.display(),
            r.task,
            r.split
        )));
    }
    let init = init_relation_with(base.dim(), &cfg.hidden, derive_seed(cfg.seed, INIT_STREAM));
    let trained = train_alignment(init, &base, &protos, &cfg.train)?;
    let meta = CheckpointMeta {
        m: base.dim(),
        slope: trained.params.slope(),
        hidden: trained.params.hidden(),
        train_config: Some(trained.config.clone()),
        final_loss: trained.final_loss(),
        loss_history: trained.loss_history.clone(),
    };
    save_checkpoint(&trained.params, &meta, &args.out)?;
    match trained.final_loss() {
        Some(l) => println!("final epoch loss {l:.6}"),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn load_tasks(dir: &Path) -> Result<EmbeddingSet, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("task_") && n.ends_with(".emb"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io(format!("no task_XX.emb files in {}", dir.display())));
    }
    let sets = paths.iter().map(|p| load_embeddings(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingSet::concat(sets)?)
}

struct Loaded {
    config: ExperimentConfig,
    set: EmbeddingSet,
    protos: PrototypeSet,
    checkpoint: Option<(RelationParams, CheckpointMeta)>,
}

fn load_inputs(inputs: &Inputs, o: &Overrides) -> Result<Loaded, CliError> {
    let mut config = match &inputs.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    config.seed = resolve_seed(o.seed, config.seed)?;
    if let Some(v) = o.alpha {
        config.alpha = v;
    }
    if let Some(v) = o.beta {
        config.beta = v;
    }
    if let Some(v) = o.capacity {
        config.capacity = v;
    }
    if let Some(v) = o.shots {
        config.shots = v;
    }
    if let Some(v) = o.trials {
        config.trials = v;
    }
    if let Some(v) = o.base_update_policy {
        config.base_update_policy = v;
    }
    config.validate()?;

    let checkpoint = inputs.align.as_deref().map(load_checkpoint).transpose()?;
    let set = load_tasks(&inputs.tasks)?;
    let proto_path = inputs.protos.clone().unwrap_or_else(|| inputs.tasks.join("prototypes.emb"));
    let protos = load_prototypes(&proto_path)?;
    Ok(Loaded {
        config,
        set,
        protos,
        checkpoint,
    })
}

fn with_prepared<T>(
    inputs: &Inputs,
    overrides: &Overrides,
    body: impl FnOnce(&Prepared<'_>, &ExperimentConfig) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let Loaded {
        config,
        set,
        protos,
        checkpoint,
    } = load_inputs(inputs, overrides)?;
    let (params, history) = match checkpoint {
        Some((p, meta)) => (Some(p), Some(meta.loss_history)),
        None => (None, None),
    };
    let mut prepared = Prepared::new(&config, &set, &protos, params)?;
    if let Some(loss_history) = history {
        prepared.alignment = AlignmentSummary {
            source: "checkpoint".into(),
            loss_history,
        };
    }
    body(&prepared, &config)
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let report = with_prepared(&args.inputs, &args.overrides, |prepared, config| {
        Ok(run_prepared(prepared, config)?)
    })?;
    let json = emit_report(&report, ReportFormat::Json);
    match &args.out {
        Some(path) => {
            write_text(path, &json)?;
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
            println!(
                "final accuracy {}  mean harmonic {}  delta {}",
                fmt(report.final_accuracy()),
                fmt(report.mean_harmonic),
                fmt(report.delta)
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Config(format!("bad sweep value {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::Config("--values is empty".into()));
    }
    Ok(values)
}

fn ablate_cmd(args: AblateArgs) -> Result<(), CliError> {
    let axis: SweepAxis = args.sweep.parse().map_err(CliError::Config)?;
    let values = parse_values(&args.values)?;
    let report = with_prepared(&args.inputs, &args.overrides, |prepared, config| {
        Ok(ablate(prepared, config, axis, &values)?)
    })?;
    if let Some(path) = &args.out {
        let value = serde_json::to_value(&report).expect("ablation serializes");
        write_text(path, &canonical_json(&value))?;
    }
    print!("{}", report.to_markdown());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), CliError> {
    let format: ReportFormat = args.format.parse().map_err(CliError::Config)?;
    let text = fs::read_to_string(&args.input).map_err(|e| CliError::Io(format!("{}: {e}", args.input.display())))?;
    let report = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", args.input.display())))?;
    print!("{}", emit_report(&report, format));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainAlign(a) => train(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tfa: {e}");
            ExitCode::from(e.code())
        }
    }
}
