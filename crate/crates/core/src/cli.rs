//! The `itals` command line: `train`, `evaluate`, `recommend`, `bench` and
//! `generate`.
//!
//! Every option can also come from a flat `key = value` config file given
//! with `--config`; flags override the file. Exit codes: 0 success, 2 usage,
//! 3 data or configuration error, 4 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::context::{ContextAssigner, SequenceLevel};
use crate::data::{
    build_tensor, parse_event_log, parse_event_log_with_vocab, time_split, EventLog, Schema,
    WeightScheme,
};
use crate::error::Error;
use crate::eval::{evaluate, top_n, EvalOptions, MapGrouping, RecallUnit};
use crate::model::{default_roles, FactorModel, Fixed};
use crate::solvers::{train, JsonLinesSink, Solver, TrainConfig, TrainObserver};
use crate::synthetic::{generate, to_tsv, SyntheticSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(format!("{e}; consider --solver cg or a larger --lambda"))
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "itals",
    version,
    about = "Context-aware implicit-feedback tensor factorization"
)]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "ITALS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it to --output.
    Train(TrainArgs),
    /// Evaluate a model on the test period and print the report as JSON.
    Evaluate(EvaluateArgs),
    /// Print the top items for one user.
    Recommend(RecommendArgs),
    /// Time training epochs per solver and factor count; prints CSV.
    Bench(BenchArgs),
    /// Write a synthetic time-of-day dependent event log.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ContextKindArg {
    None,
    Season,
    Sequence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LevelArg {
    Item,
    Category,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Als,
    Cd,
    Cg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegModeArg {
    Constant,
    Support,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GroupingArg {
    Request,
    Event,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RecallUnitArg {
    Events,
    Pairs,
}

fn enum_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_owned()
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Event file: user<TAB>item<TAB>timestamp[<TAB>category].
    #[arg(long)]
    input: Option<PathBuf>,
    /// Events before this timestamp train, the rest test.
    #[arg(long)]
    split_time: Option<u64>,
    /// Separate test event file, read against the input's vocabularies.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ContextArgs {
    #[arg(long, value_enum)]
    context: Option<ContextKindArg>,
    /// Season length in seconds.
    #[arg(long)]
    season_length: Option<u64>,
    /// Uniform band length in seconds.
    #[arg(long)]
    band_length: Option<u64>,
    /// Explicit band start offsets, comma separated (first must be 0).
    #[arg(long)]
    bands: Option<String>,
    /// Sequential context from previous items or their categories.
    #[arg(long, value_enum)]
    level: Option<LevelArg>,
    /// Number of previous events forming the sequential context.
    #[arg(long)]
    history: Option<usize>,
    /// Weight multiplier per step back in the history.
    #[arg(long)]
    decay: Option<f64>,
    /// Let test events extend the sequential history.
    #[arg(long)]
    chaining: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    w0: Option<f64>,
    #[arg(long)]
    wt: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    reg_mode: Option<RegModeArg>,
    /// Weight repeated cells by occurrence count.
    #[arg(long)]
    count_scaling: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    context: ContextArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON-lines training trace; defaults to standard output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    context: ContextArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    cutoff: Option<u64>,
    /// Remove the user's training items from their lists.
    #[arg(long)]
    exclude_train: bool,
    #[arg(long, value_enum)]
    map_grouping: Option<GroupingArg>,
    #[arg(long, value_enum)]
    recall_unit: Option<RecallUnitArg>,
    /// Write per-event hits as CSV.
    #[arg(long)]
    per_event_csv: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    context: ContextArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Event file providing user and item keys.
    #[arg(long)]
    input: Option<PathBuf>,
    /// User key (with --input) or index.
    #[arg(long)]
    user: Option<String>,
    #[arg(long, conflicts_with = "at_timestamp")]
    context_state: Option<usize>,
    /// Pick the time band of this timestamp.
    #[arg(long)]
    at_timestamp: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    top: Option<u64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    context: ContextArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated factor counts.
    #[arg(long)]
    factors_list: Option<String>,
    /// Comma-separated solvers.
    #[arg(long)]
    solver_list: Option<String>,
    /// Epochs timed per configuration.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 6)]
    bands: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 28)]
    days: u64,
    #[arg(long, default_value_t = 20)]
    events_per_user: usize,
    #[arg(long, default_value_t = 2)]
    test_events_per_user: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Text,
    Int,
    Float,
    Bool,
}

/// Every configuration key with the type of its value.
const SCHEMA: &[(&str, Kind)] = &[
    ("input", Kind::Text),
    ("test", Kind::Text),
    ("split_time", Kind::Int),
    ("output", Kind::Text),
    ("trace", Kind::Text),
    ("model", Kind::Text),
    ("context.kind", Kind::Text),
    ("context.season_length", Kind::Int),
    ("context.band_length", Kind::Int),
    ("context.bands", Kind::Text),
    ("context.level", Kind::Text),
    ("context.history", Kind::Int),
    ("context.decay", Kind::Float),
    ("context.chaining", Kind::Bool),
    ("factors", Kind::Int),
    ("epochs", Kind::Int),
    ("solver", Kind::Text),
    ("inner_iters", Kind::Int),
    ("w0", Kind::Float),
    ("wt", Kind::Float),
    ("lambda", Kind::Float),
    ("reg_mode", Kind::Text),
    ("count_scaling", Kind::Bool),
    ("alpha", Kind::Float),
    ("p0", Kind::Float),
    ("seed", Kind::Int),
    ("cutoff", Kind::Int),
    ("exclude_train", Kind::Bool),
    ("map_grouping", Kind::Text),
    ("recall_unit", Kind::Text),
    ("per_event_csv", Kind::Text),
    ("user", Kind::Text),
    ("context_state", Kind::Int),
    ("at_timestamp", Kind::Int),
    ("top", Kind::Int),
    ("factors_list", Kind::Text),
    ("solver_list", Kind::Text),
    ("repeats", Kind::Int),
];

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

/// Merged configuration: file values overlaid by command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Data(format!("config line {}: expected key = value", n + 1))
            })?;
            cfg.set(k.trim(), v.trim().to_owned())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key after checking it against the schema.
    pub fn set(&mut self, key: &str, value: String) -> CliResult<()> {
        let kind = SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, kind)| kind)
            .ok_or_else(|| CliError::Data(format!("unknown configuration key '{key}'")))?;
        let ok = match kind {
            Kind::Text => true,
            Kind::Int => value.parse::<u64>().is_ok(),
            Kind::Float => value.parse::<f64>().is_ok(),
            Kind::Bool => parse_bool(&value).is_some(),
        };
        if !ok {
            return Err(CliError::Data(format!(
                "invalid value '{value}' for configuration key '{key}'"
            )));
        }
        self.values.insert(key.to_owned(), value);
        Ok(())
    }

    fn overlay(&mut self, pairs: Vec<(&'static str, Option<String>)>) -> CliResult<()> {
        for (k, v) in pairs {
            if let Some(v) = v {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Data(format!("{key} = {v}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> bool {
        self.values
            .get(key)
            .and_then(|v| parse_bool(v))
            .unwrap_or(false)
    }

    fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        self.get_str(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("missing required --{}", key.replace('_', "-"))))
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn set_flag(on: bool) -> Option<String> {
    on.then(|| "true".to_owned())
}

impl DataArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("input", path_str(&self.input)),
            ("split_time", some(&self.split_time)),
            ("test", path_str(&self.test)),
        ]
    }
}

impl ContextArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("context.kind", self.context.map(enum_name)),
            ("context.season_length", some(&self.season_length)),
            ("context.band_length", some(&self.band_length)),
            ("context.bands", self.bands.clone()),
            ("context.level", self.level.map(enum_name)),
            ("context.history", some(&self.history)),
            ("context.decay", some(&self.decay)),
            ("context.chaining", set_flag(self.chaining)),
        ]
    }
}

impl ModelArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("factors", some(&self.factors)),
            ("epochs", some(&self.epochs)),
            ("solver", self.solver.map(enum_name)),
            ("inner_iters", some(&self.inner_iters)),
            ("w0", some(&self.w0)),
            ("wt", some(&self.wt)),
            ("lambda", some(&self.lambda)),
            ("reg_mode", self.reg_mode.map(enum_name)),
            ("count_scaling", set_flag(self.count_scaling)),
            ("alpha", some(&self.alpha)),
            ("p0", some(&self.p0)),
            ("seed", some(&self.seed)),
        ]
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    match &args.config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// Builds the context assigner described by `context.*` keys.
pub fn context_from_config(cfg: &RunConfig) -> CliResult<ContextAssigner> {
    let kind = cfg.get_str("context.kind").unwrap_or("none");
    let assigner = match kind {
        "none" => ContextAssigner::none(),
        "season" => {
            let season = cfg.get_or("context.season_length", 86_400u64)?;
            match cfg.get_str("context.bands") {
                Some(list) => {
                    let starts = list
                        .split(',')
                        .map(|s| s.trim().parse::<u64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| CliError::Data(format!("context.bands: {e}")))?;
                    ContextAssigner::season_with_boundaries(season, starts)?
                }
                None => {
                    let default_band = if season == 604_800 { 86_400 } else { 14_400 };
                    let band = cfg.get_or("context.band_length", default_band)?;
                    ContextAssigner::season(season, band)?
                }
            }
        }
        "sequence" => {
            let level = match cfg.get_str("context.level").unwrap_or("item") {
                "item" => SequenceLevel::Item,
                "category" => SequenceLevel::Category,
                other => return Err(CliError::Data(format!("unknown context.level '{other}'"))),
            };
            let history = cfg.get_or("context.history", 1usize)?;
            let decay = cfg.get_or("context.decay", 0.5f64)?;
            ContextAssigner::sequence(level, history, decay)?
                .with_test_chaining(cfg.flag("context.chaining"))
        }
        other => return Err(CliError::Data(format!("unknown context.kind '{other}'"))),
    };
    Ok(assigner)
}

pub fn weights_from_config(cfg: &RunConfig) -> CliResult<WeightScheme> {
    let scheme = WeightScheme {
        w0: cfg.get_or("w0", 1.0)?,
        wt: cfg.get_or("wt", 100.0)?,
        count_scaling: cfg.flag("count_scaling"),
        alpha: cfg.get_or("alpha", 99.0)?,
    };
    scheme.validate()?;
    Ok(scheme)
}

pub fn train_config_from(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        solver: cfg.get_or("solver", defaults.solver)?,
        epochs: cfg.get_or("epochs", defaults.epochs)?,
        lambda: cfg.get_or("lambda", defaults.lambda)?,
        reg_mode: cfg.get_or("reg_mode", defaults.reg_mode)?,
        inner_iters: cfg.get_or("inner_iters", defaults.inner_iters)?,
        w0: cfg.get_or("w0", defaults.w0)?,
        p0: cfg.get_or("p0", defaults.p0)?,
        seed: cfg.get_or("seed", defaults.seed)?,
        track_loss: true,
    };
    config.validate()?;
    Ok(config)
}

fn read_log(path: &Path) -> CliResult<EventLog> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_event_log(BufReader::new(file), &Schema::default())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads the training and test logs described by `input`, `split_time` and
/// `test`.
fn load_data(cfg: &RunConfig) -> CliResult<(EventLog, EventLog)> {
    let input = cfg.require_path("input")?;
    let full = read_log(&input)?;
    let mut train = full.clone();
    if let Some(t) = cfg.get::<u64>("split_time")? {
        let (tr, te) = time_split(&full, t);
        if cfg.get_str("test").is_none() {
            return Ok((tr, te));
        }
        train = tr;
    }
    match cfg.get_str("test") {
        Some(p) => {
            let file = File::open(p).map_err(|e| CliError::Data(format!("{p}: {e}")))?;
            let test = parse_event_log_with_vocab(
                BufReader::new(file),
                &Schema::default(),
                train.vocab().clone(),
            )
            .map_err(|e| CliError::Data(format!("{p}: {e}")))?;
            Ok((train, test))
        }
        None => {
            let empty = EventLog::from_events(Vec::new(), full.vocab().clone())?;
            Ok((train, empty))
        }
    }
}

fn roles_for(d: usize, assigner: &ContextAssigner) -> Vec<String> {
    let mut roles = default_roles(d);
    if d == 3 {
        roles[2] = assigner.kind().to_owned();
    }
    roles
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.overlay(args.data.pairs())?;
    cfg.overlay(args.context.pairs())?;
    cfg.overlay(args.model.pairs())?;
    cfg.overlay(vec![
        ("output", path_str(&args.output)),
        ("trace", path_str(&args.trace)),
    ])?;
    let input_ok = cfg.require_path("input")?;
    let output = cfg.require_path("output")?;
    let assigner = context_from_config(&cfg)?;
    let scheme = weights_from_config(&cfg)?;
    let config = train_config_from(&cfg)?;
    let factors = cfg.get_or("factors", 20usize)?;
    let _ = input_ok;

    let (train_log, _) = load_data(&cfg)?;
    let tensor = build_tensor(&train_log, &assigner, &scheme)?;
    let mut model = FactorModel::init(tensor.sizes(), factors, config.seed)?
        .with_roles(roles_for(tensor.ndim(), &assigner))?;

    let result = match cfg.get_str("trace") {
        Some(p) => {
            let mut sink = JsonLinesSink::new(create(Path::new(p))?);
            let r = train(&mut model, &tensor, &config, &mut sink);
            if let Some(e) = sink.error.take() {
                return Err(e.into());
            }
            r
        }
        None => {
            let mut sink = JsonLinesSink::new(&mut *out);
            let r = train(
                &mut model,
                &tensor,
                &config,
                &mut sink as &mut dyn TrainObserver,
            );
            if let Some(e) = sink.error.take() {
                return Err(e.into());
            }
            r
        }
    };
    if let Err(e) = result {
        writeln!(
            err,
            "training stopped after {} dimension updates",
            e.partial.len()
        )?;
        return Err(e.source.into());
    }
    let mut w = create(&output)?;
    model.save(&mut w)?;
    w.flush()?;
    writeln!(
        err,
        "wrote {} (D={}, K={}, sizes {:?}, N+={})",
        output.display(),
        model.ndim(),
        model.k(),
        model.sizes(),
        tensor.nnz()
    )?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> CliResult<FactorModel> {
    let path = cfg.require_path("model")?;
    let file = File::open(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    FactorModel::load(BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(args: EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.overlay(args.data.pairs())?;
    cfg.overlay(args.context.pairs())?;
    cfg.overlay(vec![
        ("model", path_str(&args.model)),
        ("cutoff", some(&args.cutoff)),
        ("exclude_train", set_flag(args.exclude_train)),
        ("map_grouping", args.map_grouping.map(enum_name)),
        ("recall_unit", args.recall_unit.map(enum_name)),
        ("per_event_csv", path_str(&args.per_event_csv)),
        ("output", path_str(&args.output)),
    ])?;
    cfg.require_path("model")?;
    cfg.require_path("input")?;
    if cfg.get_str("split_time").is_none() && cfg.get_str("test").is_none() {
        return Err(CliError::Usage(
            "evaluate needs --split-time or --test".into(),
        ));
    }
    let assigner = context_from_config(&cfg)?;
    let opts = EvalOptions {
        cutoff: cfg.get_or("cutoff", 20usize)?,
        exclude_train_items: cfg.flag("exclude_train"),
        map_grouping: match cfg.get_str("map_grouping").unwrap_or("request") {
            "request" => MapGrouping::PerRequest,
            "event" => MapGrouping::PerEvent,
            other => return Err(CliError::Data(format!("unknown map_grouping '{other}'"))),
        },
        recall_unit: match cfg.get_str("recall_unit").unwrap_or("events") {
            "events" => RecallUnit::Events,
            "pairs" => RecallUnit::DistinctPairs,
            other => return Err(CliError::Data(format!("unknown recall_unit '{other}'"))),
        },
    };
    let model = load_model(&cfg)?;
    let (train_log, test_log) = load_data(&cfg)?;
    let report = evaluate(&model, &train_log, &test_log, &assigner, &opts)?;
    if let Some(p) = cfg.get_str("per_event_csv") {
        report.write_hits_csv(&test_log, create(Path::new(p))?)?;
    }
    match cfg.get_str("output") {
        Some(p) => {
            let mut w = create(Path::new(p))?;
            writeln!(w, "{}", report.to_json())?;
            w.flush()?;
        }
        None => writeln!(out, "{}", report.to_json())?,
    }
    Ok(())
}

fn cmd_recommend(args: RecommendArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.overlay(args.context.pairs())?;
    cfg.overlay(vec![
        ("model", path_str(&args.model)),
        ("input", path_str(&args.input)),
        ("user", args.user.clone()),
        ("context_state", some(&args.context_state)),
        ("at_timestamp", some(&args.at_timestamp)),
        ("top", some(&args.top)),
    ])?;
    let user_key = cfg
        .get_str("user")
        .ok_or_else(|| CliError::Usage("missing required --user".into()))?
        .to_owned();
    let top = cfg.get_or("top", 20usize)?;
    if top == 0 {
        return Err(CliError::Usage("--top must be at least 1".into()));
    }
    let model = load_model(&cfg)?;
    let log = match cfg.get_str("input") {
        Some(p) => Some(read_log(Path::new(p))?),
        None => None,
    };
    let user = match &log {
        Some(log) => log.vocab().users.get(&user_key).ok_or_else(|| {
            CliError::Data(
                Error::UnknownEntity {
                    kind: "user",
                    key: user_key.clone(),
                }
                .to_string(),
            )
        })? as usize,
        None => user_key.parse::<usize>().map_err(|_| {
            CliError::Data(format!("unknown user '{user_key}' (pass --input for keys)"))
        })?,
    };
    if user >= model.sizes()[0] {
        return Err(CliError::Data(format!("unknown user '{user_key}'")));
    }

    let state = match (
        cfg.get::<usize>("context_state")?,
        cfg.get::<u64>("at_timestamp")?,
    ) {
        (Some(s), _) => Some(s),
        (None, Some(t)) => Some(context_from_config(&cfg)?.assign_season_band(t)?),
        (None, None) => None,
    };
    let mut fixed: Vec<Option<Fixed>> = vec![Some(Fixed::Index(user)), None];
    if model.ndim() >= 3 {
        let s = state.ok_or_else(|| {
            CliError::Usage(
                "this model has a context; pass --context-state or --at-timestamp".into(),
            )
        })?;
        fixed.push(Some(Fixed::Index(s)));
        if model.ndim() > 3 {
            return Err(CliError::Data(
                "recommend supports at most one context dimension".into(),
            ));
        }
    }
    let scores = model.score_items(1, &fixed)?;
    for item in top_n(&scores, top, None) {
        let name = log
            .as_ref()
            .and_then(|l| l.vocab().items.key(item).map(str::to_owned))
            .unwrap_or_else(|| item.to_string());
        writeln!(out, "{name}\t{}", scores[item as usize])?;
    }
    Ok(())
}

fn parse_list<T: FromStr>(key: &str, text: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| CliError::Data(format!("{key}: '{s}': {e}")))
        })
        .collect()
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub solver: Solver,
    pub factors: usize,
    pub mean_epoch_ms: f64,
}

/// Mean wall time of one training epoch for every (solver, K) pair.
pub fn run_bench(
    tensor: &crate::data::SparseTensor,
    solvers: &[Solver],
    factors: &[usize],
    base: &TrainConfig,
    repeats: usize,
) -> crate::Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &solver in solvers {
        for &k in factors {
            let config = TrainConfig {
                solver,
                epochs: 1,
                track_loss: false,
                ..base.clone()
            };
            let mut model = FactorModel::init(tensor.sizes(), k, base.seed)?;
            let mut total = 0.0;
            for _ in 0..repeats {
                let start = Instant::now();
                train(&mut model, tensor, &config, &mut ())?;
                total += start.elapsed().as_secs_f64() * 1e3;
            }
            rows.push(BenchRow {
                solver,
                factors: k,
                mean_epoch_ms: total / repeats as f64,
            });
        }
    }
    Ok(rows)
}

fn cmd_bench(args: BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.overlay(args.data.pairs())?;
    cfg.overlay(args.context.pairs())?;
    cfg.overlay(args.model.pairs())?;
    cfg.overlay(vec![
        ("factors_list", args.factors_list.clone()),
        ("solver_list", args.solver_list.clone()),
        ("repeats", some(&args.repeats)),
    ])?;
    cfg.require_path("input")?;
    let factors: Vec<usize> = parse_list(
        "factors_list",
        cfg.get_str("factors_list").unwrap_or("10,20,40"),
    )?;
    let solvers: Vec<Solver> = parse_list(
        "solver_list",
        cfg.get_str("solver_list").unwrap_or("als,cd,cg"),
    )?;
    let repeats = cfg.get_or("repeats", 3usize)?;
    if repeats == 0 || factors.contains(&0) {
        return Err(CliError::Data(
            "repeats and factor counts must be positive".into(),
        ));
    }
    let assigner = context_from_config(&cfg)?;
    let scheme = weights_from_config(&cfg)?;
    let config = train_config_from(&cfg)?;
    let (train_log, _) = load_data(&cfg)?;
    let tensor = build_tensor(&train_log, &assigner, &scheme)?;
    let rows = run_bench(&tensor, &solvers, &factors, &config, repeats)?;
    writeln!(out, "solver,factors,mean_epoch_ms")?;
    for r in rows {
        writeln!(out, "{},{},{:.3}", r.solver, r.factors, r.mean_epoch_ms)?;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.users == 0 || args.clusters == 0 || args.items < 2 * args.clusters {
        return Err(CliError::Usage(
            "need users ≥ 1 and items ≥ 2·clusters".into(),
        ));
    }
    if args.bands < 2 || 86_400 % args.bands != 0 {
        return Err(CliError::Usage("bands must be ≥ 2 and divide 86400".into()));
    }
    let spec = SyntheticSpec {
        users: args.users,
        items: args.items,
        bands: args.bands,
        clusters: args.clusters,
        days: args.days,
        train_events_per_user: args.events_per_user,
        test_events_per_user: args.test_events_per_user,
        noise: args.noise,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let tsv = to_tsv(&generate(&spec));
    match &args.output {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(tsv.as_bytes())?;
            w.flush()?;
        }
        None => out.write_all(tsv.as_bytes())?,
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return EXIT_DATA;
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Recommend(a) => cmd_recommend(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Generate(a) => cmd_generate(a, out),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
