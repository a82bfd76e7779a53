//! `elicit` command line: thin wrappers over the core library and the service.
//!
//! Exit status is 0 on success, 1 for usage and validation errors and 2 for
//! runtime failures (I/O, training divergence, generation, a failed study stage).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use elicit_core::compat::{build_map, Thresholds};
use elicit_core::curation::{curate_and_retrain, filter_set, EvalSettings, FilterConfig, Granularity};
use elicit_core::demo::{load_set, save_set, DemonstrationSet};
use elicit_core::policy::{train_ensemble, PolicyEnsemble, DEFAULT_ENSEMBLE_SIZE};
use elicit_core::study::{simulate_study, StudyConfig};
use elicit_core::toyworld::{
    evaluate_policy, generate_corpus, mlp_config_for, train_config_for, DemonstratorStyle, StyleKind, WorldConfig,
};
use elicit_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(
    name = "elicit",
    version,
    about = "Score, curate and elicit robot demonstrations against a base policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy ensemble on a demonstration file.
    Train(TrainArgs),
    /// Generate scripted toy-world demonstrations.
    GenCorpus(GenArgs),
    /// Score every step of a dataset and write the compatibility map as CSV.
    Map(MapArgs),
    /// Drop incompatible data from a dataset, optionally retraining on base plus kept data.
    Filter(FilterArgs),
    /// Roll a policy out in the toy world and report its success rate.
    Eval(EvalArgs),
    /// Run the scripted naive-versus-informed collection study.
    SimulateStudy(StudyArgs),
    /// Serve the HTTP and WebSocket API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Trajectory-record file to train on.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the ensemble checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Hidden layer widths, comma separated [default: 64,64].
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 64 for toy-world data, 512 otherwise].
    #[arg(long)]
    batch: Option<usize>,
    /// Dropout rate [default: 0 for toy-world data, 0.5 otherwise].
    #[arg(long)]
    dropout: Option<f64>,
    /// Disable layer normalisation.
    #[arg(long)]
    no_layer_norm: bool,
    /// Seed of the first member; member i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ensemble size.
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_SIZE)]
    k: usize,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Demonstrator style: across-then-down (a) or down-then-across (b).
    #[arg(long, value_parser = parse_style)]
    style: StyleKind,
    /// Number of successful demonstrations.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian action noise std [default: 0.005].
    #[arg(long)]
    noise: Option<f64>,
    /// Largest commanded displacement per axis and step [default: 1, i.e. limited by the world].
    #[arg(long)]
    speed: Option<f64>,
    /// Dataset name recorded in the output.
    #[arg(long)]
    name: Option<String>,
    /// Where to write the trajectory-record file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_style(s: &str) -> Result<StyleKind, String> {
    StyleKind::parse(s)
        .ok_or_else(|| format!("unknown style {s:?}, expected across-then-down (a) or down-then-across (b)"))
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// MSE bound lambda; steps at or above it score zero unless novel. Square Nut value: 0.4.
    #[arg(long, default_value_t = 0.4)]
    lambda: f64,
    /// Novelty threshold eta; steps at or above it always score one. Square Nut value: 0.05.
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    /// Use a named preset (square-nut, round-nut, hammer-placement) instead of --lambda/--eta.
    #[arg(long, conflicts_with_all = ["lambda", "eta"])]
    preset: Option<String>,
}

impl ThresholdArgs {
    fn resolve(&self) -> Result<Thresholds, CliError> {
        match &self.preset {
            Some(name) => Thresholds::preset(name)
                .ok_or_else(|| CliError::Validation(format!("unknown threshold preset {name:?}"))),
            None => Ok(Thresholds::new(self.lambda, self.eta)?),
        }
    }
}

#[derive(Debug, Args)]
struct MapArgs {
    /// Trajectory-record file to score.
    #[arg(long)]
    data: PathBuf,
    /// Base policy checkpoint.
    #[arg(long)]
    policy: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Pair,
    Trajectory,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Base policy checkpoint used for scoring.
    #[arg(long)]
    base_policy: PathBuf,
    /// Trajectory-record file to filter.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Pair mode drops steps scoring at or below this value.
    #[arg(long, default_value_t = 0.0)]
    cutoff: f64,
    #[arg(long, value_enum, default_value_t = GranularityArg::Pair)]
    granularity: GranularityArg,
    /// Trajectory mode drops trajectories whose zero-score fraction exceeds this.
    #[arg(long, default_value_t = 0.05)]
    reject_fraction: f64,
    /// Where to write the kept data.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base corpus; when given, retrains on base plus kept data and evaluates both policies.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Where to write the retrained checkpoint (needs --base).
    #[arg(long, requires = "base")]
    retrained_out: Option<PathBuf>,
    /// Training seed for the retrained ensemble.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation rollouts per policy.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Seed of the shared evaluation episodes.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Policy checkpoint.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Seed of the evaluation episodes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episode step limit [default: 200].
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Study configuration (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seeds with as many consecutive seeds starting here.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "APP_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "APP_HOST", default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Datasets, policies, maps and session logs are kept here; memory only when unset.
    #[arg(long, env = "APP_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Stream ticks per second.
    #[arg(long, default_value_t = 20)]
    tick_hz: u32,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<elicit_core::Error> for CliError {
    fn from(e: elicit_core::Error) -> Self {
        if e.is_validation() || matches!(e, elicit_core::Error::Protocol(_)) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Train(a) => train(a, out),
        Command::GenCorpus(a) => gen_corpus(a, out),
        Command::Map(a) => map(a, out, err),
        Command::Filter(a) => filter(a, out),
        Command::Eval(a) => eval(a, out),
        Command::SimulateStudy(a) => study(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    writeln!(out, "{text}").map_err(|e| CliError::Runtime(format!("cannot write output: {e}")))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn dims(set: &DemonstrationSet) -> CliResult<(usize, usize)> {
    set.dims()
        .ok_or_else(|| CliError::Validation("dataset has no trajectories".into()))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let data = load_set(&a.data)?;
    let (sd, ad) = dims(&data)?;
    let mut mlp = mlp_config_for(sd, ad);
    if let Some(h) = a.hidden {
        mlp = mlp.with_hidden(h);
    }
    if let Some(d) = a.dropout {
        mlp = mlp.with_dropout(d);
    }
    if a.no_layer_norm {
        mlp = mlp.with_layer_norm(false);
    }
    let mut cfg = train_config_for(sd, ad, a.seed);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    mlp.validate()?;
    cfg.validate()?;
    let e = train_ensemble(&data, &mlp, &cfg, a.k)?;
    e.save(&a.out)?;
    emit(
        out,
        &json!({ "out": a.out, "fingerprint": e.fingerprint(), "k": e.k(), "pairs": data.pair_count(), "config": mlp, "train": cfg })
            .to_string(),
    )
}

fn gen_corpus(a: GenArgs, out: &mut dyn Write) -> CliResult {
    let mut style = DemonstratorStyle::new(a.style);
    if let Some(n) = a.noise {
        style = style.with_noise(n);
    }
    if let Some(s) = a.speed {
        style = style.with_speed(s);
    }
    style.validate()?;
    let mut set = generate_corpus(&[(style, a.count)], &WorldConfig::default(), a.seed)?;
    if let Some(n) = a.name {
        set = set.renamed(n);
    }
    save_set(&set, &a.out)?;
    emit(
        out,
        &json!({ "out": a.out, "name": set.name(), "trajectories": set.len(), "pairs": set.pair_count(), "style": style })
            .to_string(),
    )
}

fn map(a: MapArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let th = a.thresholds.resolve()?;
    let (data, e) = (load_set(&a.data)?, PolicyEnsemble::load(&a.policy)?);
    let map = build_map(&e, &data, &th)?;
    let csv = map.to_csv()?;
    let summary =
        json!({ "records": map.records.len(), "mean_score": map.mean_score(), "thresholds": th, "out": a.out });
    match &a.out {
        Some(path) => {
            write_file(path, &csv)?;
            emit(out, &summary.to_string())
        }
        None => {
            out.write_all(csv.as_bytes())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            emit(err, &summary.to_string())
        }
    }
}

fn filter(a: FilterArgs, out: &mut dyn Write) -> CliResult {
    let th = a.thresholds.resolve()?;
    let cfg = FilterConfig {
        score_cutoff: a.cutoff,
        granularity: match a.granularity {
            GranularityArg::Pair => Granularity::Pair,
            GranularityArg::Trajectory => Granularity::Trajectory,
        },
        trajectory_reject_fraction: a.reject_fraction,
    };
    cfg.validate()?;
    let (data, e) = (load_set(&a.data)?, PolicyEnsemble::load(&a.base_policy)?);
    let (kept, stats) = filter_set(&e, &data, &th, &cfg)?;
    if let Some(path) = &a.out {
        save_set(&kept, path)?;
    }
    let report = match &a.base {
        Some(base_path) => {
            let base = load_set(base_path)?;
            let (sd, ad) = dims(&base)?;
            let eval = EvalSettings {
                episodes: a.episodes,
                seed: a.eval_seed,
                ..EvalSettings::default()
            };
            let (retrained, report) =
                curate_and_retrain(&base, &data, &e, &th, &cfg, &train_config_for(sd, ad, a.seed), &eval)?;
            if let Some(path) = &a.retrained_out {
                retrained.save(path)?;
            }
            serde_json::to_string(&report).expect("report serialises")
        }
        None => json!({ "stats": stats, "thresholds": th, "filter": cfg }).to_string(),
    };
    match &a.report {
        Some(path) => write_file(path, &format!("{report}\n")),
        None => emit(out, &report),
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let e = PolicyEnsemble::load(&a.policy)?;
    let mut world = WorldConfig::default();
    if let Some(h) = a.horizon {
        world.horizon = h;
    }
    if a.episodes == 0 {
        return Err(CliError::Validation("--episodes must be positive".into()));
    }
    let rate = evaluate_policy(&e, &world, a.episodes, a.seed)?;
    emit(
        out,
        &json!({ "success_rate": rate, "episodes": a.episodes, "seed": a.seed }).to_string(),
    )
}

fn study(a: StudyArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            StudyConfig::from_json(&text)?
        }
        None => StudyConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seeds = (0..cfg.seeds.len().max(1) as u64).map(|i| s + i).collect();
    }
    cfg.validate()?;
    let report = simulate_study(&cfg);
    let json = report.to_json();
    if let Some(path) = &a.report {
        write_file(path, &format!("{json}\n"))?;
    }
    match a.format {
        ReportFormat::Table => emit(out, report.to_table().trim_end())?,
        ReportFormat::Json => emit(out, &json)?,
    }
    match report.failure {
        Some(f) => Err(CliError::Runtime(format!("study stopped early: {f}"))),
        None => Ok(()),
    }
}

fn serve(a: ServeArgs) -> CliResult {
    if a.tick_hz == 0 {
        return Err(CliError::Validation("--tick-hz must be positive".into()));
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .try_init();
    let config = ServiceConfig {
        data_dir: a.data_dir,
        tick_hz: a.tick_hz,
    };
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(elicit_service::bind_and_serve(config, addr))
        .map_err(|e| CliError::Runtime(e.to_string()))
}
