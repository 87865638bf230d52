use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use osats_core::features::{channels_to_csv, per_frame_channels, ChannelLayout, Hand};
use osats_core::folds::{make_folds, FoldSpec, Scheme};
use osats_core::ingest::{
    load_trial, parse_meta, parse_transcription, rotation_warnings, DatasetLayout, IngestConfig,
    TrialRecord,
};
use osats_core::metrics::{aggregate_report, aggregate_table, per_dimension_table};
use osats_core::report::{gestures_from_trace, render_trace, TraceFigure};
use osats_core::stream::{serve, serve_tcp, Session};
use osats_core::synth::{gen_dataset, SynthConfig};
use osats_core::trainer::{
    evaluate_fold, fit_fold, log_csv, prepare_trials, Checkpoint, EmbeddingCache, ExperimentConfig,
    PredictionTrace,
};

#[derive(Parser)]
#[command(
    name = "osats",
    about = "Surgical skill assessment from kinematics and video",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset directory or a single trial and report problems.
    IngestValidate {
        /// Dataset root with meta.tsv, kinematics/, transcriptions/, video/.
        #[arg(long, conflicts_with = "kinematics")]
        data: Option<PathBuf>,
        #[arg(long)]
        kinematics: Option<PathBuf>,
        #[arg(long)]
        transcription: Option<PathBuf>,
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
    },
    /// Write per-frame channel CSVs for every trial in a dataset.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "right")]
        hand: String,
    },
    /// Print cross-validation folds as JSON.
    Folds {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        n: Option<u8>,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one checkpoint per fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its fold's test trials.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fold key or fold name, e.g. 3 or LOSO-3.
        #[arg(long)]
        fold: String,
        /// Overrides the dataset root stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for per-trial trace CSVs.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        n_perm: Option<usize>,
    },
    /// Serve streaming predictions over stdin/stdout or TCP.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tcp: Option<u16>,
    },
    /// Render prediction traces to SVG.
    Report {
        /// Trace CSV; repeat for several models over the same trial.
        #[arg(long, required = true)]
        trace: Vec<PathBuf>,
        #[arg(long, default_value = "1,2,3,4,5,6")]
        dims: String,
        #[arg(long)]
        out: PathBuf,
        /// Gesture transcription; bands come from trace labels otherwise.
        #[arg(long)]
        transcription: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
    },
    /// Print configuration defaults as JSON.
    Config {
        #[arg(long, required = true)]
        defaults: bool,
        /// Print the synthetic-data config instead of the experiment config.
        #[arg(long)]
        synth: bool,
    },
}

struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

macro_rules! from_error {
    ($($t:ty => $code:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::new($code, e)
            }
        })*
    };
}

from_error!(
    osats_core::ingest::IngestError => "ingest",
    osats_core::features::FeatureError => "features",
    osats_core::folds::FoldError => "folds",
    osats_core::metrics::MetricsError => "metrics",
    osats_core::trainer::TrainError => "train",
    osats_core::stream::StreamError => "stream",
    osats_core::synth::SynthError => "synth",
    osats_core::report::ReportError => "report",
    serde_json::Error => "json",
);

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"));
    Ok(())
}

fn ingest_validate(
    data: Option<PathBuf>,
    kinematics: Option<PathBuf>,
    transcription: Option<PathBuf>,
    video: Option<PathBuf>,
    rate: f64,
) -> Result<()> {
    let cfg = IngestConfig {
        rate_hz: rate,
        ..IngestConfig::default()
    };
    let trials: Vec<TrialRecord> = match (data, kinematics) {
        (Some(root), _) => DatasetLayout::new(root).load_all(&cfg)?.1,
        (None, Some(kin)) => {
            let transcription = transcription
                .ok_or_else(|| CliError::new("usage", "--kinematics needs --transcription"))?;
            let meta = parse_meta(&format!(
                "{}\nsingle\tsingle\t1\tN\t1\t1\t1\t1\t1\t1\n",
                osats_core::ingest::META_HEADER
            ))?
            .remove(0);
            vec![load_trial(
                &kin,
                meta,
                &transcription,
                video.as_deref(),
                &cfg,
            )?]
        }
        (None, None) => return Err(CliError::new("usage", "give --data or --kinematics")),
    };
    let mut warnings = 0;
    let mut frames = 0;
    for t in &trials {
        warnings += rotation_warnings(&t.kin, cfg.rotation_tolerance).len();
        frames += t.kin.len();
    }
    print_json(&json!({"trials": trials.len(), "frames": frames, "rotation_warnings": warnings}))
}

fn parse_hand(s: &str) -> Result<Hand> {
    match s {
        "right" => Ok(Hand::Right),
        "left" => Ok(Hand::Left),
        _ => Err(CliError::new(
            "usage",
            format!("hand must be left or right, got {s}"),
        )),
    }
}

fn featurize(data: PathBuf, out: PathBuf, hand: &str) -> Result<()> {
    let layout = ChannelLayout::standard(parse_hand(hand)?);
    let (_, trials) = DatasetLayout::new(data).load_all(&IngestConfig::default())?;
    for t in &trials {
        let m = per_frame_channels(&t.kin, &layout)?;
        write(
            &out.join(format!("{}.csv", t.meta.trial_id)),
            channels_to_csv(&m, &layout),
        )?;
    }
    print_json(&json!({"trials": trials.len(), "channels": layout.len(), "out": out}))
}

fn parse_scheme(s: &str) -> Result<Scheme> {
    Scheme::parse(s).ok_or_else(|| CliError::new("usage", format!("unknown scheme {s}")))
}

fn folds(scheme: &str, n: Option<u8>, registry: &Path) -> Result<()> {
    let scheme = parse_scheme(scheme)?;
    let reg = parse_meta(&read(registry)?)?;
    let folds = make_folds(scheme, &reg, n)?;
    if scheme == Scheme::Losi && n.is_some() {
        print_json(&folds[0])
    } else {
        print_json(&folds)
    }
}

fn synth(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let cfg: SynthConfig = match config {
        Some(p) => serde_json::from_str(&read(&p)?)?,
        None => SynthConfig::default(),
    };
    let registry = gen_dataset(&cfg, &out)?;
    print_json(&json!({"trials": registry.len(), "out": out}))
}

/// Parses and validates a config; relative paths are taken from the config
/// file's directory.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_json::from_str(&read(path)?)?;
    cfg.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    for dir in [&mut cfg.data_dir, &mut cfg.out_dir].into_iter().flatten() {
        if dir.is_relative() {
            *dir = base.join(&*dir);
        }
    }
    if let Some(d) = &cfg.data_dir {
        cfg.data_dir = Some(
            d.canonicalize()
                .map_err(|e| CliError::new("io", format!("{}: {e}", d.display())))?,
        );
    }
    Ok(cfg)
}

fn load_dataset(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
) -> Result<(
    Vec<osats_core::ingest::TrialMeta>,
    Vec<osats_core::trainer::PreparedTrial>,
)> {
    let root = data
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| CliError::new("config", "no data_dir given"))?;
    let (registry, records) = DatasetLayout::new(root).load_all(&IngestConfig::default())?;
    let prepared = prepare_trials(&records, &cfg.layout)?;
    Ok((registry, prepared))
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::new("config", "no out_dir given"))?;
    let (registry, trials) = load_dataset(&cfg, None)?;
    let folds = make_folds(cfg.scheme, &registry, cfg.losi_n)?;
    let mut cache = EmbeddingCache::new();
    let mut summary = Vec::new();
    for fold in &folds {
        let run = fit_fold(&cfg, fold, &trials, Some(&mut cache))?;
        let ckpt = out.join(format!("{}.ckpt", fold.name));
        write(&ckpt, run.checkpoint.to_bytes())?;
        write(
            &out.join(format!("{}.log.csv", fold.name)),
            log_csv(&run.log),
        )?;
        let last = run
            .log
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map(|r| r.mse);
        log::info!("{}: final train mse {last:?}", fold.name);
        summary.push(json!({"fold": fold.name, "checkpoint": ckpt, "train_mse": last}));
    }
    print_json(&summary)
}

fn select_fold(
    ckpt: &Checkpoint,
    registry: &[osats_core::ingest::TrialMeta],
    key: &str,
) -> Result<FoldSpec> {
    let cfg = &ckpt.experiment;
    let folds = make_folds(cfg.scheme, registry, cfg.losi_n)?;
    let fold = folds
        .into_iter()
        .find(|f| f.name == key || f.fold_key.to_string() == key)
        .ok_or_else(|| CliError::new("usage", format!("no fold {key} under {}", cfg.scheme)))?;
    if let Some(trained) = &ckpt.fold {
        if trained.name != fold.name || trained.train != fold.train {
            return Err(CliError::new(
                "usage",
                format!(
                    "checkpoint was trained for {}, not {}",
                    trained.name, fold.name
                ),
            ));
        }
    }
    Ok(fold)
}

fn evaluate(
    checkpoint: &Path,
    key: &str,
    data: Option<PathBuf>,
    traces: Option<PathBuf>,
    n_perm: Option<usize>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (registry, trials) = load_dataset(&ckpt.experiment, data)?;
    let fold = select_fold(&ckpt, &registry, key)?;
    let output = evaluate_fold(&ckpt, &fold, &trials)?;
    let n_perm = n_perm.unwrap_or(ckpt.experiment.n_perm);
    let result = aggregate_report(
        std::slice::from_ref(&output.predictions),
        &registry,
        std::slice::from_ref(&fold),
        n_perm,
        ckpt.experiment.seed,
    )?;
    if let Some(dir) = traces {
        for t in &output.traces {
            write(&dir.join(format!("{}.csv", t.trial_id)), t.to_csv())?;
        }
    }
    let label = ckpt.model.variant().name().to_string();
    emit(&per_dimension_table(&[(label.clone(), &result)]));
    emit("\n");
    emit(&aggregate_table(
        &[ckpt.experiment.scheme.to_string()],
        &[(label, vec![Some(&result)])],
    ));
    Ok(())
}

fn stream(checkpoint: &Path, tcp: Option<u16>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    match tcp {
        Some(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port))
                .map_err(|e| CliError::new("io", format!("bind {port}: {e}")))?;
            log::info!(
                "listening on {}",
                listener
                    .local_addr()
                    .map(|a| a.to_string())
                    .unwrap_or_default()
            );
            serve_tcp(listener, &ckpt, None)?;
        }
        None => {
            let mut session = Session::new(&ckpt);
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve(&mut session, BufReader::new(stdin.lock()), stdout.lock())?;
        }
    }
    Ok(())
}

fn report(
    traces: &[PathBuf],
    dims: &str,
    out: &Path,
    transcription: Option<PathBuf>,
    rate: f64,
) -> Result<()> {
    let dims: Vec<usize> = dims
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::new("usage", format!("bad --dims {dims}")))?;
    let traces: Vec<PredictionTrace> = traces
        .iter()
        .map(|p| {
            PredictionTrace::from_csv(&read(p)?)
                .map_err(|m| CliError::new("report", format!("{}: {m}", p.display())))
        })
        .collect::<Result<_>>()?;
    let gestures = match transcription {
        Some(p) => parse_transcription(&read(&p)?)?,
        None => traces.first().map(gestures_from_trace).unwrap_or_default(),
    };
    let svg = render_trace(&TraceFigure {
        traces: &traces,
        gestures: &gestures,
        dims: &dims,
        rate_hz: rate,
    })?;
    write(out, svg)
}

fn config(synth: bool) -> Result<()> {
    if synth {
        print_json(&SynthConfig::default())
    } else {
        print_json(&ExperimentConfig::default())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestValidate {
            data,
            kinematics,
            transcription,
            video,
            rate,
        } => ingest_validate(data, kinematics, transcription, video, rate),
        Command::Featurize { data, out, hand } => featurize(data, out, &hand),
        Command::Folds {
            scheme,
            n,
            registry,
        } => folds(&scheme, n, &registry),
        Command::Synth { config, out } => synth(config, out),
        Command::Train { config, out } => train(&config, out),
        Command::Evaluate {
            checkpoint,
            fold,
            data,
            traces,
            n_perm,
        } => evaluate(&checkpoint, &fold, data, traces, n_perm),
        Command::Stream { checkpoint, tcp } => stream(&checkpoint, tcp),
        Command::Report {
            trace,
            dims,
            out,
            transcription,
            rate,
        } => report(&trace, &dims, &out, transcription, rate),
        Command::Config { synth, .. } => config(synth),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({"error": e.code, "message": e.message});
            let _ = writeln!(std::io::stderr(), "{line}");
            ExitCode::from(1)
        }
    }
}
