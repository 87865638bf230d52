//! Per-fold training, checkpoints, evaluation and prediction traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use osats_autodiff::{Adam, AdamConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    align_frames, per_frame_channels, windows, ChannelLayout, FeatureError, NormalizationStats,
    TrialFeatures, VisionSeries, WindowSample, DEFAULT_STRIDE, DEFAULT_WINDOW,
};
use crate::folds::{make_folds, FoldError, FoldSpec, Scheme};
use crate::ingest::{
    gesture_at, Gesture, GestureSegment, IngestError, TrialMeta, TrialRecord, OSATS_DIMS,
};
use crate::matrix::Matrix;
use crate::metrics::{
    aggregate_report, EvalResult, FoldPredictions, MetricsError, DEFAULT_PERMUTATIONS,
};
use crate::models::{Model, ModelConfig, ModelError, WindowView};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("fold {0} has no usable windows")]
    EmptyFold(String),
    #[error("fold {0} has no test trials")]
    EmptyTestSet(String),
    #[error("trial {trial}: {variant} needs video frames")]
    ModalityMissing { trial: String, variant: String },
    #[error("trial {0} is not available")]
    UnknownTrial(String),
    #[error("bad experiment config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl From<OptimizerConfig> for AdamConfig {
    fn from(o: OptimizerConfig) -> Self {
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            clip_norm: o.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub window: usize,
    pub stride: usize,
    /// Hop between training windows; defaults to `stride`.
    pub train_stride: Option<usize>,
    pub scheme: Scheme,
    /// LOSI score; all scores with a non-empty fold when absent.
    pub losi_n: Option<u8>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub layout: ChannelLayout,
    pub n_perm: usize,
    /// Stop after this many epochs without train-loss improvement.
    pub patience: Option<usize>,
    /// Also log test-split loss every epoch.
    pub log_test_loss: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            train_stride: None,
            scheme: Scheme::Loso,
            losi_n: None,
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 32,
            seed: 0,
            layout: ChannelLayout::default(),
            n_perm: DEFAULT_PERMUTATIONS,
            patience: None,
            log_test_loss: false,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.window == 0
            || self.stride == 0
            || self.train_stride == Some(0)
            || self.batch_size == 0
        {
            return Err(TrainError::BadConfig(
                "window, strides and batch size must be positive".into(),
            ));
        }
        if self.model.omega != self.window {
            return Err(TrainError::BadConfig(format!(
                "model window {} differs from window {}",
                self.model.omega, self.window
            )));
        }
        if self.model.channels != self.layout.len() {
            return Err(TrainError::BadConfig(format!(
                "model expects {} channels, layout has {}",
                self.model.channels,
                self.layout.len()
            )));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Sets the window on both the experiment and its model.
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self.model.omega = window;
        self
    }
}

/// Raw per-trial inputs shared by every fold.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub meta: TrialMeta,
    /// Un-normalized `(T−1) × C` channels.
    pub channels: Arc<Matrix>,
    /// Normalized frames aligned with channel rows.
    pub frames: Option<Arc<VisionSeries>>,
    pub gestures: Vec<GestureSegment>,
    pub rate_hz: f64,
}

/// Source frame index of channel row 0.
pub const FIRST_FRAME: usize = 1;

pub fn prepare_trial(
    record: &TrialRecord,
    layout: &ChannelLayout,
) -> Result<PreparedTrial, TrainError> {
    let channels = per_frame_channels(&record.kin, layout)?;
    let frames = record
        .frames
        .as_ref()
        .map(|f| Arc::new(align_frames(f, channels.rows())));
    Ok(PreparedTrial {
        meta: record.meta.clone(),
        channels: Arc::new(channels),
        frames,
        gestures: record.gestures.clone(),
        rate_hz: record.kin.rate_hz,
    })
}

pub fn prepare_trials(
    records: &[TrialRecord],
    layout: &ChannelLayout,
) -> Result<Vec<PreparedTrial>, TrainError> {
    records.iter().map(|r| prepare_trial(r, layout)).collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptBlob(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub variant: String,
    pub experiment: ExperimentConfig,
    pub model: ModelConfig,
    pub fold: Option<FoldSpec>,
    pub rate_hz: f64,
    /// Every blob in file order; `norm.min` and `norm.max` hold the
    /// normalization stats.
    pub blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub experiment: ExperimentConfig,
    pub fold: Option<FoldSpec>,
    pub rate_hz: f64,
    pub model: Model,
    pub stats: NormalizationStats,
}

const NORM_MIN: &str = "norm.min";
const NORM_MAX: &str = "norm.max";

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let mut blobs: Vec<BlobEntry> = self
            .model
            .params
            .iter()
            .map(|p| BlobEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        for name in [NORM_MIN, NORM_MAX] {
            blobs.push(BlobEntry {
                name: name.into(),
                shape: vec![self.stats.channels()],
                trainable: false,
            });
        }
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            variant: self.model.variant().name().into(),
            experiment: self.experiment.clone(),
            model: self.model.config.clone(),
            fold: self.fold.clone(),
            rate_hz: self.rate_hz,
            blobs,
        }
    }

    /// `u32` header length, JSON header, then per blob a `u32` name length,
    /// the name, a `u64` value count and the values as `f64` LE; finally a
    /// CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut blob = |name: &str, values: &[f64]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.model.params.iter() {
            blob(&p.name, p.value.data());
        }
        blob(NORM_MIN, &self.stats.min);
        blob(NORM_MAX, &self.stats.max);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptBlob(m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        let header_len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let header_bytes = r
            .take(header_len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let version: serde_json::Value =
            serde_json::from_slice(header_bytes).map_err(|_| corrupt("unreadable header"))?;
        let found = version
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing format version"))? as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 4 {
            return Err(corrupt("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::CorruptBlob(e.to_string()))?;
        let mut r = Reader {
            bytes: body,
            pos: 4 + header_len,
        };
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for entry in &header.blobs {
            let name_len = r.u32().ok_or_else(|| corrupt("truncated blob"))? as usize;
            let name = r.take(name_len).ok_or_else(|| corrupt("truncated blob"))?;
            if name != entry.name.as_bytes() {
                return Err(corrupt(&format!("expected blob {}", entry.name)));
            }
            let count = r.u64().ok_or_else(|| corrupt("truncated blob"))? as usize;
            if count != entry.shape.iter().product::<usize>() {
                return Err(corrupt(&format!("blob {} has wrong length", entry.name)));
            }
            let raw = r
                .take(count.checked_mul(8).ok_or_else(|| corrupt("blob size"))?)
                .ok_or_else(|| corrupt("truncated blob"))?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            values.insert(entry.name.clone(), data);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut model = Model::build(header.model.clone())
            .map_err(|e| CheckpointError::CorruptBlob(e.to_string()))?;
        if model.params.len() + 2 != header.blobs.len() {
            return Err(corrupt("parameter set differs from model"));
        }
        for entry in header
            .blobs
            .iter()
            .filter(|e| e.name != NORM_MIN && e.name != NORM_MAX)
        {
            let t = Tensor::new(entry.shape.clone(), values.remove(&entry.name).unwrap())
                .map_err(|e| CheckpointError::CorruptBlob(e.to_string()))?;
            model
                .params
                .assign(&entry.name, t)
                .map_err(|e| CheckpointError::CorruptBlob(e.to_string()))?;
            let id = model.params.id(&entry.name).unwrap();
            model.params.get_mut(id).trainable = entry.trainable;
        }
        let stats = NormalizationStats {
            min: values
                .remove(NORM_MIN)
                .ok_or_else(|| corrupt("missing norm.min"))?,
            max: values
                .remove(NORM_MAX)
                .ok_or_else(|| corrupt("missing norm.max"))?,
        };
        Ok(Self {
            experiment: header.experiment,
            fold: header.fold,
            rate_hz: header.rate_hz,
            model,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,mse\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.epoch, r.split, r.mse).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Frame embeddings keyed by trial id, valid for one frozen encoder.
pub type EmbeddingCache = BTreeMap<String, Arc<VisionSeries>>;

fn lookup<'a>(trials: &'a [PreparedTrial], id: &str) -> Result<&'a PreparedTrial, TrainError> {
    trials
        .iter()
        .find(|t| t.meta.trial_id == id)
        .ok_or_else(|| TrainError::UnknownTrial(id.to_string()))
}

/// Vision input for one trial under `model`: embeddings when the encoder is
/// frozen or `embed` is requested, raw frames otherwise.
fn vision_for(
    model: &Model,
    trial: &PreparedTrial,
    embed: bool,
    cache: Option<&mut EmbeddingCache>,
) -> Result<Option<Arc<VisionSeries>>, TrainError> {
    if !model.variant().uses_vision() {
        return Ok(None);
    }
    let frames = trial
        .frames
        .as_ref()
        .ok_or_else(|| TrainError::ModalityMissing {
            trial: trial.meta.trial_id.clone(),
            variant: model.variant().name().into(),
        })?;
    if !embed {
        return Ok(Some(frames.clone()));
    }
    if let Some(cache) = cache {
        if let Some(v) = cache.get(&trial.meta.trial_id) {
            return Ok(Some(v.clone()));
        }
        let v = Arc::new(model.embed_series(frames)?);
        cache.insert(trial.meta.trial_id.clone(), v.clone());
        return Ok(Some(v));
    }
    Ok(Some(Arc::new(model.embed_series(frames)?)))
}

fn features_for(
    trial: &PreparedTrial,
    stats: &NormalizationStats,
    vision: Option<Arc<VisionSeries>>,
) -> Result<TrialFeatures, TrainError> {
    Ok(TrialFeatures {
        trial_id: trial.meta.trial_id.as_str().into(),
        kin: Arc::new(stats.apply(&trial.channels)?),
        vision,
        first_frame: FIRST_FRAME,
        target: trial.meta.target(),
    })
}

fn fold_seed(seed: u64, fold: &str) -> u64 {
    seed ^ u64::from(crc32fast::hash(fold.as_bytes())).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Memory input for every window: the pooled embedding of the previous
/// window of the same trial, zeros for the first.
fn window_memories(model: &Model, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev: Option<(&str, Vec<f64>)> = None;
    for w in samples {
        let memory = match prev {
            Some((id, m)) if id == &*w.trial_id => m,
            _ => vec![0.0; model.config.hidden],
        };
        let p = model.predict(&WindowView::from_sample(w), Some(&memory))?;
        prev = Some((&w.trial_id, p.memory.expect("memory variant")));
        out.push(memory);
    }
    Ok(out)
}

fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &[&WindowSample],
    memory: Option<Vec<f64>>,
) -> Result<osats_autodiff::Var, TrainError> {
    let views: Vec<WindowView> = batch.iter().map(|w| WindowView::from_sample(w)).collect();
    let out = model.forward(tape, &views, memory.as_deref())?;
    let targets: Vec<f64> = batch.iter().flat_map(|w| w.target).collect();
    let t =
        tape.constant(Tensor::new(vec![batch.len(), OSATS_DIMS], targets).expect("target shape"));
    Ok(tape.mse_loss(out.pred, t))
}

fn mean_loss(
    model: &Model,
    samples: &[WindowSample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let memories = if model.variant().has_memory() {
        Some(window_memories(model, samples)?)
    } else {
        None
    };
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(batch_size).enumerate() {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let mem = memories
            .as_ref()
            .map(|m| m[c * batch_size..c * batch_size + chunk.len()].concat());
        let mut tape = Tape::new();
        let l = batch_loss(model, &mut tape, &refs, mem)?;
        total += tape.value(l)[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains one fold: stats from train trials only, seeded shuffles, Adam on
/// window MSE against the raw trial scores.
pub fn fit_fold(
    config: &ExperimentConfig,
    fold: &FoldSpec,
    trials: &[PreparedTrial],
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<FoldRun, TrainError> {
    config.validate()?;
    if fold.test.is_empty() {
        return Err(TrainError::EmptyTestSet(fold.name.clone()));
    }
    let train: Vec<&PreparedTrial> = fold
        .train
        .iter()
        .map(|id| lookup(trials, id))
        .collect::<Result<_, _>>()?;
    let stats = NormalizationStats::fit(train.iter().map(|t| t.channels.as_ref()))?;
    let mut model = Model::build(config.model.clone())?;
    let embed = config.model.freeze_encoder;
    let train_stride = config.train_stride.unwrap_or(config.stride);
    let mut samples = Vec::new();
    for t in &train {
        let vision = vision_for(&model, t, embed, cache.as_deref_mut())?;
        samples.extend(windows(
            &features_for(t, &stats, vision)?,
            config.window,
            train_stride,
        ));
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyFold(fold.name.clone()));
    }
    let test_samples = if config.log_test_loss {
        let mut v = Vec::new();
        for id in &fold.test {
            let t = lookup(trials, id)?;
            let vision = vision_for(&model, t, embed, cache.as_deref_mut())?;
            v.extend(windows(
                &features_for(t, &stats, vision)?,
                config.window,
                config.stride,
            ));
        }
        v
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(config.seed, &fold.name));
    let mut adam = Adam::new(config.optimizer.into());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    for epoch in 1..=config.epochs {
        let memories = if model.variant().has_memory() {
            Some(window_memories(&model, &samples)?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mem = memories
                .as_ref()
                .map(|m| chunk.iter().flat_map(|&i| m[i].iter().copied()).collect());
            let mut tape = Tape::new();
            let loss = batch_loss(&model, &mut tape, &batch, mem)?;
            total += tape.value(loss)[0] * chunk.len() as f64;
            model.params.zero_grad();
            tape.backward_into(loss, &mut model.params)
                .map_err(ModelError::from)?;
            adam.step(&mut model.params).map_err(ModelError::from)?;
        }
        let train_mse = total / samples.len() as f64;
        log::debug!("{} epoch {epoch}: train mse {train_mse:.4}", fold.name);
        log.push(LogRow {
            epoch,
            split: "train".into(),
            mse: train_mse,
        });
        if !test_samples.is_empty() {
            log.push(LogRow {
                epoch,
                split: "test".into(),
                mse: mean_loss(&model, &test_samples, config.batch_size)?,
            });
        }
        if let Some(patience) = config.patience {
            if train_mse < best {
                (best, stale) = (train_mse, 0);
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    let rate_hz = train
        .first()
        .map_or(crate::ingest::DEFAULT_RATE_HZ, |t| t.rate_hz);
    Ok(FoldRun {
        checkpoint: Checkpoint {
            experiment: config.clone(),
            fold: Some(fold.clone()),
            rate_hz,
            model,
            stats,
        },
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub window_end_frame: usize,
    pub time_s: f64,
    pub scores: [f64; OSATS_DIMS],
    pub gesture: Option<Gesture>,
}

/// Time-ordered window predictions for one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub trial_id: String,
    pub model: String,
    pub truth: Option<[f64; OSATS_DIMS]>,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str =
    "window_end_frame,time_s,pred_osats1,pred_osats2,pred_osats3,pred_osats4,pred_osats5,pred_osats6,gesture_label";

impl PredictionTrace {
    /// CSV with a leading `#` line carrying trial id, model and truth.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# trial={} model={}", self.trial_id, self.model);
        if let Some(t) = self.truth {
            let t: Vec<String> = t.iter().map(f64::to_string).collect();
            write!(out, " truth={}", t.join(";")).unwrap();
        }
        out.push('\n');
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.window_end_frame, r.time_s).unwrap();
            for s in r.scores {
                write!(out, ",{s}").unwrap();
            }
            writeln!(
                out,
                ",{}",
                r.gesture.map_or_else(String::new, |g| g.to_string())
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut trace = Self {
            trial_id: String::new(),
            model: String::new(),
            truth: None,
            rows: Vec::new(),
        };
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("trial", v)) => trace.trial_id = v.into(),
                        Some(("model", v)) => trace.model = v.into(),
                        Some(("truth", v)) => {
                            let vals: Vec<f64> = v
                                .split(';')
                                .map(str::parse)
                                .collect::<Result<_, _>>()
                                .map_err(|_| format!("line {}: bad truth", i + 1))?;
                            let arr: [f64; OSATS_DIMS] = vals
                                .try_into()
                                .map_err(|_| format!("line {}: truth needs 6 values", i + 1))?;
                            trace.truth = Some(arr);
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line != TRACE_HEADER {
                    return Err(format!("line {}: expected trace header", i + 1));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(format!("line {}: expected 9 fields", i + 1));
            }
            let bad = || format!("line {}: bad number", i + 1);
            let mut scores = [0.0; OSATS_DIMS];
            for d in 0..OSATS_DIMS {
                scores[d] = f[2 + d].parse().map_err(|_| bad())?;
            }
            let gesture = match f[8] {
                "" => None,
                g => Some(
                    Gesture::parse(g).ok_or_else(|| format!("line {}: bad gesture {g}", i + 1))?,
                ),
            };
            trace.rows.push(TraceRow {
                window_end_frame: f[0].parse().map_err(|_| bad())?,
                time_s: f[1].parse().map_err(|_| bad())?,
                scores,
                gesture,
            });
        }
        if !header_seen {
            return Err("missing trace header".into());
        }
        Ok(trace)
    }
}

/// Unclamped window predictions for one trial, in window order, each with
/// its end frame. Transformer memory is chained across windows.
pub fn offline_predictions(
    ckpt: &Checkpoint,
    trial: &PreparedTrial,
) -> Result<Vec<(usize, [f64; OSATS_DIMS])>, TrainError> {
    let model = &ckpt.model;
    let vision = vision_for(model, trial, true, None)?;
    let feats = features_for(trial, &ckpt.stats, vision)?;
    let cfg = &ckpt.experiment;
    let mut memory: Option<Vec<f64>> = None;
    let mut out = Vec::new();
    for w in windows(&feats, cfg.window, cfg.stride) {
        let p = model.predict(&WindowView::from_sample(&w), memory.as_deref())?;
        memory = p.memory;
        out.push((w.end_frame, p.scores));
    }
    Ok(out)
}

pub fn clamp_scores(s: [f64; OSATS_DIMS]) -> [f64; OSATS_DIMS] {
    s.map(|v| v.clamp(1.0, 5.0))
}

#[derive(Clone, Debug)]
pub struct FoldOutput {
    pub predictions: FoldPredictions,
    pub traces: Vec<PredictionTrace>,
}

/// Clamped predictions and traces for every test trial of `fold`.
pub fn evaluate_fold(
    ckpt: &Checkpoint,
    fold: &FoldSpec,
    trials: &[PreparedTrial],
) -> Result<FoldOutput, TrainError> {
    if fold.test.is_empty() {
        return Err(TrainError::EmptyTestSet(fold.name.clone()));
    }
    let mut predictions = FoldPredictions {
        fold: fold.name.clone(),
        windows: BTreeMap::new(),
    };
    let mut traces = Vec::new();
    for id in &fold.test {
        let trial = lookup(trials, id)?;
        let preds = offline_predictions(ckpt, trial)?;
        let rows: Vec<TraceRow> = preds
            .iter()
            .map(|&(end, s)| TraceRow {
                window_end_frame: end,
                time_s: end as f64 / trial.rate_hz,
                scores: clamp_scores(s),
                gesture: gesture_at(&trial.gestures, end),
            })
            .collect();
        predictions
            .windows
            .insert(id.clone(), rows.iter().map(|r| r.scores).collect());
        traces.push(PredictionTrace {
            trial_id: id.clone(),
            model: ckpt.model.variant().name().into(),
            truth: Some(trial.meta.target()),
            rows,
        });
    }
    Ok(FoldOutput {
        predictions,
        traces,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub folds: Vec<FoldSpec>,
    pub runs: Vec<FoldRun>,
    pub outputs: Vec<FoldOutput>,
    pub eval: EvalResult,
}

/// Folds, training and evaluation for every fold of the configured scheme.
pub fn run_experiment(
    config: &ExperimentConfig,
    registry: &[TrialMeta],
    trials: &[PreparedTrial],
) -> Result<ExperimentResult, TrainError> {
    config.validate()?;
    let folds = make_folds(config.scheme, registry, config.losi_n)?;
    let mut cache = EmbeddingCache::new();
    let mut runs = Vec::new();
    let mut outputs = Vec::new();
    for fold in &folds {
        let run = fit_fold(config, fold, trials, Some(&mut cache))?;
        outputs.push(evaluate_fold(&run.checkpoint, fold, trials)?);
        runs.push(run);
    }
    let preds: Vec<FoldPredictions> = outputs.iter().map(|o| o.predictions.clone()).collect();
    let eval = aggregate_report(&preds, registry, &folds, config.n_perm, config.seed)?;
    Ok(ExperimentResult {
        folds,
        runs,
        outputs,
        eval,
    })
}
