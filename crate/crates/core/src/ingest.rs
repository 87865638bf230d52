//! Trial file formats: kinematics, gesture transcriptions, the OSATS meta
//! registry and the SFRM raw frame container.
//!
//! Kinematic rows hold 76 values: four manipulators in the order MTM1,
//! MTM2, PSM1, PSM2, each contributing 19 columns laid out as position (3),
//! rotation matrix (9, row-major), linear velocity (3), angular velocity (3)
//! and gripper angle (1).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KIN_COLUMNS: usize = 76;
pub const MANIPULATOR_COLUMNS: usize = 19;
pub const OSATS_DIMS: usize = 6;
pub const DEFAULT_RATE_HZ: f64 = 30.0;

pub const POSITION: usize = 0;
pub const ROTATION: usize = 3;
pub const LINEAR_VELOCITY: usize = 12;
pub const ANGULAR_VELOCITY: usize = 15;
pub const GRIPPER: usize = 18;

/// OSATS criterion names, in registry column order.
pub const OSATS_NAMES: [&str; OSATS_DIMS] = [
    "Respect for tissue",
    "Suture handling",
    "Time and motion",
    "Flow of operation",
    "Overall performance",
    "Quality of final product",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Manipulator {
    Mtm1,
    Mtm2,
    Psm1,
    Psm2,
}

impl Manipulator {
    pub const ALL: [Manipulator; 4] = [Self::Mtm1, Self::Mtm2, Self::Psm1, Self::Psm2];

    /// First column of this manipulator's block.
    pub fn offset(self) -> usize {
        MANIPULATOR_COLUMNS
            * match self {
                Self::Mtm1 => 0,
                Self::Mtm2 => 1,
                Self::Psm1 => 2,
                Self::Psm2 => 3,
            }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mtm1 => "mtm1",
            Self::Mtm2 => "mtm2",
            Self::Psm1 => "psm1",
            Self::Psm2 => "psm2",
        }
    }
}

pub type Rotation = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("input is empty")]
    Empty,
    #[error("line {0}: expected 76 columns, found {1}")]
    RowArity(usize, usize),
    #[error("line {0}, column {1}: non-finite value")]
    NonFinite(usize, usize),
    #[error("line {0}, column {1}: not a number")]
    BadToken(usize, usize),
    #[error("line {0}: malformed transcription line")]
    BadLine(usize),
    #[error("segment {0}: label {1} is not one of G1..G15")]
    BadLabel(usize, String),
    #[error("segment {0} overlaps its predecessor")]
    Overlap(usize),
    #[error("segment {0} has start > end")]
    Inverted(usize),
    #[error("registry header must be: {0}")]
    BadHeader(String),
    #[error("registry line {line}: bad {field}")]
    BadField { line: usize, field: &'static str },
    #[error("trial {trial}: osats{dim} outside [1, 5]")]
    ScoreRange { trial: String, dim: usize },
    #[error("duplicate trial {0}")]
    DuplicateTrial(String),
    #[error("SFRM: {0}")]
    BadFrames(String),
    #[error("kinematics have {kin} rows but video has {frames} frames")]
    SyncMismatch { kin: usize, frames: usize },
    #[error("gesture segment {segment} ends at frame {end} but the trial has {len} frames")]
    GestureOutOfRange {
        segment: usize,
        end: usize,
        len: usize,
    },
    #[error("input is not valid UTF-8")]
    Utf8,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl IngestError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub rate_hz: f64,
    /// Frobenius norm bound on `RᵀR − I` before a rotation warning is logged.
    pub rotation_tolerance: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            rotation_tolerance: 1e-2,
        }
    }
}

/// `T × 76` kinematic recording.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicSeries {
    data: Vec<f64>,
    pub rate_hz: f64,
}

impl KinematicSeries {
    /// Panics unless `data.len()` is a multiple of 76.
    pub fn from_flat(data: Vec<f64>, rate_hz: f64) -> Self {
        assert_eq!(data.len() % KIN_COLUMNS, 0, "kinematic row arity");
        Self { data, rate_hz }
    }

    pub fn len(&self) -> usize {
        self.data.len() / KIN_COLUMNS
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * KIN_COLUMNS..(t + 1) * KIN_COLUMNS]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * KIN_COLUMNS..(t + 1) * KIN_COLUMNS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn position(&self, t: usize, m: Manipulator) -> [f64; 3] {
        let o = m.offset() + POSITION;
        let r = self.row(t);
        [r[o], r[o + 1], r[o + 2]]
    }

    pub fn rotation(&self, t: usize, m: Manipulator) -> Rotation {
        let o = m.offset() + ROTATION;
        let r = self.row(t);
        [
            [r[o], r[o + 1], r[o + 2]],
            [r[o + 3], r[o + 4], r[o + 5]],
            [r[o + 6], r[o + 7], r[o + 8]],
        ]
    }

    pub fn gripper(&self, t: usize, m: Manipulator) -> f64 {
        self.row(t)[m.offset() + GRIPPER]
    }
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthonormality_defect(r: &Rotation) -> f64 {
    let mut sum = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            sum += (dot - target) * (dot - target);
        }
    }
    sum.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationWarning {
    pub frame: usize,
    pub manipulator: Manipulator,
    pub defect: f64,
}

/// Rotation blocks whose orthonormality defect exceeds `tolerance`.
pub fn rotation_warnings(kin: &KinematicSeries, tolerance: f64) -> Vec<RotationWarning> {
    let mut out = Vec::new();
    for t in 0..kin.len() {
        for m in Manipulator::ALL {
            let defect = orthonormality_defect(&kin.rotation(t, m));
            if defect > tolerance {
                out.push(RotationWarning {
                    frame: t,
                    manipulator: m,
                    defect,
                });
            }
        }
    }
    out
}

fn parse_number(token: &str, line: usize, col: usize) -> Result<f64, IngestError> {
    let v: f64 = token
        .parse()
        .map_err(|_| IngestError::BadToken(line, col))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IngestError::NonFinite(line, col))
    }
}

/// Parses whitespace-separated kinematic rows. Blank lines are skipped; line
/// and column numbers in errors are 1-based.
pub fn parse_kinematics(text: &str, config: &IngestConfig) -> Result<KinematicSeries, IngestError> {
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let start = data.len();
        for (c, token) in line.split_whitespace().enumerate() {
            if c >= KIN_COLUMNS {
                let found = line.split_whitespace().count();
                return Err(IngestError::RowArity(line_no, found));
            }
            data.push(parse_number(token, line_no, c + 1)?);
        }
        if data.len() - start != KIN_COLUMNS {
            return Err(IngestError::RowArity(line_no, data.len() - start));
        }
    }
    if data.is_empty() {
        return Err(IngestError::Empty);
    }
    let kin = KinematicSeries::from_flat(data, config.rate_hz);
    for w in rotation_warnings(&kin, config.rotation_tolerance) {
        log::warn!(
            "frame {}: {} rotation orthonormality defect {:.3e}",
            w.frame,
            w.manipulator.name(),
            w.defect
        );
    }
    Ok(kin)
}

pub fn parse_kinematics_bytes(
    bytes: &[u8],
    config: &IngestConfig,
) -> Result<KinematicSeries, IngestError> {
    parse_kinematics(
        std::str::from_utf8(bytes).map_err(|_| IngestError::Utf8)?,
        config,
    )
}

/// One row per line, single-space separated, shortest round-trip decimals.
pub fn write_kinematics(kin: &KinematicSeries) -> String {
    let mut out = String::with_capacity(kin.data.len() * 12);
    for t in 0..kin.len() {
        for (c, v) in kin.row(t).iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Gesture(u8);

impl Gesture {
    pub fn new(index: u8) -> Option<Self> {
        (1..=15).contains(&index).then_some(Self(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn parse(label: &str) -> Option<Self> {
        let n = label.strip_prefix('G')?;
        if n.starts_with('0') || n.starts_with('+') {
            return None;
        }
        n.parse().ok().and_then(Self::new)
    }
}

impl std::fmt::Display for Gesture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "G{}", self.0)
    }
}

/// Inclusive frame interval labelled with one gesture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub label: Gesture,
}

/// Parses `start end Gk` lines; output is sorted by start frame.
pub fn parse_transcription(text: &str) -> Result<Vec<GestureSegment>, IngestError> {
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(IngestError::BadLine(i + 1));
        }
        let start: usize = fields[0].parse().map_err(|_| IngestError::BadLine(i + 1))?;
        let end: usize = fields[1].parse().map_err(|_| IngestError::BadLine(i + 1))?;
        let idx = segments.len();
        let label = Gesture::parse(fields[2])
            .ok_or_else(|| IngestError::BadLabel(idx, fields[2].to_string()))?;
        if start > end {
            return Err(IngestError::Inverted(idx));
        }
        segments.push(GestureSegment {
            start_frame: start,
            end_frame: end,
            label,
        });
    }
    segments.sort_by_key(|s| (s.start_frame, s.end_frame));
    for i in 1..segments.len() {
        if segments[i].start_frame <= segments[i - 1].end_frame {
            return Err(IngestError::Overlap(i));
        }
    }
    Ok(segments)
}

pub fn write_transcription(segments: &[GestureSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        writeln!(out, "{} {} {}", s.start_frame, s.end_frame, s.label).unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillClass {
    N,
    I,
    E,
}

impl SkillClass {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "N" => Some(Self::N),
            "I" => Some(Self::I),
            "E" => Some(Self::E),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::I => "I",
            Self::E => "E",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub trial_id: String,
    pub subject_id: String,
    pub repetition: u32,
    pub skill_class: SkillClass,
    pub osats: [u8; OSATS_DIMS],
}

impl TrialMeta {
    pub fn target(&self) -> [f64; OSATS_DIMS] {
        self.osats.map(f64::from)
    }
}

pub const META_HEADER: &str =
    "trial_id\tsubject_id\trepetition\tskill_class\tosats1\tosats2\tosats3\tosats4\tosats5\tosats6";

pub fn parse_meta(text: &str) -> Result<Vec<TrialMeta>, IngestError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(IngestError::Empty)?;
    let header_fields: Vec<&str> = header.split_whitespace().collect();
    let expected: Vec<&str> = META_HEADER.split('\t').collect();
    if header_fields != expected {
        return Err(IngestError::BadHeader(expected.join(" ")));
    }
    let mut metas: Vec<TrialMeta> = Vec::new();
    let mut ids = BTreeSet::new();
    let mut slots = BTreeSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != expected.len() {
            return Err(IngestError::BadField {
                line: line_no,
                field: "column count",
            });
        }
        let trial_id = f[0].to_string();
        if trial_id.is_empty() || trial_id.contains(char::is_whitespace) {
            return Err(IngestError::BadField {
                line: line_no,
                field: "trial_id",
            });
        }
        let repetition: u32 =
            f[2].parse()
                .ok()
                .filter(|&r| r >= 1)
                .ok_or(IngestError::BadField {
                    line: line_no,
                    field: "repetition",
                })?;
        let skill_class = SkillClass::parse(f[3]).ok_or(IngestError::BadField {
            line: line_no,
            field: "skill_class",
        })?;
        let mut osats = [0u8; OSATS_DIMS];
        for d in 0..OSATS_DIMS {
            let v: i64 = f[4 + d].parse().map_err(|_| IngestError::BadField {
                line: line_no,
                field: "osats",
            })?;
            if !(1..=5).contains(&v) {
                return Err(IngestError::ScoreRange {
                    trial: trial_id,
                    dim: d + 1,
                });
            }
            osats[d] = v as u8;
        }
        if !ids.insert(trial_id.clone()) || !slots.insert((f[1].to_string(), repetition)) {
            return Err(IngestError::DuplicateTrial(trial_id));
        }
        metas.push(TrialMeta {
            trial_id,
            subject_id: f[1].to_string(),
            repetition,
            skill_class,
            osats,
        });
    }
    Ok(metas)
}

pub fn write_meta(metas: &[TrialMeta]) -> String {
    let mut out = String::from(META_HEADER);
    out.push('\n');
    for m in metas {
        write!(
            out,
            "{}\t{}\t{}\t{}",
            m.trial_id,
            m.subject_id,
            m.repetition,
            m.skill_class.as_str()
        )
        .unwrap();
        for s in m.osats {
            write!(out, "\t{s}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Raw video frames, `n_frames × height × width × channels`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FrameSeries {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Frame `i` in `H × W × C` order.
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }
}

const SFRM_MAGIC: &[u8; 4] = b"SFRM";

pub fn read_sfrm(bytes: &[u8]) -> Result<FrameSeries, IngestError> {
    if bytes.len() < 20 || &bytes[..4] != SFRM_MAGIC {
        return Err(IngestError::BadFrames("missing SFRM header".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| IngestError::BadFrames("dimension overflow".into()))?;
    let body = &bytes[20..];
    if body.len() != count.saturating_mul(4) {
        return Err(IngestError::BadFrames(format!(
            "expected {} payload bytes, found {}",
            count.saturating_mul(4),
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(IngestError::BadFrames("non-finite pixel".into()));
    }
    Ok(FrameSeries {
        n_frames: n,
        height: h,
        width: w,
        channels: c,
        data,
    })
}

pub fn write_sfrm(frames: &FrameSeries) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + frames.data.len() * 4);
    out.extend_from_slice(SFRM_MAGIC);
    for d in [
        frames.n_frames,
        frames.height,
        frames.width,
        frames.channels,
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &frames.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub meta: TrialMeta,
    pub kin: KinematicSeries,
    pub frames: Option<FrameSeries>,
    pub gestures: Vec<GestureSegment>,
}

impl TrialRecord {
    /// Checks frame synchronization and gesture bounds.
    pub fn validate(&self) -> Result<(), IngestError> {
        let t = self.kin.len();
        if let Some(f) = &self.frames {
            if t.abs_diff(f.n_frames) > 1 {
                return Err(IngestError::SyncMismatch {
                    kin: t,
                    frames: f.n_frames,
                });
            }
        }
        for (i, g) in self.gestures.iter().enumerate() {
            if g.end_frame >= t {
                return Err(IngestError::GestureOutOfRange {
                    segment: i,
                    end: g.end_frame,
                    len: t,
                });
            }
        }
        Ok(())
    }

    /// Gesture active at `frame`, if any.
    pub fn gesture_at(&self, frame: usize) -> Option<Gesture> {
        gesture_at(&self.gestures, frame)
    }
}

pub fn gesture_at(segments: &[GestureSegment], frame: usize) -> Option<Gesture> {
    let i = segments.partition_point(|s| s.start_frame <= frame);
    (i > 0 && segments[i - 1].end_frame >= frame).then(|| segments[i - 1].label)
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))
}

pub fn load_trial(
    kin_path: &Path,
    meta: TrialMeta,
    transcript_path: &Path,
    frame_path: Option<&Path>,
    config: &IngestConfig,
) -> Result<TrialRecord, IngestError> {
    let kin = parse_kinematics(&read_text(kin_path)?, config)?;
    let gestures = parse_transcription(&read_text(transcript_path)?)?;
    let frames = match frame_path {
        Some(p) => Some(read_sfrm(
            &std::fs::read(p).map_err(|e| IngestError::io(p, e))?,
        )?),
        None => None,
    };
    let record = TrialRecord {
        meta,
        kin,
        frames,
        gestures,
    };
    record.validate()?;
    Ok(record)
}

/// On-disk dataset tree:
///
/// ```text
/// <root>/meta.tsv
/// <root>/kinematics/<trial_id>.txt
/// <root>/transcriptions/<trial_id>.txt
/// <root>/video/<trial_id>.sfrm        (optional per trial)
/// ```
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join("meta.tsv")
    }

    pub fn kinematics(&self, trial: &str) -> PathBuf {
        self.root.join("kinematics").join(format!("{trial}.txt"))
    }

    pub fn transcription(&self, trial: &str) -> PathBuf {
        self.root
            .join("transcriptions")
            .join(format!("{trial}.txt"))
    }

    pub fn video(&self, trial: &str) -> PathBuf {
        self.root.join("video").join(format!("{trial}.sfrm"))
    }

    pub fn load_registry(&self) -> Result<Vec<TrialMeta>, IngestError> {
        parse_meta(&read_text(&self.meta())?)
    }

    /// Loads every trial in the registry. Missing video files are allowed.
    pub fn load_all(
        &self,
        config: &IngestConfig,
    ) -> Result<(Vec<TrialMeta>, Vec<TrialRecord>), IngestError> {
        let registry = self.load_registry()?;
        let mut trials = Vec::with_capacity(registry.len());
        for meta in &registry {
            let video = self.video(&meta.trial_id);
            let video = video.exists().then_some(video);
            trials.push(load_trial(
                &self.kinematics(&meta.trial_id),
                meta.clone(),
                &self.transcription(&meta.trial_id),
                video.as_deref(),
                config,
            )?);
        }
        Ok((registry, trials))
    }
}
