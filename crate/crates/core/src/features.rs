//! Relative-motion features, per-frame channel assembly, min-max
//! normalization and sliding windows.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FrameSeries, KinematicSeries, Manipulator, Rotation, OSATS_DIMS};
use crate::matrix::Matrix;

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_CHANNELS: usize = 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("rotation orthonormality defect {0:.3e} exceeds tolerance")]
    NonRotation(f64),
    #[error("series has {0} frames, at least 2 required")]
    TooShort(usize),
    #[error("normalization needs at least one training row")]
    EmptyTrain,
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandPose {
    pub p: [f64; 3],
    pub r: Rotation,
}

impl HandPose {
    pub fn from_series(kin: &KinematicSeries, t: usize, m: Manipulator) -> Self {
        Self {
            p: kin.position(t, m),
            r: kin.rotation(t, m),
        }
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_rotation(r: &Rotation, tolerance: f64) -> Result<(), FeatureError> {
    let defect = crate::ingest::orthonormality_defect(r);
    if defect > tolerance || !defect.is_finite() {
        Err(FeatureError::NonRotation(defect))
    } else {
        Ok(())
    }
}

/// Angle of the relative rotation `R_prevᵀ R_next`, in `[0, π]`.
pub fn rotation_displacement(
    prev: &Rotation,
    next: &Rotation,
    tolerance: f64,
) -> Result<f64, FeatureError> {
    check_rotation(prev, tolerance)?;
    check_rotation(next, tolerance)?;
    Ok(relative_angle(prev, next))
}

fn relative_angle(prev: &Rotation, next: &Rotation) -> f64 {
    // tr(AᵀB) is the Frobenius inner product.
    let mut trace = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            trace += prev[i][j] * next[i][j];
        }
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Six relative-motion scalars for one time step:
/// hand offset, change of offset, dominant speed, dominant rotation,
/// non-dominant speed, non-dominant rotation.
pub fn eq1_features(
    prev_d: &HandPose,
    cur_d: &HandPose,
    prev_n: &HandPose,
    cur_n: &HandPose,
    tolerance: f64,
) -> Result<[f64; 6], FeatureError> {
    for pose in [prev_d, cur_d, prev_n, cur_n] {
        check_rotation(&pose.r, tolerance)?;
    }
    Ok(pair_features(prev_d, cur_d, prev_n, cur_n))
}

fn pair_features(
    prev_d: &HandPose,
    cur_d: &HandPose,
    prev_n: &HandPose,
    cur_n: &HandPose,
) -> [f64; 6] {
    let offset = distance(&cur_d.p, &cur_n.p);
    [
        offset,
        offset - distance(&prev_d.p, &prev_n.p),
        distance(&cur_d.p, &prev_d.p),
        relative_angle(&prev_d.r, &cur_d.r),
        distance(&cur_n.p, &prev_n.p),
        relative_angle(&prev_n.r, &cur_n.r),
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    #[default]
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Patient,
    Console,
}

impl Side {
    /// (dominant, non-dominant) manipulators. The right hand drives MTM2 on
    /// the console and PSM1 on the patient side.
    pub fn pair(self, dominant: Hand) -> (Manipulator, Manipulator) {
        let (right, left) = match self {
            Side::Patient => (Manipulator::Psm1, Manipulator::Psm2),
            Side::Console => (Manipulator::Mtm2, Manipulator::Mtm1),
        };
        match dominant {
            Hand::Right => (right, left),
            Hand::Left => (left, right),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSource {
    /// Component `0..6` of the relative-motion vector for one manipulator pair.
    Pair {
        side: Side,
        component: usize,
    },
    GripperAngle {
        manipulator: Manipulator,
    },
    /// Backward difference of the gripper angle, in radians per second.
    GripperVelocity {
        manipulator: Manipulator,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub name: String,
    pub source: ChannelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub dominant: Hand,
    pub channels: Vec<ChannelDescriptor>,
    /// Orthonormality tolerance for rotations entering the pair features.
    pub tolerance: f64,
}

const PAIR_NAMES: [&str; 6] = [
    "offset",
    "offset_change",
    "dom_speed",
    "dom_rotation",
    "nondom_speed",
    "nondom_rotation",
];

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::standard(Hand::Right)
    }
}

impl ChannelLayout {
    /// Patient-side pair features, console-side pair features, the four
    /// gripper angles in file order, then the two PSM gripper velocities.
    pub fn standard(dominant: Hand) -> Self {
        let mut channels = Vec::with_capacity(DEFAULT_CHANNELS);
        for (side, prefix) in [(Side::Patient, "psm"), (Side::Console, "mtm")] {
            for (component, name) in PAIR_NAMES.iter().enumerate() {
                channels.push(ChannelDescriptor {
                    name: format!("{prefix}_{name}"),
                    source: ChannelSource::Pair { side, component },
                });
            }
        }
        for m in Manipulator::ALL {
            channels.push(ChannelDescriptor {
                name: format!("{}_grip", m.name()),
                source: ChannelSource::GripperAngle { manipulator: m },
            });
        }
        for m in [Manipulator::Psm1, Manipulator::Psm2] {
            channels.push(ChannelDescriptor {
                name: format!("{}_grip_vel", m.name()),
                source: ChannelSource::GripperVelocity { manipulator: m },
            });
        }
        Self {
            dominant,
            channels,
            tolerance: 0.1,
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }
}

/// `(T−1) × C` channel matrix; row `i` describes the step from frame `i` to
/// frame `i + 1`.
pub fn per_frame_channels(
    kin: &KinematicSeries,
    layout: &ChannelLayout,
) -> Result<Matrix, FeatureError> {
    let t = kin.len();
    if t < 2 {
        return Err(FeatureError::TooShort(t));
    }
    for s in 0..t {
        for m in Manipulator::ALL {
            let uses = layout.channels.iter().any(|c| match c.source {
                ChannelSource::Pair { side, .. } => {
                    let (d, n) = side.pair(layout.dominant);
                    d == m || n == m
                }
                _ => false,
            });
            if uses {
                check_rotation(&kin.rotation(s, m), layout.tolerance)?;
            }
        }
    }
    let c = layout.len();
    let mut out = Matrix::zeros(t - 1, c);
    for row in 0..t - 1 {
        let (prev, cur) = (row, row + 1);
        let mut pairs: [Option<[f64; 6]>; 2] = [None, None];
        for (j, ch) in layout.channels.iter().enumerate() {
            let v = match ch.source {
                ChannelSource::Pair { side, component } => {
                    let slot = side as usize;
                    let feats = *pairs[slot].get_or_insert_with(|| {
                        let (d, n) = side.pair(layout.dominant);
                        pair_features(
                            &HandPose::from_series(kin, prev, d),
                            &HandPose::from_series(kin, cur, d),
                            &HandPose::from_series(kin, prev, n),
                            &HandPose::from_series(kin, cur, n),
                        )
                    });
                    feats[component]
                }
                ChannelSource::GripperAngle { manipulator } => kin.gripper(cur, manipulator),
                ChannelSource::GripperVelocity { manipulator } => {
                    (kin.gripper(cur, manipulator) - kin.gripper(prev, manipulator)) * kin.rate_hz
                }
            };
            out.set(row, j, v);
        }
    }
    Ok(out)
}

/// Header line of channel names followed by one comma-separated row per step.
pub fn channels_to_csv(channels: &Matrix, layout: &ChannelLayout) -> String {
    let mut out = layout.names().join(",");
    out.push('\n');
    for r in 0..channels.rows() {
        for (j, v) in channels.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Per-channel min and max of the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a Matrix>) -> Result<Self, FeatureError> {
        let mut stats: Option<Self> = None;
        for m in train {
            if m.rows() == 0 {
                continue;
            }
            let s = stats.get_or_insert_with(|| Self {
                min: vec![f64::INFINITY; m.cols()],
                max: vec![f64::NEG_INFINITY; m.cols()],
            });
            if s.min.len() != m.cols() {
                return Err(FeatureError::ChannelMismatch {
                    expected: s.min.len(),
                    found: m.cols(),
                });
            }
            for r in 0..m.rows() {
                for (j, &v) in m.row(r).iter().enumerate() {
                    s.min[j] = s.min[j].min(v);
                    s.max[j] = s.max[j].max(v);
                }
            }
        }
        stats.ok_or(FeatureError::EmptyTrain)
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// `(x − min)/(max − min)`, or 0 on a degenerate channel. Not clamped.
    pub fn scale(&self, channel: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = self.scale(j, *v);
        }
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix, FeatureError> {
        if m.cols() != self.channels() {
            return Err(FeatureError::ChannelMismatch {
                expected: self.channels(),
                found: m.cols(),
            });
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            self.apply_row(out.row_mut(r));
        }
        Ok(out)
    }
}

/// Fits stats on `train` and applies them to every matrix in `apply_to`.
pub fn normalize(
    train: &[Matrix],
    apply_to: &[Matrix],
) -> Result<(NormalizationStats, Vec<Matrix>), FeatureError> {
    let stats = NormalizationStats::fit(train)?;
    let out = apply_to
        .iter()
        .map(|m| stats.apply(m))
        .collect::<Result<_, _>>()?;
    Ok((stats, out))
}

/// Standard per-channel pixel constants; single-channel frames use their
/// averages.
pub fn pixel_constants(channels: usize) -> (Vec<f64>, Vec<f64>) {
    const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    const STD: [f64; 3] = [0.229, 0.224, 0.225];
    if channels == 3 {
        (MEAN.to_vec(), STD.to_vec())
    } else {
        (vec![0.449; channels], vec![0.226; channels])
    }
}

/// Frame stream aligned to channel rows (one frame per row).
#[derive(Clone, Debug, PartialEq)]
pub enum VisionSeries {
    /// Normalized frames in `C × H × W` layout, concatenated.
    Frames {
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    },
    /// One `D`-dimensional embedding per row.
    Embeddings(Matrix),
}

impl VisionSeries {
    pub fn rows(&self) -> usize {
        match self {
            Self::Frames {
                channels,
                height,
                width,
                data,
            } => data.len() / (channels * height * width).max(1),
            Self::Embeddings(m) => m.rows(),
        }
    }

    /// Values per row: `C·H·W` or `D`.
    pub fn row_len(&self) -> usize {
        match self {
            Self::Frames {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
            Self::Embeddings(m) => m.cols(),
        }
    }

    pub fn rows_slice(&self, start: usize, len: usize) -> &[f64] {
        let n = self.row_len();
        match self {
            Self::Frames { data, .. } => &data[start * n..(start + len) * n],
            Self::Embeddings(m) => &m.data()[start * n..(start + len) * n],
        }
    }
}

/// Normalizes one `H × W × C` frame into `C × H × W` order.
pub fn normalize_frame(pixels: &[f32], height: usize, width: usize, channels: usize) -> Vec<f64> {
    let (mean, std) = pixel_constants(channels);
    let mut out = vec![0.0; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = pixels[(y * width + x) * channels + c] as f64;
                out[(c * height + y) * width + x] = (v - mean[c]) / std[c];
            }
        }
    }
    out
}

/// Frames aligned with the rows of `per_frame_channels`: row `i` pairs with
/// frame `i + 1`, repeating the final frame if the video is one frame short.
pub fn align_frames(frames: &FrameSeries, rows: usize) -> VisionSeries {
    let n = frames.frame_len();
    let mut data = Vec::with_capacity(rows * n);
    for i in 0..rows {
        let f = (i + 1).min(frames.n_frames.saturating_sub(1));
        data.extend(normalize_frame(
            frames.frame(f),
            frames.height,
            frames.width,
            frames.channels,
        ));
    }
    VisionSeries::Frames {
        channels: frames.channels,
        height: frames.height,
        width: frames.width,
        data,
    }
}

/// Per-trial inputs shared by all of its windows.
#[derive(Clone, Debug)]
pub struct TrialFeatures {
    pub trial_id: Arc<str>,
    /// Normalized channels.
    pub kin: Arc<Matrix>,
    pub vision: Option<Arc<VisionSeries>>,
    /// Source frame index of row 0.
    pub first_frame: usize,
    pub target: [f64; OSATS_DIMS],
}

/// One window over a trial; data are borrowed from the shared trial arrays.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub trial_id: Arc<str>,
    kin: Arc<Matrix>,
    vision: Option<Arc<VisionSeries>>,
    pub start: usize,
    pub len: usize,
    pub target: [f64; OSATS_DIMS],
    /// Source frame index of the window's last row.
    pub end_frame: usize,
}

impl WindowSample {
    /// `ω × C`, row-major.
    pub fn x_kin(&self) -> &[f64] {
        &self.kin.data()[self.start * self.kin.cols()..(self.start + self.len) * self.kin.cols()]
    }

    pub fn channels(&self) -> usize {
        self.kin.cols()
    }

    /// `ω` frames or embeddings, row-major.
    pub fn x_vis(&self) -> Option<&[f64]> {
        self.vision
            .as_ref()
            .map(|v| v.rows_slice(self.start, self.len))
    }

    pub fn vision(&self) -> Option<&VisionSeries> {
        self.vision.as_deref()
    }
}

pub fn window_count(rows: usize, omega: usize, stride: usize) -> usize {
    assert!(
        omega >= 1 && stride >= 1,
        "window and stride must be positive"
    );
    if rows < omega {
        0
    } else {
        (rows - omega) / stride + 1
    }
}

pub fn windows(trial: &TrialFeatures, omega: usize, stride: usize) -> Vec<WindowSample> {
    (0..window_count(trial.kin.rows(), omega, stride))
        .map(|k| {
            let start = k * stride;
            WindowSample {
                trial_id: trial.trial_id.clone(),
                kin: trial.kin.clone(),
                vision: trial.vision.clone(),
                start,
                len: omega,
                target: trial.target,
                end_frame: trial.first_frame + start + omega - 1,
            }
        })
        .collect()
}
