//! Synthetic suturing trials with a controllable latent skill.
//!
//! Each trial carries a skill `s ∈ [0, 1]` that sets its scores. A modality
//! split `gamma` decides how the evidence for `s` is shared out. Kinematics
//! reflect a kinematic skill `s_kin` through tremor and pauses. Video reflects
//! a visual skill `s_vis` through the amplitude of a tissue-deformation blob.
//! The two are chosen so that `gamma * s_kin + (1 - gamma) * s_vis = s`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    write_kinematics, write_meta, write_sfrm, write_transcription, DatasetLayout, FrameSeries,
    Gesture, GestureSegment, KinematicSeries, Manipulator, SkillClass, TrialMeta, TrialRecord,
    ANGULAR_VELOCITY, GRIPPER, KIN_COLUMNS, LINEAR_VELOCITY, OSATS_DIMS, POSITION, ROTATION,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth config: {0}")]
    BadConfig(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub reps_per_subject: usize,
    /// Frames per trial.
    pub frames: usize,
    /// Base skill per subject; evenly spread over [0.25, 0.75] when absent.
    pub skills: Option<Vec<f64>>,
    /// Skill gained from the first to the last repetition.
    pub learning_gain: f64,
    /// Share of the label signal carried by kinematics.
    pub gamma: f64,
    /// Peak tremor amplitude in metres at zero skill.
    pub tremor: f64,
    /// Peak angular tremor in radians at zero skill.
    pub rotation_tremor: f64,
    /// Chance of a pause per gesture phase at zero skill.
    pub pause_rate: f64,
    /// White position noise, metres.
    pub kin_noise: f64,
    /// Blob amplitude at zero visual skill.
    pub blob_amplitude: f64,
    pub frame_noise: f64,
    /// Standard deviation of the per-dimension label noise.
    pub label_noise: f64,
    /// Extra label noise scaled by `1 - s`.
    pub novice_label_noise: f64,
    pub frame_size: usize,
    pub video: bool,
    pub rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            reps_per_subject: 5,
            frames: 600,
            skills: None,
            learning_gain: 0.5,
            gamma: 1.0,
            tremor: 0.002,
            rotation_tremor: 0.02,
            pause_rate: 0.5,
            kin_noise: 5e-5,
            blob_amplitude: 0.5,
            frame_noise: 0.02,
            label_noise: 0.05,
            novice_label_noise: 0.0,
            frame_size: 32,
            video: true,
            rate_hz: 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Noise-free generator for a single subject of fixed skill.
    pub fn noiseless(skill: f64) -> Self {
        Self {
            n_subjects: 1,
            skills: Some(vec![skill]),
            learning_gain: 0.0,
            kin_noise: 0.0,
            frame_noise: 0.0,
            label_noise: 0.0,
            novice_label_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.n_subjects == 0 || self.reps_per_subject == 0 {
            return bad("need at least one subject and one repetition".into());
        }
        if self.frames < 2 {
            return bad(format!(
                "trials need at least 2 frames, got {}",
                self.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if let Some(s) = &self.skills {
            if s.len() != self.n_subjects {
                return bad(format!(
                    "{} skills for {} subjects",
                    s.len(),
                    self.n_subjects
                ));
            }
            if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return bad(format!("skill {v} outside [0, 1]"));
            }
        }
        let scales = [
            self.learning_gain,
            self.tremor,
            self.rotation_tremor,
            self.pause_rate,
            self.kin_noise,
            self.blob_amplitude,
            self.frame_noise,
            self.label_noise,
            self.novice_label_noise,
        ];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise scales must be finite and non-negative".into());
        }
        if self.frame_size < 4 || self.rate_hz <= 0.0 {
            return bad("frame size must be at least 4 and rate positive".into());
        }
        Ok(())
    }

    pub fn subject_skill(&self, subject: usize) -> f64 {
        match &self.skills {
            Some(s) => s[subject],
            None if self.n_subjects == 1 => 0.5,
            None => 0.25 + 0.5 * subject as f64 / (self.n_subjects - 1) as f64,
        }
    }

    /// Skill of repetition `rep` (1-based), centred on the subject's base.
    pub fn trial_skill(&self, subject: usize, rep: u32) -> f64 {
        let frac = if self.reps_per_subject > 1 {
            (rep - 1) as f64 / (self.reps_per_subject - 1) as f64
        } else {
            0.5
        };
        (self.subject_skill(subject) + self.learning_gain * (frac - 0.5)).clamp(0.0, 1.0)
    }
}

pub fn subject_id(subject: usize) -> String {
    if subject < 25 {
        ((b'B' + subject as u8) as char).to_string()
    } else {
        format!("S{subject}")
    }
}

pub fn trial_id(subject: usize, rep: u32) -> String {
    format!("Suturing_{}{rep:03}", subject_id(subject))
}

/// Latent skills behind one trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latent {
    pub skill: f64,
    pub kin: f64,
    pub vis: f64,
}

/// Splits `s` into kinematic and visual skills whose `gamma`-weighted mean
/// is `s`, drawing the free part uniformly from the feasible range.
pub fn split_skill(s: f64, gamma: f64, rng: &mut impl Rng) -> (f64, f64) {
    if gamma >= 1.0 {
        return (s, rng.gen());
    }
    if gamma <= 0.0 {
        return (rng.gen(), s);
    }
    let lo = ((s - (1.0 - gamma)) / gamma).max(0.0);
    let hi = (s / gamma).min(1.0);
    let a = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let b = ((s - gamma * a) / (1.0 - gamma)).clamp(0.0, 1.0);
    (a, b)
}

pub fn skill_class(s: f64) -> SkillClass {
    if s < 1.0 / 3.0 {
        SkillClass::N
    } else if s < 2.0 / 3.0 {
        SkillClass::I
    } else {
        SkillClass::E
    }
}

pub fn label(s: f64, noise: f64) -> u8 {
    (1.0 + 4.0 * (s + noise)).round().clamp(1.0, 5.0) as u8
}

fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Sum of three seeded sinusoids in the 8–12 Hz band, peak amplitude ≤ 1.
struct Tremor {
    parts: [(f64, f64); 3],
}

impl Tremor {
    fn new(rng: &mut impl Rng) -> Self {
        let mut part = || {
            (
                rng.gen_range(8.0..12.0) * 2.0 * PI,
                rng.gen_range(0.0..2.0 * PI),
            )
        };
        Self {
            parts: [part(), part(), part()],
        }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.parts
            .iter()
            .map(|(w, phi)| (w * seconds + phi).sin())
            .sum::<f64>()
            / 3.0
    }
}

const PHASE_MIN: usize = 30;
const PHASE_MAX: usize = 70;
const PAUSE_MIN: usize = 8;
const PAUSE_MAX: usize = 20;
const PSM_SCALE: f64 = 0.2;

fn gesture_phases(frames: usize, rng: &mut impl Rng) -> Vec<GestureSegment> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut k = 0u8;
    while start < frames {
        let len = rng.gen_range(PHASE_MIN..=PHASE_MAX);
        let end = (start + len - 1).min(frames - 1);
        out.push(GestureSegment {
            start_frame: start,
            end_frame: end,
            label: Gesture::new(k % 6 + 1).expect("gesture index"),
        });
        start = end + 1;
        k += 1;
    }
    out
}

/// Pose trajectory of one hand in console coordinates: position, Euler
/// angles and gripper angle per frame.
struct HandPath {
    pos: Vec<[f64; 3]>,
    ang: Vec<[f64; 3]>,
    grip: Vec<f64>,
}

fn hand_path(
    config: &SynthConfig,
    phases: &[GestureSegment],
    home: [f64; 3],
    reach: f64,
    s_kin: f64,
    rng: &mut ChaCha8Rng,
) -> HandPath {
    let n = config.frames;
    let mut pos = vec![home; n];
    let mut ang = vec![[0.0; 3]; n];
    let mut grip = vec![0.3; n];
    let (mut p0, mut a0, mut g0) = (home, [0.0; 3], 0.3);
    for seg in phases {
        let p1: [f64; 3] = std::array::from_fn(|i| home[i] + rng.gen_range(-reach..reach));
        let a1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let g1 = if seg.label.index() % 2 == 1 { 0.9 } else { 0.1 };
        let len = seg.end_frame - seg.start_frame + 1;
        let pause = if rng.gen_bool((config.pause_rate * (1.0 - s_kin)).clamp(0.0, 1.0)) {
            rng.gen_range(PAUSE_MIN..=PAUSE_MAX).min(len / 2)
        } else {
            0
        };
        let moving = (len - pause).max(1);
        for f in seg.start_frame..=seg.end_frame {
            let tau = (f - seg.start_frame).saturating_sub(pause) as f64 / moving as f64;
            let w = min_jerk(tau);
            pos[f] = std::array::from_fn(|i| p0[i] + (p1[i] - p0[i]) * w);
            ang[f] = std::array::from_fn(|i| a0[i] + (a1[i] - a0[i]) * w);
            grip[f] = g0 + (g1 - g0) * w;
        }
        (p0, a0, g0) = (p1, a1, g1);
    }
    let amp = 1.0 - s_kin;
    let pos_tremor: Vec<Tremor> = (0..3).map(|_| Tremor::new(rng)).collect();
    let ang_tremor: Vec<Tremor> = (0..3).map(|_| Tremor::new(rng)).collect();
    let noise = Normal::new(0.0, config.kin_noise).expect("finite noise scale");
    for f in 0..n {
        let sec = f as f64 / config.rate_hz;
        for i in 0..3 {
            pos[f][i] += config.tremor * amp * pos_tremor[i].at(sec) + noise.sample(rng);
            ang[f][i] += config.rotation_tremor * amp * ang_tremor[i].at(sec);
        }
    }
    HandPath { pos, ang, grip }
}

/// `Rz(c) · Ry(b) · Rx(a)`.
fn rotation([a, b, c]: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

fn derivative(values: &[[f64; 3]], f: usize, rate: f64) -> [f64; 3] {
    let n = values.len();
    let (lo, hi) = (f.saturating_sub(1), (f + 1).min(n - 1));
    let span = (hi - lo).max(1) as f64 / rate;
    std::array::from_fn(|i| (values[hi][i] - values[lo][i]) / span)
}

fn fill_manipulator(
    row: &mut [f64],
    m: Manipulator,
    path: &HandPath,
    f: usize,
    scale: f64,
    origin: [f64; 3],
    rate: f64,
) {
    let o = m.offset();
    for i in 0..3 {
        row[o + POSITION + i] = origin[i] + scale * path.pos[f][i];
    }
    let r = rotation(path.ang[f]);
    for i in 0..3 {
        for j in 0..3 {
            row[o + ROTATION + 3 * i + j] = r[i][j];
        }
    }
    let v = derivative(&path.pos, f, rate);
    let w = derivative(&path.ang, f, rate);
    for i in 0..3 {
        row[o + LINEAR_VELOCITY + i] = scale * v[i];
        row[o + ANGULAR_VELOCITY + i] = w[i];
    }
    row[o + GRIPPER] = path.grip[f];
}

fn render_frames(
    config: &SynthConfig,
    dominant: &HandPath,
    s_vis: f64,
    rng: &mut ChaCha8Rng,
) -> FrameSeries {
    let size = config.frame_size;
    let half = size as f64 / 2.0;
    let centre = (
        half + rng.gen_range(-2.0..2.0),
        half + rng.gen_range(-2.0..2.0),
    );
    let period = rng.gen_range(40.0..50.0);
    let sigma2 = 2.0 * (size as f64 / 8.0).powi(2);
    let noise = Normal::new(0.0, config.frame_noise).expect("finite noise scale");
    let mut data = Vec::with_capacity(config.frames * size * size);
    for f in 0..config.frames {
        let amp = config.blob_amplitude
            * (1.0 - s_vis)
            * (0.75 + 0.25 * (2.0 * PI * f as f64 / period).sin());
        let tip = (
            half + dominant.pos[f][0] / 0.04 * half * 0.8,
            half + dominant.pos[f][1] / 0.04 * half * 0.8,
        );
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.3 + 0.1 * xf / size as f64;
                v += amp * (-((xf - centre.0).powi(2) + (yf - centre.1).powi(2)) / sigma2).exp();
                v += 0.4 * (-((xf - tip.0).powi(2) + (yf - tip.1).powi(2)) / 3.0).exp();
                v += noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    FrameSeries {
        n_frames: config.frames,
        height: size,
        width: size,
        channels: 1,
        data,
    }
}

fn trial_rng(config: &SynthConfig, subject: usize, rep: u32, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(((subject as u64) << 32 | u64::from(rep)) * 4 + part);
    rng
}

/// Latent skills of one trial; the same values `gen_trial` uses.
pub fn latent(config: &SynthConfig, subject: usize, rep: u32) -> Latent {
    let skill = config.trial_skill(subject, rep);
    let (kin, vis) = split_skill(skill, config.gamma, &mut trial_rng(config, subject, rep, 0));
    Latent { skill, kin, vis }
}

/// One trial; `subject` is 0-based and `rep` 1-based.
pub fn gen_trial(
    config: &SynthConfig,
    subject: usize,
    rep: u32,
) -> Result<TrialRecord, SynthError> {
    config.validate()?;
    if subject >= config.n_subjects || rep == 0 || rep as usize > config.reps_per_subject {
        return Err(SynthError::BadConfig(format!(
            "no trial for subject {subject} rep {rep}"
        )));
    }
    let lat = latent(config, subject, rep);

    let mut label_rng = trial_rng(config, subject, rep, 1);
    let sd = config.label_noise + config.novice_label_noise * (1.0 - lat.skill);
    let label_noise = Normal::new(0.0, sd).expect("finite noise scale");
    let osats: [u8; OSATS_DIMS] =
        std::array::from_fn(|_| label(lat.skill, label_noise.sample(&mut label_rng)));

    let mut kin_rng = trial_rng(config, subject, rep, 2);
    let phases = gesture_phases(config.frames, &mut kin_rng);
    let dominant = hand_path(
        config,
        &phases,
        [0.0, 0.0, 0.0],
        0.03,
        lat.kin,
        &mut kin_rng,
    );
    let other = hand_path(
        config,
        &phases,
        [-0.06, 0.0, 0.0],
        0.015,
        lat.kin,
        &mut kin_rng,
    );
    let mut data = vec![0.0; config.frames * KIN_COLUMNS];
    let rate = config.rate_hz;
    for (f, row) in data.chunks_exact_mut(KIN_COLUMNS).enumerate() {
        fill_manipulator(row, Manipulator::Mtm2, &dominant, f, 1.0, [0.0; 3], rate);
        fill_manipulator(row, Manipulator::Mtm1, &other, f, 1.0, [0.0; 3], rate);
        fill_manipulator(
            row,
            Manipulator::Psm1,
            &dominant,
            f,
            PSM_SCALE,
            [0.05, 0.02, -0.1],
            rate,
        );
        fill_manipulator(
            row,
            Manipulator::Psm2,
            &other,
            f,
            PSM_SCALE,
            [0.05, 0.02, -0.1],
            rate,
        );
    }

    let frames = config.video.then(|| {
        render_frames(
            config,
            &dominant,
            lat.vis,
            &mut trial_rng(config, subject, rep, 3),
        )
    });

    Ok(TrialRecord {
        meta: TrialMeta {
            trial_id: trial_id(subject, rep),
            subject_id: subject_id(subject),
            repetition: rep,
            skill_class: skill_class(lat.skill),
            osats,
        },
        kin: KinematicSeries::from_flat(data, rate),
        frames,
        gestures: phases,
    })
}

/// Every trial of the grid, in subject-major order.
pub fn generate(config: &SynthConfig) -> Result<(Vec<TrialMeta>, Vec<TrialRecord>), SynthError> {
    config.validate()?;
    let mut trials = Vec::with_capacity(config.n_subjects * config.reps_per_subject);
    for s in 0..config.n_subjects {
        for r in 1..=config.reps_per_subject as u32 {
            trials.push(gen_trial(config, s, r)?);
        }
    }
    Ok((trials.iter().map(|t| t.meta.clone()).collect(), trials))
}

/// Writes the grid under `out` in the dataset layout and returns the registry.
pub fn gen_dataset(config: &SynthConfig, out: &Path) -> Result<Vec<TrialMeta>, SynthError> {
    config.validate()?;
    let layout = DatasetLayout::new(out);
    for dir in ["kinematics", "transcriptions", "video"] {
        if dir == "video" && !config.video {
            continue;
        }
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    let mut registry = Vec::new();
    for s in 0..config.n_subjects {
        for r in 1..=config.reps_per_subject as u32 {
            let trial = gen_trial(config, s, r)?;
            let id = &trial.meta.trial_id;
            let write = |path: std::path::PathBuf, bytes: &[u8]| {
                std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))
            };
            write(
                layout.kinematics(id),
                write_kinematics(&trial.kin).as_bytes(),
            )?;
            write(
                layout.transcription(id),
                write_transcription(&trial.gestures).as_bytes(),
            )?;
            if let Some(f) = &trial.frames {
                write(layout.video(id), &write_sfrm(f))?;
            }
            registry.push(trial.meta);
        }
    }
    let meta = layout.meta();
    std::fs::write(&meta, write_meta(&registry)).map_err(|e| io_err(&meta, e))?;
    Ok(registry)
}
