#![allow(dead_code)]

use osats_core::features::HandPose;
use osats_core::models::{Model, ModelConfig, Variant, VisionView, WindowView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FRAME: usize = 6;

/// Random window inputs for a miniature model: kinematic rows and raw frames.
pub struct MiniWindow {
    pub kin: Vec<f64>,
    pub frames: Vec<f64>,
    pub embeddings: Vec<f64>,
}

impl MiniWindow {
    pub fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut r = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        Self {
            kin: r(cfg.omega * cfg.channels),
            frames: r(cfg.omega * FRAME * FRAME),
            embeddings: r(cfg.omega * cfg.embed_dim),
        }
    }

    pub fn view(&self, raw_frames: bool) -> WindowView<'_> {
        WindowView {
            kin: Some(&self.kin),
            vis: Some(if raw_frames {
                VisionView::Frames {
                    data: &self.frames,
                    channels: 1,
                    height: FRAME,
                    width: FRAME,
                }
            } else {
                VisionView::Embeddings(&self.embeddings)
            }),
        }
    }
}

pub fn mini_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        hidden: 4,
        layers: 2,
        heads: 2,
        embed_dim: 4,
        omega: 5,
        channels: 3,
        freeze_encoder: false,
        seed,
        ..ModelConfig::default()
    }
}

pub fn mini_model(variant: Variant, seed: u64) -> Model {
    Model::build(mini_config(variant, seed)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type Rot = [[f64; 3]; 3];

/// Rotation of `angle` about the unit `axis` (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Rot {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

pub fn random_axis(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n: f64 = v.iter().map(|a| a * a).sum();
        if n > 1e-2 && n <= 1.0 {
            return v;
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rot {
    let axis = random_axis(rng);
    axis_angle(axis, rng.gen_range(0.0..std::f64::consts::PI))
}

pub fn matmul(a: &Rot, b: &Rot) -> Rot {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn apply(r: &Rot, p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * p[k]).sum())
}

/// `t` frames of random valid poses for all four manipulators, with small
/// frame-to-frame motion.
pub fn random_kinematics(t: usize, rng: &mut ChaCha8Rng) -> osats_core::ingest::KinematicSeries {
    use osats_core::ingest::{Manipulator, GRIPPER, KIN_COLUMNS, POSITION, ROTATION};
    let mut data = vec![0.0; t * KIN_COLUMNS];
    for m in Manipulator::ALL {
        let mut p = [0.0; 3].map(|_: f64| rng.gen_range(-0.1..0.1));
        let mut r = random_rotation(rng);
        let mut g = rng.gen_range(0.0..1.0);
        for s in 0..t {
            let row = &mut data[s * KIN_COLUMNS..(s + 1) * KIN_COLUMNS];
            let o = m.offset();
            row[o + POSITION..o + POSITION + 3].copy_from_slice(&p);
            for i in 0..3 {
                row[o + ROTATION + 3 * i..o + ROTATION + 3 * i + 3].copy_from_slice(&r[i]);
            }
            row[o + GRIPPER] = g;
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.01..0.01);
            }
            let step = axis_angle(random_axis(rng), rng.gen_range(0.0..0.2));
            r = matmul(&r, &step);
            g += rng.gen_range(-0.05..0.05);
        }
    }
    osats_core::ingest::KinematicSeries::from_flat(data, 30.0)
}

/// Small synthetic registry with prepared channels under the default layout.
pub fn small_dataset(
    subjects: usize,
    reps: usize,
    frames: usize,
    video: bool,
) -> (
    Vec<osats_core::ingest::TrialMeta>,
    Vec<osats_core::trainer::PreparedTrial>,
) {
    let cfg = osats_core::synth::SynthConfig {
        n_subjects: subjects,
        reps_per_subject: reps,
        frames,
        frame_size: 8,
        video,
        ..Default::default()
    };
    let (registry, records) = osats_core::synth::generate(&cfg).unwrap();
    let trials = osats_core::trainer::prepare_trials(
        &records,
        &osats_core::features::ChannelLayout::default(),
    )
    .unwrap();
    (registry, trials)
}

/// Experiment with a small model of `variant`, window 20, stride 10.
pub fn small_experiment(variant: Variant, epochs: usize) -> osats_core::trainer::ExperimentConfig {
    let mut cfg = osats_core::trainer::ExperimentConfig {
        model: ModelConfig {
            variant,
            hidden: 8,
            layers: 1,
            heads: 2,
            embed_dim: 8,
            ..ModelConfig::default()
        },
        epochs,
        batch_size: 16,
        n_perm: 200,
        ..Default::default()
    };
    cfg.optimizer.lr = 5e-3;
    cfg.with_window(20)
}

/// Straight from the definition: Euclidean norms by explicit sums and the
/// angle from the explicitly formed relative rotation.
pub fn pose_feature_oracle(
    prev_d: &HandPose,
    cur_d: &HandPose,
    prev_n: &HandPose,
    cur_n: &HandPose,
) -> [f64; 6] {
    fn norm(a: [f64; 3], b: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s.sqrt()
    }
    fn angle(a: &Rot, b: &Rot) -> f64 {
        let mut at = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                at[i][j] = a[j][i];
            }
        }
        let rel = matmul(&at, b);
        let c = (rel[0][0] + rel[1][1] + rel[2][2] - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }
    [
        norm(cur_d.p, cur_n.p),
        norm(cur_d.p, cur_n.p) - norm(prev_d.p, prev_n.p),
        norm(cur_d.p, prev_d.p),
        angle(&prev_d.r, &cur_d.r),
        norm(cur_n.p, prev_n.p),
        angle(&prev_n.r, &cur_n.r),
    ]
}

pub fn random_pose(r: &mut ChaCha8Rng) -> HandPose {
    HandPose {
        p: [0.0; 3].map(|_: f64| r.gen_range(-1.0..1.0)),
        r: random_rotation(r),
    }
}

/// Quadratic-time average ranks and the textbook Pearson formula.
pub fn oracle_rho(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}
