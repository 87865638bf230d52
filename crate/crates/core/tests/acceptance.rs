mod common;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{
    apply, axis_angle, matmul, mini_model, oracle_rho, pose_feature_oracle, random_axis,
    random_kinematics, random_pose, random_rotation, rng, MiniWindow, Rot,
};
use osats_autodiff::{grad_check_params, op_catalogue, GradCheckConfig, Tape, Tensor};
use osats_core::features::{
    eq1_features, per_frame_channels, rotation_displacement, window_count, windows, ChannelLayout,
    Hand, TrialFeatures,
};
use osats_core::folds::{losi_folds, losi_member, loso_folds, louo_folds, FoldSpec, Scheme};
use osats_core::ingest::{
    parse_kinematics, parse_meta, parse_transcription, read_sfrm, write_kinematics, write_meta,
    write_sfrm, write_transcription, FrameSeries, Gesture, GestureSegment, IngestConfig,
    KinematicSeries, Manipulator, SkillClass, TrialMeta, KIN_COLUMNS, OSATS_NAMES, POSITION,
    ROTATION,
};
use osats_core::metrics::{
    aggregate_table, pair_cell, per_dimension_table, permutation_pvalue, rmse, spearman_rho,
    EvalResult, MetricsError,
};
use osats_core::models::{Model, ModelConfig, Variant, WindowView};
use osats_core::report::{render_trace, TraceFigure};
use osats_core::stream::{RawFrame, Session, StreamMessage};
use osats_core::synth::{generate, SynthConfig};
use osats_core::trainer::{
    fit_fold, offline_predictions, prepare_trials, run_experiment, Checkpoint, CheckpointError,
    ExperimentConfig, ExperimentResult, PreparedTrial,
};
use osats_core::Matrix;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 12] = [
    Criterion {
        id: "AC1",
        title: "per-step features match brute-force oracles",
        run: ac1,
    },
    Criterion {
        id: "AC2",
        title: "feature invariances and hand-swap law",
        run: ac2,
    },
    Criterion {
        id: "AC3",
        title: "window-count law",
        run: ac3,
    },
    Criterion {
        id: "AC4",
        title: "metric oracles and null calibration",
        run: ac4,
    },
    Criterion {
        id: "AC5",
        title: "finite-difference gradient checks",
        run: ac5,
    },
    Criterion {
        id: "AC6",
        title: "fold laws",
        run: ac6,
    },
    Criterion {
        id: "AC7",
        title: "end-to-end learnability",
        run: ac7,
    },
    Criterion {
        id: "AC8",
        title: "fusion advantage",
        run: ac8,
    },
    Criterion {
        id: "AC9",
        title: "LOSI high-skill fold beats low-skill fold",
        run: ac9,
    },
    Criterion {
        id: "AC10",
        title: "streaming equivalence and latency",
        run: ac10,
    },
    Criterion {
        id: "AC11",
        title: "format round trips",
        run: ac11,
    },
    Criterion {
        id: "AC12",
        title: "report shape",
        run: ac12,
    },
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| f.eq_ignore_ascii_case(c.id)))
        .collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &selected {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {} {}: {detail} ({secs:.1} s)", c.id, c.title),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {} {}: {detail} ({secs:.1} s)", c.id, c.title);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        selected.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(started: Instant, limit: Duration) -> Result<f64, String> {
    let secs = started.elapsed().as_secs_f64();
    ensure!(
        secs < limit.as_secs_f64(),
        "took {secs:.1} s, limit {} s",
        limit.as_secs()
    );
    Ok(secs)
}

fn ac1() -> Outcome {
    let started = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = [0; 4].map(|_| random_pose(&mut r));
        let got = eq1_features(&p[0], &p[1], &p[2], &p[3], 1e-2).map_err(|e| e.to_string())?;
        let want = pose_feature_oracle(&p[0], &p[1], &p[2], &p[3]);
        for k in 0..6 {
            worst = worst.max((got[k] - want[k]).abs());
        }
    }
    ensure!(worst <= 1e-12, "feature error {worst:e}");
    // The arc cosine is ill-conditioned at 0 and π; sample away from them.
    let mut worst_angle = 0.0f64;
    for _ in 0..10_000 {
        let base = random_rotation(&mut r);
        let theta = r.gen_range(1e-4..PI - 1e-4);
        let next = matmul(&base, &axis_angle(random_axis(&mut r), theta));
        let got = rotation_displacement(&base, &next, 1e-2).map_err(|e| e.to_string())?;
        worst_angle = worst_angle.max((got - theta).abs());
    }
    ensure!(worst_angle <= 1e-10, "angle error {worst_angle:e}");
    let secs = within(started, Duration::from_secs(5))?;
    Ok(format!(
        "max feature error {worst:.1e}, max angle error {worst_angle:.1e}, {secs:.2} s"
    ))
}

fn transform(kin: &KinematicSeries, q: &Rot, shift: [f64; 3]) -> KinematicSeries {
    let mut out = kin.clone();
    for t in 0..kin.len() {
        for m in Manipulator::ALL {
            let o = m.offset();
            let p = apply(q, kin.position(t, m));
            let rot = matmul(q, &kin.rotation(t, m));
            let row = out.row_mut(t);
            for i in 0..3 {
                row[o + POSITION + i] = p[i] + shift[i];
                row[o + ROTATION + 3 * i..o + ROTATION + 3 * i + 3].copy_from_slice(&rot[i]);
            }
        }
    }
    out
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ac2() -> Outcome {
    let layout = ChannelLayout::default();
    let left_layout = ChannelLayout::standard(Hand::Left);
    let mut perm: Vec<usize> = (0..18).collect();
    for block in [0, 6] {
        perm.swap(block + 2, block + 4);
        perm.swap(block + 3, block + 5);
    }
    let mut r = rng(2);
    let (mut worst_inv, mut worst_swap) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let kin = random_kinematics(12, &mut r);
        let base = per_frame_channels(&kin, &layout).map_err(|e| e.to_string())?;
        let shift = [0.0; 3].map(|_: f64| r.gen_range(-5.0..5.0));
        let q = random_rotation(&mut r);
        let moved = transform(&kin, &q, shift);
        let out = per_frame_channels(&moved, &layout).map_err(|e| e.to_string())?;
        ensure!(
            (out.rows(), out.cols()) == (base.rows(), base.cols()),
            "shape changed"
        );
        worst_inv = worst_inv.max(max_diff(&out, &base));

        let left = per_frame_channels(&kin, &left_layout).map_err(|e| e.to_string())?;
        for row in 0..base.rows() {
            for (j, &pj) in perm.iter().enumerate() {
                worst_swap = worst_swap.max((left.get(row, j) - base.get(row, pj)).abs());
            }
        }
    }
    ensure!(worst_inv <= 1e-9, "invariance error {worst_inv:e}");
    ensure!(worst_swap <= 1e-12, "swap law error {worst_swap:e}");
    Ok(format!(
        "1000 trials, max rigid-motion error {worst_inv:.1e}, max swap error {worst_swap:.1e}"
    ))
}

fn ramp(rows: usize) -> TrialFeatures {
    TrialFeatures {
        trial_id: Arc::from("t"),
        kin: Arc::new(Matrix::from_vec(
            rows,
            1,
            (0..rows).map(|i| i as f64).collect(),
        )),
        vision: None,
        first_frame: 1,
        target: [3.0; 6],
    }
}

fn ac3() -> Outcome {
    let law = |t: usize, w: usize, s: usize| {
        if t < w {
            0
        } else {
            (t - w) / s + 1
        }
    };
    let mut r = rng(3);
    let mut short = 0;
    for _ in 0..20_000 {
        let (t, w, s) = (
            r.gen_range(0..3000),
            r.gen_range(1..300),
            r.gen_range(1..100),
        );
        short += usize::from(t < w);
        ensure!(
            window_count(t, w, s) == law(t, w, s),
            "count({t}, {w}, {s})"
        );
    }
    for _ in 0..500 {
        let (t, w, s) = (r.gen_range(0..400), r.gen_range(1..80), r.gen_range(1..30));
        let got = windows(&ramp(t), w, s);
        ensure!(got.len() == law(t, w, s), "windows({t}, {w}, {s})");
        for (k, win) in got.iter().enumerate() {
            ensure!(
                win.start == k * s && win.x_kin()[0] == (k * s) as f64,
                "window {k} of ({t}, {w}, {s}) misplaced"
            );
        }
    }
    ensure!(short > 0, "grid never had T' < ω");
    let full = windows(&ramp(2000), 50, 10);
    ensure!(
        window_count(2000, 50, 10) == 196 && full.len() == 196,
        "2000/50/10 gave {}",
        full.len()
    );
    Ok(format!(
        "20000 random triples ({short} with T' < ω), 500 materialized, 2000/50/10 -> 196"
    ))
}

fn ac4() -> Outcome {
    let started = Instant::now();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for _ in 0..1000 {
        let n = r.gen_range(3..60);
        let levels = r.gen_range(2..10);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| r.gen_range(0..levels) as f64 * 0.25)
            .collect();
        match (spearman_rho(&x, &y), oracle_rho(&x, &y)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(MetricsError::DegenerateInput), None) => degenerate += 1,
            other => return Err(format!("rho disagreement {other:?}")),
        }
    }
    ensure!(worst <= 1e-12, "rho error {worst:e}");

    let mut worst_rmse = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..50);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(1.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(1.0..5.0)).collect();
        let mut sq = 0.0;
        for i in 0..n {
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let want = (sq / n as f64).sqrt();
        let got = rmse(&a, &b).map_err(|e| e.to_string())?;
        worst_rmse = worst_rmse.max((got - want).abs());
    }
    ensure!(worst_rmse <= 1e-12, "rmse error {worst_rmse:e}");

    let mut hits = 0;
    for k in 0..1000u64 {
        let x: Vec<f64> = (0..20).map(|_| r.gen()).collect();
        let y: Vec<f64> = (0..20).map(|_| r.gen()).collect();
        if permutation_pvalue(&x, &y, 2000, k).map_err(|e| e.to_string())? < 0.05 {
            hits += 1;
        }
    }
    let frac = f64::from(hits) / 1000.0;
    ensure!((0.03..=0.07).contains(&frac), "null rejection rate {frac}");
    let secs = within(started, Duration::from_secs(120))?;
    Ok(format!(
        "rho error {worst:.1e} ({degenerate} degenerate agreed), rmse error {worst_rmse:.1e}, null rate {frac:.3}, {secs:.1} s"
    ))
}

const OPS: [&str; 25] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "mul_row",
    "matmul",
    "affine",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "layer_norm",
    "conv2d",
    "max_pool",
    "mean",
    "sum",
    "mean_all",
    "concat",
    "narrow",
    "reshape",
    "gather_rows",
    "lstm_cell",
    "attention",
    "mse_loss",
];

fn ac5() -> Outcome {
    let started = Instant::now();
    let covered: BTreeSet<&str> = op_catalogue(0).iter().map(|c| c.op).collect();
    let missing: Vec<&&str> = OPS.iter().filter(|o| !covered.contains(*o)).collect();
    ensure!(missing.is_empty(), "ops without a check: {missing:?}");
    let mut op_coords = 0;
    for seed in 0..20 {
        for case in op_catalogue(seed) {
            let report = case
                .check(&GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                })
                .map_err(|e| e.to_string())?;
            ensure!(
                report.passed(),
                "{} seed {seed}: {:?}",
                case.op,
                report.failures
            );
            op_coords += report.checked;
        }
    }
    let mut model_coords = 0;
    for variant in Variant::ALL {
        for seed in 0..20 {
            let mut model = mini_model(variant, seed);
            let mut r = rng(1000 + seed);
            let wins: Vec<MiniWindow> = (0..2)
                .map(|_| MiniWindow::random(&model.config, &mut r))
                .collect();
            let memory: Option<Vec<f64>> = variant.has_memory().then(|| {
                (0..2 * model.config.hidden)
                    .map(|_| r.gen_range(-1.0..1.0))
                    .collect()
            });
            let target: Vec<f64> = (0..12).map(|_| r.gen_range(1.0..5.0)).collect();
            let config = model.config.clone();
            let f = |tape: &mut Tape, store: &osats_autodiff::ParamStore| {
                let m = Model {
                    config: config.clone(),
                    params: store.clone(),
                };
                let views: Vec<WindowView> = wins.iter().map(|w| w.view(true)).collect();
                let out = m.forward(tape, &views, memory.as_deref()).unwrap();
                let t = tape.constant(Tensor::new(vec![2, 6], target.clone()).unwrap());
                tape.mse_loss(out.pred, t)
            };
            let cfg = GradCheckConfig {
                tol: 1e-3,
                max_coords: Some(60),
                seed,
                ..GradCheckConfig::default()
            };
            let report =
                grad_check_params(&mut model.params, f, &cfg).map_err(|e| e.to_string())?;
            ensure!(
                report.passed(),
                "{variant} seed {seed}: {:?}",
                report.failures
            );
            model_coords += report.checked;
        }
    }
    let secs = within(started, Duration::from_secs(180))?;
    Ok(format!(
        "{} ops x 20 seeds ({op_coords} coords), 7 variants x 20 seeds ({model_coords} coords), {secs:.1} s",
        OPS.len()
    ))
}

fn registry_meta(subject: usize, rep: u32, osats: [u8; 6]) -> TrialMeta {
    TrialMeta {
        trial_id: format!("S{subject}_{rep:03}"),
        subject_id: format!("S{subject}"),
        repetition: rep,
        skill_class: SkillClass::I,
        osats,
    }
}

/// Train and test of one fold are disjoint and together cover the registry.
fn covers(f: &FoldSpec, all: &BTreeSet<&str>) -> Result<(), String> {
    let test: BTreeSet<&str> = f.test.iter().map(String::as_str).collect();
    let train: BTreeSet<&str> = f.train.iter().map(String::as_str).collect();
    ensure!(
        test.is_disjoint(&train),
        "{}: train and test overlap",
        f.name
    );
    ensure!(
        test.union(&train).copied().collect::<BTreeSet<_>>() == *all,
        "{}: train and test do not cover the registry",
        f.name
    );
    Ok(())
}

/// Every fold covers the registry and the test sets partition it.
fn partitions(folds: &[FoldSpec], registry: &[TrialMeta]) -> Result<(), String> {
    let all: BTreeSet<&str> = registry.iter().map(|m| m.trial_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for f in folds {
        covers(f, &all)?;
        for id in &f.test {
            ensure!(seen.insert(id.as_str()), "{id} tested twice");
        }
    }
    ensure!(
        seen == all,
        "test sets miss {} trials",
        all.len() - seen.len()
    );
    Ok(())
}

fn ac6() -> Outcome {
    let mut r = rng(6);
    let mut registries = vec![
        generate(&SynthConfig {
            frames: 20,
            video: false,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())?
        .0,
    ];
    for _ in 0..200 {
        let subjects = r.gen_range(2..9);
        let reps = r.gen_range(2..6);
        let reg: Vec<TrialMeta> = (0..subjects)
            .flat_map(|s| (1..=reps).map(move |rep| (s, rep)))
            .filter(|_| r.gen_bool(0.85))
            .map(|(s, rep)| registry_meta(s, rep, [3; 6]))
            .collect();
        registries.push(reg);
    }
    let mut checked = 0;
    for reg in &registries {
        if let Ok(f) = loso_folds(reg) {
            partitions(&f, reg)?;
            checked += 1;
        }
        if let Ok(f) = louo_folds(reg) {
            partitions(&f, reg)?;
            checked += 1;
        }
    }

    let mut triples = Vec::new();
    for a in 1..=5u8 {
        for b in 1..=5u8 {
            for c in 1..=5u8 {
                triples.push([a, b, c]);
            }
        }
    }
    let reg: Vec<TrialMeta> = triples
        .iter()
        .enumerate()
        .map(|(i, t)| registry_meta(i, 1, [t[0], t[1], t[2], 6 - t[0], 6 - t[1], 6 - t[2]]))
        .collect();
    for n in 1..=5u8 {
        let fold = losi_folds(&reg, n).map_err(|e| e.to_string())?;
        covers(&fold, &reg.iter().map(|m| m.trial_id.as_str()).collect())?;
        for (m, t) in reg.iter().zip(&triples) {
            let rule = t.contains(&n);
            ensure!(
                losi_member(&m.osats, n) == rule,
                "membership of {t:?} for n={n}"
            );
            ensure!(
                fold.train.contains(&m.trial_id) == rule,
                "{t:?} misplaced for n={n}"
            );
        }
    }
    let example = [1, 1, 2, 5, 5, 5];
    ensure!(
        (1..=5)
            .map(|n| losi_member(&example, n))
            .collect::<Vec<_>>()
            == [true, true, false, false, false],
        "(1,1,2) example"
    );
    Ok(format!(
        "{checked} LOSO/LOUO fold sets partition, 125 triples x 5 scores, (1,1,2) in n=1,2 only"
    ))
}

fn kinematic_experiment(
    variant: Variant,
    scheme: Scheme,
    epochs: usize,
    lr: f64,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelConfig {
            hidden: 32,
            layers: 1,
            ..ModelConfig::new(variant)
        },
        epochs,
        batch_size: 32,
        train_stride: Some(10),
        scheme,
        n_perm: 200,
        ..ExperimentConfig::default()
    };
    cfg.optimizer.lr = lr;
    cfg
}

fn experiment(synth: &SynthConfig, cfg: &ExperimentConfig) -> Result<ExperimentResult, String> {
    let (registry, records) = generate(synth).map_err(|e| e.to_string())?;
    let trials = prepare_trials(&records, &cfg.layout).map_err(|e| e.to_string())?;
    run_experiment(cfg, &registry, &trials).map_err(|e| e.to_string())
}

fn ac7() -> Outcome {
    let started = Instant::now();
    let synth = SynthConfig {
        gamma: 1.0,
        video: false,
        ..SynthConfig::default()
    };
    let res = experiment(
        &synth,
        &kinematic_experiment(Variant::LstmK, Scheme::Louo, 10, 3e-3),
    )?;
    let rho = res.eval.rho_bar.ok_or("no defined correlation")?;
    let rmse = res.eval.rmse_bar;
    ensure!(res.eval.folds.len() == 8, "{} folds", res.eval.folds.len());
    ensure!(rho >= 0.8, "rho_bar {rho:.3}");
    ensure!(rmse <= 0.6, "rmse_bar {rmse:.3}");
    let secs = within(started, Duration::from_secs(300))?;
    Ok(format!(
        "LSTM-K LOUO rho_bar {rho:.3}, rmse_bar {rmse:.3}, {secs:.1} s"
    ))
}

fn ac8() -> Outcome {
    let synth = SynthConfig {
        gamma: 0.5,
        ..SynthConfig::default()
    };
    let (registry, records) = generate(&synth).map_err(|e| e.to_string())?;
    let layout = ChannelLayout::default();
    let trials = prepare_trials(&records, &layout).map_err(|e| e.to_string())?;
    let mut rho = Vec::new();
    for variant in [Variant::DualLstmF, Variant::LstmK, Variant::CnnLstmV] {
        let cfg = kinematic_experiment(variant, Scheme::Loso, 10, 3e-3);
        let res = run_experiment(&cfg, &registry, &trials).map_err(|e| e.to_string())?;
        rho.push(
            res.eval
                .rho_bar
                .ok_or(format!("{variant}: no defined correlation"))?,
        );
    }
    let detail = format!(
        "DualLSTM-F {:.3}, LSTM-K {:.3}, CNN-LSTM-V {:.3}",
        rho[0], rho[1], rho[2]
    );
    ensure!(
        rho[0] - rho[1] >= 0.1 && rho[0] - rho[2] >= 0.1,
        "margin below 0.1: {detail}"
    );
    Ok(detail)
}

fn mid_bucket_rmse(res: &ExperimentResult) -> Result<(f64, usize), String> {
    let (fold, spec) = (&res.eval.folds[0], &res.folds[0]);
    let (mut se, mut count) = (0.0, 0);
    for key in ["2", "3", "4"] {
        for id in spec.buckets.get(key).into_iter().flatten() {
            let i = fold
                .trials
                .iter()
                .position(|t| t == id)
                .ok_or(format!("{id} not evaluated"))?;
            for d in 0..6 {
                se += (fold.truth[i][d] - fold.predicted[i][d]).powi(2);
            }
            count += 1;
        }
    }
    ensure!(count > 0, "no mid-skill trials in fold {}", fold.fold);
    Ok(((se / (6 * count) as f64).sqrt(), count))
}

fn ac9() -> Outcome {
    let skills: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .flat_map(|&s| [s; 3])
        .collect();
    let synth = SynthConfig {
        n_subjects: skills.len(),
        skills: Some(skills),
        learning_gain: 0.3,
        label_noise: 0.02,
        novice_label_noise: 0.25,
        video: false,
        ..SynthConfig::default()
    };
    let (registry, records) = generate(&synth).map_err(|e| e.to_string())?;
    let layout = ChannelLayout::default();
    let trials = prepare_trials(&records, &layout).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for n in [5u8, 1] {
        let mut cfg = kinematic_experiment(Variant::LstmK, Scheme::Losi, 40, 1e-2);
        cfg.losi_n = Some(n);
        let res = run_experiment(&cfg, &registry, &trials).map_err(|e| e.to_string())?;
        out.push(mid_bucket_rmse(&res)?);
    }
    let ((high, count), (low, _)) = (out[0], out[1]);
    let detail = format!("mid-bucket RMSE n=5 {high:.3}, n=1 {low:.3} over {count} trials");
    ensure!(high < low, "{detail}");
    Ok(detail)
}

fn stream_messages(
    ckpt: &Checkpoint,
    trial: &PreparedTrial,
    frames: &FrameSeries,
    raw: bool,
) -> Result<Vec<StreamMessage>, String> {
    let mut out = vec![StreamMessage::Reset {
        trial_id: trial.meta.trial_id.clone(),
    }];
    let embedded = match (ckpt.model.variant().uses_vision(), raw) {
        (true, false) => Some(
            ckpt.model
                .embed_series(trial.frames.as_ref().ok_or("no frames")?)
                .map_err(|e| e.to_string())?,
        ),
        _ => None,
    };
    for i in 0..trial.channels.rows() {
        let t = i as u64 + 1;
        out.push(StreamMessage::Kin {
            t,
            values: trial.channels.row(i).to_vec(),
        });
        out.push(StreamMessage::Frame {
            t,
            embedding: embedded.as_ref().map(|e| e.rows_slice(i, 1).to_vec()),
            raw: raw.then(|| RawFrame {
                height: frames.height,
                width: frames.width,
                channels: frames.channels,
                pixels: frames.frame(i + 1).iter().map(|&v| f64::from(v)).collect(),
            }),
        });
    }
    Ok(out)
}

/// Predictions with the wall time of the push that produced each.
fn stream(
    ckpt: &Checkpoint,
    msgs: Vec<StreamMessage>,
) -> Result<Vec<(u64, [u64; 6], Duration)>, String> {
    let mut session = Session::new(ckpt);
    let mut out = Vec::new();
    for m in msgs {
        let started = Instant::now();
        let reply = session.push(m).map_err(|e| e.to_string())?;
        let took = started.elapsed();
        if let Some(StreamMessage::Pred { t, scores, .. }) = reply {
            out.push((t, scores.map(f64::to_bits), took));
        }
    }
    Ok(out)
}

fn ac10() -> Outcome {
    let synth = SynthConfig {
        n_subjects: 2,
        reps_per_subject: 5,
        frames: 200,
        ..SynthConfig::default()
    };
    let (registry, records) = generate(&synth).map_err(|e| e.to_string())?;
    let layout = ChannelLayout::default();
    let trials = prepare_trials(&records, &layout).map_err(|e| e.to_string())?;
    let fold = louo_folds(&registry).map_err(|e| e.to_string())?.remove(0);
    let mut medians = Vec::new();
    let mut compared = 0;
    for variant in Variant::ALL {
        let cfg = ExperimentConfig {
            model: ModelConfig::new(variant),
            epochs: 1,
            train_stride: Some(50),
            ..ExperimentConfig::default()
        };
        let ckpt = fit_fold(&cfg, &fold, &trials, None)
            .map_err(|e| e.to_string())?
            .checkpoint;
        let mut latencies = Vec::new();
        for (trial, record) in trials.iter().zip(&records) {
            let frames = record
                .frames
                .as_ref()
                .ok_or("synthetic trial without video")?;
            let offline: Vec<(u64, [u64; 6])> = offline_predictions(&ckpt, trial)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|(end, s)| (end as u64, s.map(f64::to_bits)))
                .collect();
            ensure!(!offline.is_empty(), "{variant}: no windows");
            let mut paths = vec![false];
            if variant.uses_vision() {
                paths.push(true);
            }
            for raw in paths {
                let streamed = stream(&ckpt, stream_messages(&ckpt, trial, frames, raw)?)?;
                let got: Vec<(u64, [u64; 6])> = streamed.iter().map(|(t, s, _)| (*t, *s)).collect();
                ensure!(
                    got == offline,
                    "{variant} on {} differs from offline (raw frames: {raw})",
                    trial.meta.trial_id
                );
                compared += got.len();
                // Raw frames include the per-frame encoder in the measured time.
                if raw || !variant.uses_vision() {
                    latencies.extend(streamed.iter().map(|(_, _, d)| *d));
                }
            }
        }
        latencies.sort_unstable();
        let median = latencies[latencies.len() / 2];
        ensure!(
            median < Duration::from_millis(33),
            "{variant} median latency {median:?}"
        );
        medians.push(format!("{variant} {:.2}", median.as_secs_f64() * 1e3));
    }
    Ok(format!(
        "{compared} predictions bit-identical over 10 trials; median ms: {}",
        medians.join(", ")
    ))
}

fn ac11() -> Outcome {
    let mut r = rng(11);
    let config = IngestConfig::default();
    for round in 0..20 {
        let rows = r.gen_range(1..200);
        let data = (0..rows * KIN_COLUMNS)
            .map(|_| r.gen_range(-10.0..10.0) * 10f64.powi(r.gen_range(-6..3)))
            .collect();
        let kin = KinematicSeries::from_flat(data, 30.0);
        let back = parse_kinematics(&write_kinematics(&kin), &config).map_err(|e| e.to_string())?;
        ensure!(back == kin, "kinematics round {round}");

        let mut start = 0;
        let segments: Vec<GestureSegment> = (0..r.gen_range(1..20))
            .map(|_| {
                let s = start + r.gen_range(0..5);
                let e = s + r.gen_range(0..100);
                start = e + 1;
                GestureSegment {
                    start_frame: s,
                    end_frame: e,
                    label: Gesture::new(r.gen_range(1..16)).unwrap(),
                }
            })
            .collect();
        let back =
            parse_transcription(&write_transcription(&segments)).map_err(|e| e.to_string())?;
        ensure!(back == segments, "transcription round {round}");

        let metas: Vec<TrialMeta> = (0..r.gen_range(1..30))
            .map(|i| TrialMeta {
                trial_id: format!("Suturing_X{i:03}"),
                subject_id: format!("X{}", i % 4),
                repetition: i as u32 + 1,
                skill_class: [SkillClass::N, SkillClass::I, SkillClass::E][i % 3],
                osats: [0; 6].map(|_: u8| r.gen_range(1..=5)),
            })
            .collect();
        ensure!(
            parse_meta(&write_meta(&metas)).map_err(|e| e.to_string())? == metas,
            "meta round {round}"
        );

        let (n, h, w, c) = (
            r.gen_range(1..5),
            r.gen_range(1..9),
            r.gen_range(1..9),
            r.gen_range(1..4),
        );
        let frames = FrameSeries {
            n_frames: n,
            height: h,
            width: w,
            channels: c,
            data: (0..n * h * w * c).map(|_| r.gen::<f32>()).collect(),
        };
        ensure!(
            read_sfrm(&write_sfrm(&frames)).map_err(|e| e.to_string())? == frames,
            "sfrm round {round}"
        );
    }

    let (registry, records) = generate(&SynthConfig {
        n_subjects: 2,
        reps_per_subject: 2,
        frames: 80,
        frame_size: 8,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let trials = prepare_trials(&records, &ChannelLayout::default()).map_err(|e| e.to_string())?;
    let fold = louo_folds(&registry).map_err(|e| e.to_string())?.remove(0);
    let mut detected = 0;
    for variant in Variant::ALL {
        let ckpt = fit_fold(&common::small_experiment(variant, 1), &fold, &trials, None)
            .map_err(|e| e.to_string())?
            .checkpoint;
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            back.to_bytes() == bytes,
            "{variant} checkpoint bytes differ"
        );
        let bits = |m: &Model| {
            m.params
                .iter()
                .flat_map(|p| {
                    p.value
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<u64>>()
        };
        ensure!(
            bits(&back.model) == bits(&ckpt.model) && back.stats == ckpt.stats,
            "{variant} parameters differ"
        );
        let header_end = 4 + u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        for _ in 0..50 {
            let mut bad = bytes.clone();
            let at = r.gen_range(header_end..bytes.len());
            bad[at] ^= 1 << r.gen_range(0..8);
            match Checkpoint::from_bytes(&bad) {
                Err(CheckpointError::CorruptBlob(m)) if m == "checksum mismatch" => detected += 1,
                other => {
                    return Err(format!(
                        "{variant}: flip at {at} gave {:?}",
                        other.map(|_| ())
                    ))
                }
            }
        }
    }
    Ok(format!(
        "20 rounds of kinematics/transcription/meta/SFRM, 7 checkpoints exact, {detected}/350 flips caught by checksum"
    ))
}

fn ac12() -> Outcome {
    let (registry, records) = generate(&SynthConfig {
        n_subjects: 3,
        reps_per_subject: 2,
        frames: 160,
        frame_size: 8,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let trials = prepare_trials(&records, &ChannelLayout::default()).map_err(|e| e.to_string())?;
    let variants = [Variant::LstmK, Variant::CnnLstmV, Variant::DualLstmF];
    let mut results = Vec::new();
    for variant in variants {
        let mut cfg = common::small_experiment(variant, 2);
        cfg.scheme = Scheme::Louo;
        results.push(run_experiment(&cfg, &registry, &trials).map_err(|e| e.to_string())?);
    }
    let rows: Vec<(String, &EvalResult)> = variants
        .iter()
        .zip(&results)
        .map(|(v, r)| (v.name().to_string(), &r.eval))
        .collect();

    let table = per_dimension_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    ensure!(lines.len() == 4, "table has {} lines", lines.len());
    let header = lines[0];
    let mut starts = Vec::new();
    for name in OSATS_NAMES {
        let from = starts.last().map_or(0, |s: &usize| s + 1);
        let at = header[from..]
            .find(name)
            .ok_or(format!("missing column {name}"))?;
        starts.push(from + at);
    }
    let rest = header[starts[5] + OSATS_NAMES[5].len()..].trim();
    ensure!(
        header[..starts[0]].trim().is_empty() && rest.is_empty(),
        "unexpected header text"
    );
    for (line, (_, r)) in lines[1..].iter().zip(&rows) {
        for d in 0..6 {
            let end = starts.get(d + 1).copied().unwrap_or(line.len());
            let text = line
                .get(starts[d]..end.min(line.len()))
                .unwrap_or("")
                .trim();
            ensure!(is_pair_cell(text), "cell {text:?} is not a rho | rmse pair");
            ensure!(
                text.ends_with(&format!("{:.3}", r.dims[d].rmse)),
                "cell {text:?} disagrees with the result"
            );
        }
    }

    let agg = aggregate_table(
        &["LOUO".into()],
        &rows
            .iter()
            .map(|(l, r)| (l.clone(), vec![Some(*r)]))
            .collect::<Vec<_>>(),
    );
    for (line, (label, r)) in agg.lines().skip(1).zip(&rows) {
        let pair = pair_cell(r);
        ensure!(
            is_pair_cell(&pair)
                && line.starts_with(label.as_str())
                && line.trim_end().ends_with(&pair),
            "aggregate row {line:?}"
        );
    }

    let trial_id = &results[0].outputs[0].traces[0].trial_id;
    let traces: Vec<_> = results
        .iter()
        .map(|r| {
            r.outputs
                .iter()
                .flat_map(|o| &o.traces)
                .find(|t| &t.trial_id == trial_id)
                .cloned()
                .unwrap()
        })
        .collect();
    let record = records
        .iter()
        .find(|t| &t.meta.trial_id == trial_id)
        .unwrap();
    let dims = [1, 2, 3, 4, 5, 6];
    let svg = render_trace(&TraceFigure {
        traces: &traces,
        gestures: &record.gestures,
        dims: &dims,
        rate_hz: 30.0,
    })
    .map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&svg).map_err(|e| e.to_string())?;
    let panels: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("panel"))
        .collect();
    ensure!(panels.len() == 6, "{} panels", panels.len());
    let labels: Vec<String> = record
        .gestures
        .iter()
        .map(|g| g.label.to_string())
        .collect();
    ensure!(
        labels.len() > 1,
        "synthetic trial has {} gestures",
        labels.len()
    );
    for (p, d) in panels.iter().zip(dims) {
        let count = |class| {
            p.descendants()
                .filter(|n| n.attribute("class") == Some(class))
                .count()
        };
        let title = p
            .descendants()
            .find(|n| n.attribute("class") == Some("panel-title"))
            .and_then(|n| n.text());
        ensure!(
            title == Some(OSATS_NAMES[d - 1]),
            "panel {d} titled {title:?}"
        );
        ensure!(
            count("trace") == 3 && count("truth") == 1,
            "panel {d} lines"
        );
        let bands: Vec<&str> = p
            .descendants()
            .filter(|n| n.attribute("class") == Some("gesture-band"))
            .filter_map(|n| n.attribute("data-gesture"))
            .collect();
        ensure!(bands == labels, "panel {d} bands {bands:?}");
    }
    Ok(format!(
        "six criterion columns in order, rho | rmse cells, 6 panels with {} gesture bands and 3 model traces",
        labels.len()
    ))
}

/// Matches `0.123 | 0.456`, `-0.123* | 1.000` and `n/a | 0.456`.
fn is_pair_cell(s: &str) -> bool {
    let Some((rho, err)) = s.split_once(" | ") else {
        return false;
    };
    let rho = rho.strip_suffix('*').unwrap_or(rho);
    let three = |v: &str| {
        v.split_once('.').is_some_and(|(_, frac)| frac.len() == 3) && v.parse::<f64>().is_ok()
    };
    (rho == "n/a" || three(rho)) && three(err)
}
