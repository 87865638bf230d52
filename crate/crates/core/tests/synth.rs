use std::collections::BTreeMap;
use std::path::Path;

use osats_core::features::{per_frame_channels, ChannelLayout};
use osats_core::ingest::{rotation_warnings, DatasetLayout, IngestConfig};
use osats_core::metrics::spearman_rho;
use osats_core::synth::{gen_dataset, gen_trial, generate, latent, SynthConfig};

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small() -> SynthConfig {
    SynthConfig {
        n_subjects: 3,
        reps_per_subject: 2,
        frames: 90,
        frame_size: 8,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&small(), a.path()).unwrap();
    gen_dataset(&small(), b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 1 + 3 * 6);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    gen_dataset(&SynthConfig { seed: 1, ..small() }, c.path()).unwrap();
    assert_ne!(read_tree(c.path()), ta);
}

#[test]
fn full_grid_parses_back_cleanly() {
    let cfg = SynthConfig {
        frames: 60,
        frame_size: 8,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let registry = gen_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(registry.len(), 40);
    let (parsed, trials) = DatasetLayout::new(dir.path())
        .load_all(&IngestConfig::default())
        .unwrap();
    assert_eq!(parsed, registry);
    assert_eq!(trials.len(), 40);
    let (_, generated) = generate(&cfg).unwrap();
    for (t, g) in trials.iter().zip(&generated) {
        assert!(rotation_warnings(&t.kin, IngestConfig::default().rotation_tolerance).is_empty());
        assert_eq!(t.kin, g.kin);
        assert_eq!(t.gestures, g.gestures);
        assert_eq!(t.frames, g.frames);
        assert!(t.kin.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn motion_channels_fall_with_skill() {
    let skills = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let cfg = SynthConfig {
        n_subjects: 5,
        reps_per_subject: 3,
        skills: Some(skills),
        learning_gain: 0.0,
        video: false,
        ..SynthConfig::default()
    };
    let layout = ChannelLayout::default();
    let mut means = vec![[0.0; 3]; 5];
    for (s, m) in means.iter_mut().enumerate() {
        for rep in 1..=3 {
            let ch = per_frame_channels(&gen_trial(&cfg, s, rep).unwrap().kin, &layout).unwrap();
            for (k, c) in [2, 3, 4].into_iter().enumerate() {
                m[k] += (0..ch.rows()).map(|r| ch.get(r, c).abs()).sum::<f64>()
                    / ch.rows() as f64
                    / 3.0;
            }
        }
    }
    for k in 0..3 {
        for s in 1..5 {
            assert!(
                means[s][k] < means[s - 1][k],
                "channel {}: {:?}",
                k + 2,
                means
            );
        }
    }
}

#[test]
fn gamma_routes_skill_between_modalities() {
    let cfg = SynthConfig::default();
    let lat: Vec<_> = (0..8)
        .flat_map(|s| (1..=5).map(move |r| (s, r)))
        .map(|(s, r)| latent(&cfg, s, r))
        .collect();
    let skill: Vec<f64> = lat.iter().map(|l| l.skill).collect();
    let kin: Vec<f64> = lat.iter().map(|l| l.kin).collect();
    let vis: Vec<f64> = lat.iter().map(|l| l.vis).collect();
    assert_eq!(kin, skill);
    assert!(spearman_rho(&vis, &skill).unwrap().abs() < 0.4);

    let vision_only = SynthConfig { gamma: 0.0, ..cfg };
    for s in 0..8 {
        let l = latent(&vision_only, s, 2);
        assert_eq!(l.vis, l.skill);
    }
}

#[test]
fn labels_follow_latent_skill() {
    let cfg = SynthConfig::default();
    let (registry, _) = generate(&SynthConfig {
        frames: 20,
        video: false,
        ..cfg.clone()
    })
    .unwrap();
    let mean_label: Vec<f64> = registry
        .iter()
        .map(|m| m.osats.iter().map(|&v| f64::from(v)).sum::<f64>() / 6.0)
        .collect();
    let skill: Vec<f64> = (0..8)
        .flat_map(|s| (1..=5).map(move |r| (s, r)))
        .map(|(s, r)| cfg.trial_skill(s, r))
        .collect();
    assert!(spearman_rho(&mean_label, &skill).unwrap() > 0.9);
}
