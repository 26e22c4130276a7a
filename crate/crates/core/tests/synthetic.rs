mod common;

use std::sync::OnceLock;

use common::{binomial_interval, chance_f1, median};
use landmark_fusion::dataset::{class_counts, parse_landmarks};
use landmark_fusion::evaluation::{ablate_prepared, EvalReport};
use landmark_fusion::model::Mode;
use landmark_fusion::pipeline::{PrepareSettings, Prepared};
use landmark_fusion::synthgen::{generate, generate_with, write_bundle, SynthSpec, LANDMARKS_FILE};
use landmark_fusion::training::TrainConfig;
use landmark_fusion::ExecPolicy;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn label_frequency_within_binomial_bounds() {
    for (i, balance) in [0.1, 0.15, 0.3, 0.5, 0.8].into_iter().enumerate() {
        for seed in 0..4 {
            let spec = SynthSpec {
                n_samples: 400,
                frames: 3,
                class_balance: balance,
                seed: 100 * i as u64 + seed,
                ..SynthSpec::default()
            };
            let d = generate(&spec).unwrap();
            let k = class_counts(&d.labels)[1] as u64;
            let (lo, hi) = binomial_interval(400, balance, 0.99);
            assert!(
                (lo..=hi).contains(&k),
                "balance {balance} seed {seed}: {k} not in [{lo}, {hi}]"
            );
        }
    }
}

#[test]
fn landmark_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_samples: 30,
        frames: 100,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let manifest = write_bundle(dir.path(), &spec, &data).unwrap();
    assert_eq!(manifest.n_videos, 30);
    let parsed = parse_landmarks(&dir.path().join(LANDMARKS_FILE)).unwrap();
    assert_eq!(parsed.truncated, 0);
    assert_eq!(parsed.series, data.series);

    let long = SynthSpec { frames: 120, ..spec };
    let data = generate(&long).unwrap();
    write_bundle(dir.path(), &long, &data).unwrap();
    let parsed = parse_landmarks(&dir.path().join(LANDMARKS_FILE)).unwrap();
    assert_eq!(parsed.truncated, 30);
    assert!(parsed.series.iter().all(|s| s.frames.len() == 100));
}

#[test]
fn bundle_bytes_are_reproducible() {
    let spec = SynthSpec {
        n_samples: 25,
        frames: 20,
        seed: 9,
        ..SynthSpec::default()
    };
    let read_all = |dir: &std::path::Path| -> Vec<Vec<u8>> {
        let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        names.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_bundle(a.path(), &spec, &generate_with(&spec, ExecPolicy::Sequential).unwrap()).unwrap();
    write_bundle(b.path(), &spec, &generate_with(&spec, ExecPolicy::Parallel).unwrap()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

struct Sweep {
    /// Test reports per seed: facial_only at p_face 0.5, 0.75 and 1.0.
    facial: [Vec<EvalReport>; 3],
    /// meta_only with uninformative meta-data.
    meta: Vec<EvalReport>,
    /// merged with both modalities uninformative.
    merged: Vec<EvalReport>,
    /// meta_only with fully informative meta-data and uninformative faces.
    meta_informed: Vec<EvalReport>,
}

/// Ablation runs shared by the tests below. Meta-data, labels and splits do
/// not depend on `p_face`, so the uninformative-meta runs serve both the
/// chance-level check and the facial-versus-meta comparison.
fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut s = Sweep {
            facial: [vec![], vec![], vec![]],
            meta: vec![],
            merged: vec![],
            meta_informed: vec![],
        };
        for seed in SEEDS {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let prep = PrepareSettings {
                seed,
                ..PrepareSettings::default()
            };
            for (i, p_face) in [0.5, 0.75, 1.0].into_iter().enumerate() {
                let spec = SynthSpec {
                    seed,
                    p_face,
                    p_meta: 0.5,
                    ..SynthSpec::default()
                };
                let data = Prepared::new(&generate(&spec).unwrap().to_dataset(), &prep, cfg.exec).unwrap();
                let modes: &[Mode] = if i == 0 { &Mode::ALL } else { &[Mode::FacialOnly] };
                let r = ablate_prepared(&data, &cfg, modes).unwrap();
                s.facial[i].push(r.get(Mode::FacialOnly).unwrap().test.clone());
                if i == 0 {
                    s.meta.push(r.get(Mode::MetaOnly).unwrap().test.clone());
                    s.merged.push(r.get(Mode::Merged).unwrap().test.clone());
                }
            }
            // facial inputs are unchanged by p_meta, so only meta_only is rerun
            let spec = SynthSpec {
                seed,
                p_face: 0.5,
                p_meta: 1.0,
                ..SynthSpec::default()
            };
            let data = Prepared::new(&generate(&spec).unwrap().to_dataset(), &prep, cfg.exec).unwrap();
            let r = ablate_prepared(&data, &cfg, &[Mode::MetaOnly]).unwrap();
            s.meta_informed.push(r.get(Mode::MetaOnly).unwrap().test.clone());
        }
        s
    })
}

fn f1s(reports: &[EvalReport]) -> Vec<f64> {
    reports.iter().map(|r| r.f1[1]).collect()
}

#[test]
fn uninformative_modalities_score_at_chance() {
    let s = sweep();
    let mut diffs = Vec::new();
    for r in s.facial[0].iter().chain(&s.meta).chain(&s.merged) {
        let k = r.tp + r.fn_;
        let q = (r.tp + r.fp) as f64 / r.n as f64;
        diffs.push(r.f1[1] - chance_f1(r.n, k, q));
    }
    let m = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let se = sd / m.sqrt();
    assert!(
        mean.abs() <= 3.0 * se,
        "mean excess over chance {mean:.4} (se {se:.4}) {diffs:?}"
    );
}

#[test]
fn informative_face_beats_uninformative_meta() {
    let s = sweep();
    let face = median(&f1s(&s.facial[2]));
    let meta = median(&f1s(&s.meta));
    assert!(face > meta, "facial {face:.4} vs meta {meta:.4}");
}

#[test]
fn informative_meta_at_least_matches_uninformative_face() {
    let s = sweep();
    let meta = median(&f1s(&s.meta_informed));
    let face = median(&f1s(&s.facial[0]));
    assert!(meta >= face, "meta {meta:.4} vs facial {face:.4}");
}

#[test]
fn facial_f1_monotone_in_face_agreement() {
    let s = sweep();
    let m: Vec<f64> = s.facial.iter().map(|r| median(&f1s(r))).collect();
    assert!(m[0] <= m[1] && m[1] <= m[2], "medians {m:?}");
}

#[test]
fn default_spec_has_both_labels() {
    let spec = SynthSpec::default();
    let d = generate(&spec).unwrap();
    let c = class_counts(&d.labels);
    assert!(c[0] > 0 && c[1] > 0);
}
