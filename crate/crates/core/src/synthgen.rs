//! Synthetic interviews with a planted, per-modality signal.
//!
//! Each video gets a label and, independently per modality, an "effective
//! class" that equals the label with probability `p_face` / `p_meta`. The
//! facial effective class sets the oscillation amplitude of the four eyeline
//! channels; the meta effective class shifts the mean previous-tournament
//! rank. Everything else is label-independent nuisance.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    derive_label, write_landmarks, write_metadata, write_scores, Dataset, Frame, GolferMeta, Label, LandmarkSeries,
    Record, ScoreRecord, N_CHANNELS,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::training::derive_seed;

pub const FRAME_INTERVAL_S: f64 = 0.25;

const NATIONALITIES: [&str; 18] = [
    "USA", "KOR", "JPN", "AUS", "ENG", "FRA", "SWE", "CHN", "THA", "CAN", "ESP", "NZL", "TPE", "GER", "MEX", "NOR",
    "PHI", "SCO",
];

/// Horizontal offsets of the channels from the face center, in face widths.
const CHANNEL_OFFSETS: [f64; N_CHANNELS] = [-0.22, -0.22, 0.22, 0.22, -0.25, 0.25, 0.0, 0.18];
const FACE_WIDTH_PX: f64 = 140.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Fraction of label-1 videos.
    pub class_balance: f64,
    pub frames: usize,
    pub p_face: f64,
    pub p_meta: f64,
    /// Per-frame landmark jitter, in pixels at unit face scale.
    pub noise_sigma: f64,
    pub seed: u64,
    pub nationality_pool: usize,
    pub n_golfers: usize,
    /// Probability that a frame after the first is lost to a detection failure.
    pub missing_frame_rate: f64,
    /// Eyeline oscillation amplitude (pixels) for facial effective class 0 and 1.
    pub eyeline_amplitude: [f64; 2],
    /// Mean previous-tournament rank for meta effective class 0 and 1.
    pub rank_mean: [f64; 2],
    pub rank_sd: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 213,
            class_balance: 0.15,
            frames: 100,
            p_face: 0.65,
            p_meta: 0.65,
            noise_sigma: 0.6,
            seed: 42,
            nationality_pool: 18,
            n_golfers: 74,
            missing_frame_rate: 0.02,
            eyeline_amplitude: [0.3, 2.0],
            rank_mean: [25.0, 65.0],
            rank_sd: 20.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples < 10 {
            return bad(format!("n_samples must be >= 10, got {}", self.n_samples));
        }
        for (name, p) in [("p_face", self.p_face), ("p_meta", self.p_meta)] {
            if !(0.5..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0.5, 1], got {p}"));
            }
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return bad(format!("class_balance must be in (0, 1), got {}", self.class_balance));
        }
        if self.frames < 2 {
            return bad("frames must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.missing_frame_rate) {
            return bad("missing_frame_rate must be in [0, 1)".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) || self.rank_sd.is_nan() || self.rank_sd <= 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.nationality_pool == 0 || self.nationality_pool > NATIONALITIES.len() || self.n_golfers == 0 {
            return bad(format!(
                "nationality_pool must be in 1..={} and n_golfers >= 1",
                NATIONALITIES.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub series: Vec<LandmarkSeries>,
    pub metas: Vec<GolferMeta>,
    pub scores: Vec<ScoreRecord>,
    pub labels: Vec<Label>,
    /// Facial and meta effective classes per video.
    pub effective: Vec<(Label, Label)>,
}

impl SynthData {
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            records: self
                .series
                .iter()
                .zip(&self.metas)
                .zip(&self.labels)
                .map(|((s, m), &l)| Record {
                    series: s.clone(),
                    meta: m.clone(),
                    label: l,
                })
                .collect(),
        }
    }
}

struct Golfer {
    id: String,
    age: f64,
    debut_age: f64,
    height: f64,
    nationality: &'static str,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (x * k).round() / k
}

/// Always consumes one draw, so changing `p` only changes which videos flip.
fn agree(label: Label, p: f64, rng: &mut ChaCha8Rng) -> Label {
    if rng.random::<f64>() < p {
        label
    } else {
        Label::new(1 - label.value()).expect("binary")
    }
}

fn golfers(spec: &SynthSpec) -> Vec<Golfer> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xA11]));
    let age = Normal::new(24.0, 4.0).expect("valid");
    let height = Normal::new(168.0, 6.0).expect("valid");
    // skewed towards the first few nationalities
    let weights: Vec<f64> = (0..spec.nationality_pool).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let total: f64 = weights.iter().sum();
    (0..spec.n_golfers)
        .map(|g| {
            let mut u = rng.random::<f64>() * total;
            let mut nat = spec.nationality_pool - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    nat = i;
                    break;
                }
                u -= w;
            }
            let a: f64 = age.sample(&mut rng);
            Golfer {
                id: format!("g{g:03}"),
                age: a.clamp(17.0, 42.0),
                debut_age: rng.random_range(16.0..20.0),
                height: height.sample(&mut rng),
                nationality: NATIONALITIES[nat],
            }
        })
        .collect()
}

fn landmarks(spec: &SynthSpec, video_id: &str, face_class: Label, rng: &mut ChaCha8Rng) -> LandmarkSeries {
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let scale = rng.random_range(0.7..1.3);
    let center = rng.random_range(250.0..400.0);
    let amp = spec.eyeline_amplitude[face_class.index()] * scale;
    let noise = spec.noise_sigma * scale;

    // shared head sway: integrated AR(1) velocity
    let mut sway = vec![0.0; spec.frames];
    let mut vel = 0.0;
    for t in 1..spec.frames {
        vel = 0.8 * vel + 0.3 * unit.sample(rng);
        sway[t] = sway[t - 1] + vel;
    }

    let mut channels = vec![vec![0.0; spec.frames]; N_CHANNELS];
    for (c, ch) in channels.iter_mut().enumerate() {
        let base = center + CHANNEL_OFFSETS[c] * FACE_WIDTH_PX * scale;
        let eyeline = c < 4;
        let period = rng.random_range(2.5..4.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut drift = 0.0;
        for (t, x) in ch.iter_mut().enumerate() {
            drift = 0.9 * drift + 0.2 * scale * unit.sample(rng);
            let osc = if eyeline {
                amp * (2.0 * PI * t as f64 / period + phase).sin()
            } else {
                0.0
            };
            *x = base + scale * sway[t] + drift + osc + noise * unit.sample(rng);
        }
    }

    let frames = (0..spec.frames)
        .filter(|&t| t == 0 || !rng.random_bool(spec.missing_frame_rate))
        .map(|t| Frame {
            frame_index: t as i64,
            timestamp: t as f64 * FRAME_INTERVAL_S,
            channels: std::array::from_fn(|c| round_to(channels[c][t], 3)),
        })
        .collect::<Vec<_>>();
    let mut frames = frames;
    if frames.len() < 2 {
        frames.push(Frame {
            frame_index: 1,
            timestamp: FRAME_INTERVAL_S,
            channels: std::array::from_fn(|c| round_to(channels[c][1], 3)),
        });
    }
    LandmarkSeries {
        video_id: video_id.to_owned(),
        frames,
    }
}

/// Scores whose field-relative ratios reproduce `label` under [`derive_label`].
fn scores(video_id: &str, label: Label, rng: &mut ChaCha8Rng) -> ScoreRecord {
    loop {
        let strokes_day = f64::from(rng.random_range(66u8..=78));
        let field_avg_day = round_to(rng.random_range(70.5..74.0), 2);
        let strokes_next = f64::from(rng.random_range(66u8..=78));
        let r_day = strokes_day / field_avg_day;
        let margin = rng.random_range(0.003..0.04);
        let target = if label == Label::POSITIVE {
            strokes_next / r_day * (1.0 - margin)
        } else {
            strokes_next / r_day * (1.0 + margin)
        };
        let rec = ScoreRecord {
            video_id: video_id.to_owned(),
            strokes_day,
            field_avg_day,
            strokes_next,
            field_avg_next: round_to(target, 2),
        };
        if derive_label(&rec).ok() == Some(label) {
            return rec;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    generate_with(spec, ExecPolicy::default())
}

/// Each video draws from its own generator seeded from `(seed, index)`, so
/// output does not depend on the execution policy.
pub fn generate_with(spec: &SynthSpec, policy: ExecPolicy) -> Result<SynthData> {
    spec.validate()?;
    let pool = golfers(spec);
    let rank_noise = Normal::new(0.0, spec.rank_sd).expect("validated");
    let videos = exec::map_range(policy, spec.n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xF00D, i as u64]));
        let video_id = format!("vid{i:04}");
        let label = if rng.random_bool(spec.class_balance) {
            Label::POSITIVE
        } else {
            Label::NEGATIVE
        };
        let face_class = agree(label, spec.p_face, &mut rng);
        let meta_class = agree(label, spec.p_meta, &mut rng);
        let golfer = &pool[rng.random_range(0..pool.len())];
        let years_later = rng.random_range(0.0..5.0);
        let rank = (spec.rank_mean[meta_class.index()] + rank_noise.sample(&mut rng))
            .round()
            .clamp(1.0, 150.0) as u32;
        let age = round_to(golfer.age + years_later, 1);
        let meta = GolferMeta {
            video_id: video_id.clone(),
            golfer_id: golfer.id.clone(),
            age,
            career_length: round_to((age - golfer.debut_age).max(0.0), 1),
            height: round_to(golfer.height, 1),
            prev_rank: rank,
            nationality: golfer.nationality.to_owned(),
        };
        let series = landmarks(spec, &video_id, face_class, &mut rng);
        let score = scores(&video_id, label, &mut rng);
        (series, meta, score, label, (face_class, meta_class))
    });
    let mut out = SynthData {
        series: Vec::with_capacity(spec.n_samples),
        metas: Vec::with_capacity(spec.n_samples),
        scores: Vec::with_capacity(spec.n_samples),
        labels: Vec::with_capacity(spec.n_samples),
        effective: Vec::with_capacity(spec.n_samples),
    };
    for (s, m, sc, l, e) in videos {
        out.series.push(s);
        out.metas.push(m);
        out.scores.push(sc);
        out.labels.push(l);
        out.effective.push(e);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub n_videos: usize,
    pub class_counts: [usize; 2],
    pub files: Vec<String>,
}

pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the three input CSVs and a manifest into `dir`.
pub fn write_bundle(dir: &Path, spec: &SynthSpec, data: &SynthData) -> Result<SynthManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_landmarks(&dir.join(LANDMARKS_FILE), &data.series)?;
    write_metadata(&dir.join(METADATA_FILE), &data.metas)?;
    write_scores(&dir.join(SCORES_FILE), &data.scores)?;
    let manifest = SynthManifest {
        spec: spec.clone(),
        n_videos: data.labels.len(),
        class_counts: crate::dataset::class_counts(&data.labels),
        files: vec![LANDMARKS_FILE.into(), METADATA_FILE.into(), SCORES_FILE.into()],
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
