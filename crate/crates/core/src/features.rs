//! Landmark series to normalized per-channel movement (delta) sequences.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    encode_meta, Dataset, GolferMeta, Label, LandmarkSeries, MetaEncoder, LANDMARKS_HEADER, N_CHANNELS,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSeries {
    pub video_id: String,
    /// One sequence per landmark channel, all of equal length.
    pub channels: Vec<Vec<f64>>,
    /// `gap_flags[t]` is set when delta `t` spans a frame-index gap.
    pub gap_flags: Vec<bool>,
    /// Frame index and timestamp of the later frame of each delta.
    pub frame_index: Vec<i64>,
    pub timestamp: Vec<f64>,
}

impl DeltaSeries {
    pub fn len(&self) -> usize {
        self.gap_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gap_flags.is_empty()
    }
}

/// Differences between consecutive retained frames. Frames on either side of
/// a detection gap are treated as adjacent.
pub fn compute_deltas(series: &LandmarkSeries) -> Result<DeltaSeries> {
    if series.frames.len() < 2 {
        return Err(Error::Video {
            video_id: series.video_id.clone(),
            msg: format!("need at least 2 frames, found {}", series.frames.len()),
        });
    }
    let pairs = || series.frames.windows(2);
    let channels = (0..N_CHANNELS)
        .map(|c| pairs().map(|w| w[1].channels[c] - w[0].channels[c]).collect())
        .collect();
    Ok(DeltaSeries {
        video_id: series.video_id.clone(),
        channels,
        gap_flags: pairs().map(|w| w[1].frame_index - w[0].frame_index > 1).collect(),
        frame_index: pairs().map(|w| w[1].frame_index).collect(),
        timestamp: pairs().map(|w| w[1].timestamp).collect(),
    })
}

/// Scales each channel by its own maximum absolute delta. All-zero channels
/// stay zero.
pub fn normalize_deltas(mut raw: DeltaSeries) -> DeltaSeries {
    for ch in &mut raw.channels {
        let max = ch.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if max > 0.0 {
            ch.iter_mut().for_each(|d| *d /= max);
        }
    }
    raw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub video_id: String,
    pub deltas: DeltaSeries,
    pub meta_vec: Vec<f64>,
    pub label: Label,
}

pub fn build_sample(
    series: &LandmarkSeries,
    meta: Option<&GolferMeta>,
    encoder: &MetaEncoder,
    label: Option<Label>,
) -> Result<FeatureSample> {
    let missing = |what: &str| Error::Video {
        video_id: series.video_id.clone(),
        msg: format!("missing {what}"),
    };
    let meta = meta.ok_or_else(|| missing("meta-data"))?;
    let label = label.ok_or_else(|| missing("label"))?;
    if meta.video_id != series.video_id {
        return Err(Error::Video {
            video_id: series.video_id.clone(),
            msg: format!("meta-data belongs to `{}`", meta.video_id),
        });
    }
    Ok(FeatureSample {
        video_id: series.video_id.clone(),
        deltas: normalize_deltas(compute_deltas(series)?),
        meta_vec: encode_meta(meta, encoder),
        label,
    })
}

pub fn build_samples(dataset: &Dataset, encoder: &MetaEncoder, policy: ExecPolicy) -> Result<Vec<FeatureSample>> {
    exec::try_map(policy, &dataset.records, |r| {
        build_sample(&r.series, Some(&r.meta), encoder, Some(r.label))
    })
}

/// Debug dump of normalized deltas in the landmarks CSV layout; each row is
/// stamped with the later frame of its delta.
pub fn write_deltas_csv(path: &Path, samples: &[FeatureSample]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(LANDMARKS_HEADER).map_err(io)?;
    for s in samples {
        let d = &s.deltas;
        for t in 0..d.len() {
            let mut row = vec![
                s.video_id.clone(),
                d.frame_index[t].to_string(),
                d.timestamp[t].to_string(),
            ];
            row.extend(d.channels.iter().map(|ch| ch[t].to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
