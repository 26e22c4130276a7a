//! Input files, labels, meta-data encoding and train/test partitioning.
//!
//! Three CSV contracts feed the pipeline: per-frame landmark x-coordinates,
//! per-video golfer meta-data, and per-video scores (or pre-derived labels).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CHANNELS: usize = 8;
pub const MAX_FRAMES: usize = 100;
pub const N_NUMERIC_META: usize = 4;

pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "left_upper_eyeline",
    "left_lower_eyeline",
    "right_upper_eyeline",
    "right_lower_eyeline",
    "left_eyebrow",
    "right_eyebrow",
    "mid_of_lip",
    "right_end_of_lip",
];

pub const LANDMARKS_HEADER: [&str; 3 + N_CHANNELS] = [
    "video_id",
    "frame_index",
    "timestamp_s",
    "left_upper_eyeline",
    "left_lower_eyeline",
    "right_upper_eyeline",
    "right_lower_eyeline",
    "left_eyebrow",
    "right_eyebrow",
    "mid_of_lip",
    "right_end_of_lip",
];

pub const METADATA_HEADER: [&str; 7] = [
    "video_id",
    "golfer_id",
    "age",
    "career_years",
    "height_cm",
    "prev_rank",
    "nationality",
];

pub const SCORES_HEADER: [&str; 5] = [
    "video_id",
    "strokes_day",
    "field_avg_day",
    "strokes_next",
    "field_avg_next",
];

pub const LABELS_HEADER: [&str; 2] = ["video_id", "label"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_index: i64,
    pub timestamp: f64,
    pub channels: [f64; N_CHANNELS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSeries {
    pub video_id: String,
    pub frames: Vec<Frame>,
}

impl LandmarkSeries {
    /// Sorts frames, checks the series invariants and truncates to
    /// [`MAX_FRAMES`]. Returns whether truncation happened.
    pub fn normalize(&mut self) -> Result<bool> {
        self.frames.sort_by_key(|f| f.frame_index);
        for w in self.frames.windows(2) {
            if w[0].frame_index == w[1].frame_index {
                return Err(Error::DuplicateFrame {
                    video_id: self.video_id.clone(),
                    frame_index: w[0].frame_index,
                });
            }
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::Video {
                    video_id: self.video_id.clone(),
                    msg: format!(
                        "timestamp decreases between frames {} and {}",
                        w[0].frame_index, w[1].frame_index
                    ),
                });
            }
        }
        if let Some(f) = self
            .frames
            .iter()
            .find(|f| !f.timestamp.is_finite() || f.channels.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Video {
                video_id: self.video_id.clone(),
                msg: format!("non-finite value in frame {}", f.frame_index),
            });
        }
        let truncated = self.frames.len() > MAX_FRAMES;
        self.frames.truncate(MAX_FRAMES);
        Ok(truncated)
    }

    /// Number of frame-index gaps (missing detections) between retained frames.
    pub fn missing_frames(&self) -> usize {
        self.frames
            .windows(2)
            .map(|w| (w[1].frame_index - w[0].frame_index - 1).max(0) as usize)
            .sum()
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().map(move |f| f.channels[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GolferMeta {
    pub video_id: String,
    pub golfer_id: String,
    pub age: f64,
    pub career_length: f64,
    pub height: f64,
    pub prev_rank: u32,
    pub nationality: String,
}

impl GolferMeta {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Video {
                video_id: self.video_id.clone(),
                msg: format!("invalid meta-data: {what}"),
            })
        };
        if !(self.age.is_finite() && self.age > 0.0) {
            return bad("age must be > 0");
        }
        if !(self.career_length.is_finite() && self.career_length >= 0.0) {
            return bad("career length must be >= 0");
        }
        if !(self.height.is_finite() && self.height > 0.0) {
            return bad("height must be > 0");
        }
        if self.prev_rank < 1 {
            return bad("previous rank must be >= 1");
        }
        Ok(())
    }

    fn numeric(&self) -> [f64; N_NUMERIC_META] {
        [self.age, self.career_length, self.height, f64::from(self.prev_rank)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub strokes_day: f64,
    pub field_avg_day: f64,
    pub strokes_next: f64,
    pub field_avg_next: f64,
}

/// Binary outcome: 1 when the next round's field-relative stroke ratio did
/// not decrease relative to the interview day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Label(u8);

impl Label {
    pub const NEGATIVE: Label = Label(0);
    pub const POSITIVE: Label = Label(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(Label(value)),
            v => Err(Error::Domain(format!("label must be 0 or 1, got {v}"))),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Label::new(v)
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.0
    }
}

pub fn derive_label(record: &ScoreRecord) -> Result<Label> {
    let fields = [
        record.strokes_day,
        record.field_avg_day,
        record.strokes_next,
        record.field_avg_next,
    ];
    if fields.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain(format!(
            "score fields for `{}` must be positive and finite",
            record.video_id
        )));
    }
    let r_day = record.strokes_day / record.field_avg_day;
    let r_next = record.strokes_next / record.field_avg_next;
    // ties count as 1
    Ok(if r_next >= r_day {
        Label::POSITIVE
    } else {
        Label::NEGATIVE
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NationalityVocab {
    codes: Vec<String>,
}

impl NationalityVocab {
    /// Distinct codes in first-seen order; the unknown slot follows them.
    pub fn build<'a>(codes: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = HashSet::new();
        let codes = codes
            .into_iter()
            .filter(|c| seen.insert(*c))
            .map(str::to_owned)
            .collect();
        NationalityVocab { codes }
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    /// Number of one-hot slots, including the unknown slot.
    pub fn len(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unknown_index(&self) -> usize {
        self.codes.len()
    }

    pub fn index_of(&self, code: &str) -> usize {
        self.codes
            .iter()
            .position(|c| c == code)
            .unwrap_or(self.unknown_index())
    }
}

pub fn build_vocab(metas: &[GolferMeta]) -> NationalityVocab {
    NationalityVocab::build(metas.iter().map(|m| m.nationality.as_str()))
}

/// Vocabulary plus z-score statistics of the numeric meta fields, fitted on
/// the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEncoder {
    pub vocab: NationalityVocab,
    pub mean: [f64; N_NUMERIC_META],
    pub std: [f64; N_NUMERIC_META],
}

impl MetaEncoder {
    pub fn fit(metas: &[GolferMeta]) -> Self {
        let vocab = build_vocab(metas);
        let mut mean = [0.0; N_NUMERIC_META];
        let mut std = [1.0; N_NUMERIC_META];
        if !metas.is_empty() {
            let n = metas.len() as f64;
            for m in metas {
                for (acc, v) in mean.iter_mut().zip(m.numeric()) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n);
            let mut var = [0.0; N_NUMERIC_META];
            for m in metas {
                for k in 0..N_NUMERIC_META {
                    var[k] += (m.numeric()[k] - mean[k]).powi(2);
                }
            }
            for k in 0..N_NUMERIC_META {
                let s = (var[k] / n).sqrt();
                // constant columns are centered but not scaled
                std[k] = if s > 0.0 { s } else { 1.0 };
            }
        }
        MetaEncoder { vocab, mean, std }
    }

    pub fn dim(&self) -> usize {
        N_NUMERIC_META + self.vocab.len()
    }
}

pub fn encode_meta(meta: &GolferMeta, encoder: &MetaEncoder) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoder.dim());
    for (k, v) in meta.numeric().into_iter().enumerate() {
        out.push((v - encoder.mean[k]) / encoder.std[k]);
    }
    let hot = encoder.vocab.index_of(&meta.nationality);
    out.extend((0..encoder.vocab.len()).map(|i| if i == hot { 1.0 } else { 0.0 }));
    out
}

/// Indices into the original sample list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn select<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>) {
        (
            self.train.iter().map(|&i| items[i].clone()).collect(),
            self.test.iter().map(|&i| items[i].clone()).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    Stratified,
    /// All videos of one golfer land on the same side.
    ByGolfer,
}

/// Per class, `round(n_c * test_fraction)` samples (clamped to `1..n_c`) go to
/// the test side. Both sides keep the original sample order.
pub fn stratified_split(labels: &[Label], test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    check_fraction(test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; labels.len()];
    for class in [Label::NEGATIVE, Label::POSITIVE] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::InsufficientClass {
                class: class.value(),
                count: idx.len(),
                needed: 2,
            });
        }
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    Ok(partition(&is_test))
}

/// Group-aware split: golfers are shuffled and moved to the test side until
/// it holds at least `round(n * test_fraction)` samples.
pub fn group_split(labels: &[Label], groups: &[&str], test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    check_fraction(test_fraction)?;
    if labels.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} group ids",
            labels.len(),
            groups.len()
        )));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Domain("group split needs at least two groups".into()));
    }
    let mut order: Vec<&str> = members.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = ((labels.len() as f64 * test_fraction).round() as usize).max(1);
    let mut is_test = vec![false; labels.len()];
    let mut n_test = 0;
    for g in &order[..order.len() - 1] {
        if n_test >= target {
            break;
        }
        for &i in &members[g] {
            is_test[i] = true;
            n_test += 1;
        }
    }
    Ok(partition(&is_test))
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("test fraction must be in (0, 1), got {f}")))
    }
}

fn partition(is_test: &[bool]) -> SplitIndices {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..is_test.len()).partition(|&i| is_test[i]);
    SplitIndices { train, test }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 2]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0, 1.0]);

    pub fn get(&self, label: Label) -> f64 {
        self.0[label.index()]
    }
}

pub fn class_counts(labels: &[Label]) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

/// Inverse-frequency weights `N / (2 N_c)`.
pub fn class_weights(labels: &[Label]) -> Result<ClassWeights> {
    let counts = class_counts(labels);
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InsufficientClass {
                class: c as u8,
                count: 0,
                needed: 1,
            });
        }
    }
    let total = labels.len() as f64;
    Ok(ClassWeights(counts.map(|n| total / (2.0 * n as f64))))
}

/// One video with every input the model needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub series: LandmarkSeries,
    pub meta: GolferMeta,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, strategy: SplitStrategy, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
        let labels = self.labels();
        match strategy {
            SplitStrategy::Stratified => stratified_split(&labels, test_fraction, seed),
            SplitStrategy::ByGolfer => {
                let groups: Vec<&str> = self.records.iter().map(|r| r.meta.golfer_id.as_str()).collect();
                group_split(&labels, &groups, test_fraction, seed)
            }
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let mut s = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut s))
            .map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

pub enum LabelSource {
    Scores(Vec<ScoreRecord>),
    Labels(Vec<(String, Label)>),
}

/// Joins the three inputs on `video_id`. Every landmark series must have a
/// meta row and a label; meta/label rows without landmarks are skipped and
/// counted (videos whose faces could not be extracted).
pub fn join(series: Vec<LandmarkSeries>, metas: Vec<GolferMeta>, labels: LabelSource) -> Result<(Dataset, usize)> {
    let label_map: HashMap<String, Label> = match labels {
        LabelSource::Scores(scores) => scores
            .iter()
            .map(|s| Ok((s.video_id.clone(), derive_label(s)?)))
            .collect::<Result<_>>()?,
        LabelSource::Labels(pairs) => pairs.into_iter().collect(),
    };
    let mut meta_map: HashMap<String, GolferMeta> = metas.into_iter().map(|m| (m.video_id.clone(), m)).collect();
    let mut records = Vec::with_capacity(series.len());
    for s in series {
        let meta = meta_map.remove(&s.video_id).ok_or_else(|| Error::Video {
            video_id: s.video_id.clone(),
            msg: "no metadata row".into(),
        })?;
        let label = *label_map.get(&s.video_id).ok_or_else(|| Error::Video {
            video_id: s.video_id.clone(),
            msg: "no score or label row".into(),
        })?;
        records.push(Record { series: s, meta, label });
    }
    let skipped = meta_map.len();
    Ok((Dataset { records }, skipped))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLandmarks {
    pub series: Vec<LandmarkSeries>,
    /// Series that had more than [`MAX_FRAMES`] frames.
    pub truncated: usize,
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let found = rdr.headers().map_err(|e| csv_err(path, &e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    Ok(rdr)
}

fn csv_err(path: &Path, e: &csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

/// Iterates data rows, checking the column count and handing each row with
/// its 1-based line number to `f`.
fn for_each_row(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(&csv::StringRecord, &RowCtx) -> Result<()>,
) -> Result<()> {
    let mut rdr = open_csv(path, header)?;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let ctx = RowCtx { path, line };
        if row.len() != header.len() {
            return Err(ctx.err(format!("expected {} columns, found {}", header.len(), row.len())));
        }
        f(&row, &ctx)?;
    }
    Ok(())
}

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.path.into(),
            line: self.line,
            msg,
        }
    }

    fn num<T: std::str::FromStr>(&self, row: &csv::StringRecord, col: usize, name: &str) -> Result<T> {
        row[col]
            .parse()
            .map_err(|_| self.err(format!("column `{name}`: cannot parse `{}`", &row[col])))
    }

    fn finite(&self, row: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
        let v: f64 = self.num(row, col, name)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("column `{name}`: non-finite value `{}`", &row[col])))
        }
    }
}

pub fn parse_landmarks(path: &Path) -> Result<ParsedLandmarks> {
    let mut order: Vec<String> = Vec::new();
    let mut by_video: HashMap<String, (LandmarkSeries, HashSet<i64>)> = HashMap::new();
    for_each_row(path, &LANDMARKS_HEADER, |row, ctx| {
        let video_id = row[0].to_owned();
        let frame_index: i64 = ctx.num(row, 1, "frame_index")?;
        let timestamp = ctx.finite(row, 2, "timestamp_s")?;
        let mut channels = [0.0; N_CHANNELS];
        for (c, v) in channels.iter_mut().enumerate() {
            *v = ctx.finite(row, 3 + c, CHANNEL_NAMES[c])?;
        }
        let entry = by_video.entry(video_id.clone()).or_insert_with(|| {
            order.push(video_id.clone());
            (
                LandmarkSeries {
                    video_id: video_id.clone(),
                    frames: Vec::new(),
                },
                HashSet::new(),
            )
        });
        if !entry.1.insert(frame_index) {
            return Err(ctx.err(format!("duplicate frame {frame_index} for video `{video_id}`")));
        }
        entry.0.frames.push(Frame {
            frame_index,
            timestamp,
            channels,
        });
        Ok(())
    })?;
    let mut out = ParsedLandmarks::default();
    for id in order {
        let (mut s, _) = by_video.remove(&id).expect("video recorded in order");
        if s.normalize()? {
            out.truncated += 1;
        }
        out.series.push(s);
    }
    Ok(out)
}

pub fn parse_metadata(path: &Path) -> Result<Vec<GolferMeta>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_row(path, &METADATA_HEADER, |row, ctx| {
        let meta = GolferMeta {
            video_id: row[0].to_owned(),
            golfer_id: row[1].to_owned(),
            age: ctx.finite(row, 2, "age")?,
            career_length: ctx.finite(row, 3, "career_years")?,
            height: ctx.finite(row, 4, "height_cm")?,
            prev_rank: ctx.num(row, 5, "prev_rank")?,
            nationality: row[6].to_owned(),
        };
        meta.validate().map_err(|e| ctx.err(e.to_string()))?;
        if !seen.insert(meta.video_id.clone()) {
            return Err(ctx.err(format!("duplicate video `{}`", meta.video_id)));
        }
        out.push(meta);
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for_each_row(path, &SCORES_HEADER, |row, ctx| {
        let rec = ScoreRecord {
            video_id: row[0].to_owned(),
            strokes_day: ctx.finite(row, 1, "strokes_day")?,
            field_avg_day: ctx.finite(row, 2, "field_avg_day")?,
            strokes_next: ctx.finite(row, 3, "strokes_next")?,
            field_avg_next: ctx.finite(row, 4, "field_avg_next")?,
        };
        derive_label(&rec).map_err(|e| ctx.err(e.to_string()))?;
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_labels(path: &Path) -> Result<Vec<(String, Label)>> {
    let mut out = Vec::new();
    for_each_row(path, &LABELS_HEADER, |row, ctx| {
        let v: u8 = ctx.num(row, 1, "label")?;
        let label = Label::new(v).map_err(|e| ctx.err(e.to_string()))?;
        out.push((row[0].to_owned(), label));
        Ok(())
    })?;
    Ok(out)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_landmarks(path: &Path, series: &[LandmarkSeries]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LANDMARKS_HEADER).map_err(|e| write_err(path, e))?;
    for s in series {
        for f in &s.frames {
            let mut row = vec![s.video_id.clone(), f.frame_index.to_string(), f.timestamp.to_string()];
            row.extend(f.channels.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| write_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metadata(path: &Path, metas: &[GolferMeta]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METADATA_HEADER).map_err(|e| write_err(path, e))?;
    for m in metas {
        w.write_record([
            m.video_id.clone(),
            m.golfer_id.clone(),
            m.age.to_string(),
            m.career_length.to_string(),
            m.height.to_string(),
            m.prev_rank.to_string(),
            m.nationality.clone(),
        ])
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SCORES_HEADER).map_err(|e| write_err(path, e))?;
    for s in scores {
        w.write_record([
            s.video_id.clone(),
            s.strokes_day.to_string(),
            s.field_avg_day.to_string(),
            s.strokes_next.to_string(),
            s.field_avg_next.to_string(),
        ])
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[(String, Label)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LABELS_HEADER).map_err(|e| write_err(path, e))?;
    for (id, l) in labels {
        w.write_record([id.clone(), l.value().to_string()])
            .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn score(a: f64, b: f64, c: f64, d: f64) -> ScoreRecord {
        ScoreRecord {
            video_id: "v".into(),
            strokes_day: a,
            field_avg_day: b,
            strokes_next: c,
            field_avg_next: d,
        }
    }

    fn meta(nat: &str, age: f64) -> GolferMeta {
        GolferMeta {
            video_id: format!("v-{nat}-{age}"),
            golfer_id: "g".into(),
            age,
            career_length: 5.0,
            height: 168.0,
            prev_rank: 10,
            nationality: nat.into(),
        }
    }

    fn labels(n0: usize, n1: usize) -> Vec<Label> {
        let mut v = vec![Label::NEGATIVE; n0];
        v.extend(std::iter::repeat_n(Label::POSITIVE, n1));
        v
    }

    #[test]
    fn label_examples() {
        // 70/71 = 0.98592 >= 68/72 = 0.94444
        assert_eq!(derive_label(&score(68.0, 72.0, 70.0, 71.0)).unwrap(), Label::POSITIVE);
        assert_eq!(derive_label(&score(70.0, 70.0, 70.0, 70.0)).unwrap(), Label::POSITIVE);
        // 68/70 = 0.9714 < 72/70 = 1.0286
        assert_eq!(derive_label(&score(72.0, 70.0, 68.0, 70.0)).unwrap(), Label::NEGATIVE);
    }

    #[test]
    fn label_rejects_non_positive_fields() {
        assert!(derive_label(&score(0.0, 72.0, 70.0, 71.0)).is_err());
        assert!(derive_label(&score(70.0, -1.0, 70.0, 71.0)).is_err());
        assert!(derive_label(&score(70.0, 72.0, f64::NAN, 71.0)).is_err());
    }

    #[test]
    fn vocab_examples() {
        let v = NationalityVocab::build(["KOR", "USA", "KOR", "FRA"]);
        assert_eq!(v.codes(), ["KOR", "USA", "FRA"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.unknown_index(), 3);
        let empty = build_vocab(&[]);
        assert_eq!(empty.len(), 1);
        assert_eq!(empty.index_of("USA"), 0);
        assert_eq!(NationalityVocab::build(["USA"]).codes(), ["USA"]);
    }

    #[test]
    fn encode_meta_one_hot_and_standardization() {
        let train = vec![meta("KOR", 20.0), meta("USA", 30.0)];
        let enc = MetaEncoder::fit(&train);
        assert_eq!(enc.vocab.codes(), ["KOR", "USA"]);
        let v = encode_meta(&meta("KOR", 25.0), &enc);
        assert_eq!(v.len(), 4 + 3);
        assert_eq!(v[0], 0.0);
        assert_eq!(&v[4..], &[1.0, 0.0, 0.0]);
        let unseen = encode_meta(&meta("JPN", 30.0), &enc);
        assert_eq!(&unseen[4..], &[0.0, 0.0, 1.0]);
        assert_eq!(unseen[0], 1.0);
        // constant columns stay finite
        assert_eq!(unseen[1], 0.0);
    }

    #[test]
    fn split_examples() {
        let l = labels(5, 5);
        let s = stratified_split(&l, 0.2, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(class_counts(&s.test.iter().map(|&i| l[i]).collect::<Vec<_>>()), [1, 1]);
        assert_eq!(s, stratified_split(&l, 0.2, 7).unwrap());

        let l = labels(80, 20);
        let s = stratified_split(&l, 0.2, 42).unwrap();
        let test: Vec<Label> = s.test.iter().map(|&i| l[i]).collect();
        assert_eq!(class_counts(&test), [16, 4]);
    }

    #[test]
    fn split_requires_two_per_class() {
        assert!(matches!(
            stratified_split(&labels(5, 1), 0.2, 0),
            Err(Error::InsufficientClass { class: 1, count: 1, .. })
        ));
        assert!(stratified_split(&labels(5, 5), 1.0, 0).is_err());
    }

    #[test]
    fn group_split_keeps_golfers_together() {
        let l = labels(10, 10);
        let groups: Vec<String> = (0..20).map(|i| format!("g{}", i % 7)).collect();
        let g: Vec<&str> = groups.iter().map(String::as_str).collect();
        let s = group_split(&l, &g, 0.25, 3).unwrap();
        let test_groups: HashSet<&str> = s.test.iter().map(|&i| g[i]).collect();
        assert!(s.train.iter().all(|&i| !test_groups.contains(g[i])));
        assert!(s.test.len() >= 5);
        assert_eq!(s.train.len() + s.test.len(), 20);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&labels(5, 5)).unwrap().0, [1.0, 1.0]);
        let w = class_weights(&labels(180, 33)).unwrap().0;
        assert_eq!(w, [213.0 / 360.0, 213.0 / 66.0]);
        assert!((w[0] - 0.5917).abs() < 1e-4 && (w[1] - 3.2273).abs() < 1e-4);
        assert_eq!(class_weights(&labels(3, 1)).unwrap().0, [4.0 / 6.0, 2.0]);
        assert!(class_weights(&labels(3, 0)).is_err());
    }

    fn tmp_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn landmark_rows(video: &str, n: usize) -> String {
        (0..n)
            .map(|i| format!("{video},{i},{},1,2,3,4,5,6,7,8\n", i as f64 * 0.25))
            .collect()
    }

    #[test]
    fn parse_landmarks_truncates() {
        let body = format!(
            "{}\n{}{}",
            LANDMARKS_HEADER.join(","),
            landmark_rows("a", 120),
            landmark_rows("b", 40)
        );
        let f = tmp_csv(&body);
        let p = parse_landmarks(f.path()).unwrap();
        assert_eq!(p.series.len(), 2);
        assert_eq!(p.series[0].frames.len(), 100);
        assert_eq!(p.series[0].frames[99].frame_index, 99);
        assert_eq!(p.series[1].frames.len(), 40);
        assert_eq!(p.truncated, 1);
    }

    #[test]
    fn parse_landmarks_header_only() {
        let f = tmp_csv(&format!("{}\n", LANDMARKS_HEADER.join(",")));
        assert!(parse_landmarks(f.path()).unwrap().series.is_empty());
    }

    #[test]
    fn parse_landmarks_reports_line() {
        let body = format!(
            "{}\na,0,0,1,2,3,4,5,6,7,8\na,1,0.25,1,2,3,4,5,6,7\n",
            LANDMARKS_HEADER.join(",")
        );
        let f = tmp_csv(&body);
        match parse_landmarks(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let body = format!("{}\na,0,0,1,2,3,x,5,6,7,8\n", LANDMARKS_HEADER.join(","));
        let f = tmp_csv(&body);
        assert!(matches!(parse_landmarks(f.path()), Err(Error::Parse { line: 2, .. })));
        let body = format!("{}\na,0,0,1,2,3,nan,5,6,7,8\n", LANDMARKS_HEADER.join(","));
        let f = tmp_csv(&body);
        assert!(matches!(parse_landmarks(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn parse_landmarks_rejects_duplicates() {
        let body = format!(
            "{}\na,0,0,1,2,3,4,5,6,7,8\na,0,0,1,2,3,4,5,6,7,8\n",
            LANDMARKS_HEADER.join(",")
        );
        let f = tmp_csv(&body);
        assert!(parse_landmarks(f.path()).is_err());
    }

    #[test]
    fn parse_sorts_frames_and_counts_gaps() {
        let body = format!(
            "{}\na,3,0.75,1,2,3,4,5,6,7,8\na,0,0,1,2,3,4,5,6,7,8\na,1,0.25,1,2,3,4,5,6,7,8\n",
            LANDMARKS_HEADER.join(",")
        );
        let f = tmp_csv(&body);
        let s = &parse_landmarks(f.path()).unwrap().series[0];
        let idx: Vec<i64> = s.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, [0, 1, 3]);
        assert_eq!(s.missing_frames(), 1);
    }

    #[test]
    fn join_names_missing_video() {
        let series = vec![LandmarkSeries {
            video_id: "lonely".into(),
            frames: vec![],
        }];
        let err = join(series, vec![], LabelSource::Labels(vec![])).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn metadata_and_scores_round_trip() {
        let metas = vec![meta("KOR", 24.5), meta("USA", 31.0)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.csv");
        write_metadata(&p, &metas).unwrap();
        assert_eq!(parse_metadata(&p).unwrap(), metas);

        let scores = vec![score(68.0, 72.31, 70.0, 71.125)];
        let p = dir.path().join("scores.csv");
        write_scores(&p, &scores).unwrap();
        assert_eq!(parse_scores(&p).unwrap(), scores);

        let labels = vec![("a".to_string(), Label::POSITIVE), ("b".to_string(), Label::NEGATIVE)];
        let p = dir.path().join("labels.csv");
        write_labels(&p, &labels).unwrap();
        assert_eq!(parse_labels(&p).unwrap(), labels);
    }

    #[test]
    fn metadata_invariants_enforced() {
        let body = format!("{}\nv,g,25,3,0,4,KOR\n", METADATA_HEADER.join(","));
        let f = tmp_csv(&body);
        assert!(matches!(parse_metadata(f.path()), Err(Error::Parse { line: 2, .. })));
        let body = format!("{}\nv,g,25,3,170,0,KOR\n", METADATA_HEADER.join(","));
        let f = tmp_csv(&body);
        assert!(parse_metadata(f.path()).is_err());
    }
}
