//! Confusion-matrix metrics and the three-way modality ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::features::FeatureSample;
use crate::model::{fusion_forward, FusionModel, Mode};
use crate::pipeline::{PrepareSettings, Prepared};
use crate::training::{fit, TrainConfig};

/// Zero when there are no predicted positives.
pub fn precision(tp: u64, fp: u64) -> f64 {
    ratio(tp, tp + fp)
}

/// Zero when there are no actual positives.
pub fn recall(tp: u64, fn_: u64) -> f64 {
    ratio(tp, tp + fn_)
}

/// Harmonic mean of precision and recall; zero whenever a denominator
/// vanishes.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = precision(tp, fp);
    let r = recall(tp, fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * (p * r) / (p + r)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts are taken with label 1 as the positive class. Per-class arrays are
/// indexed by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub macro_f1: f64,
    pub positive_class: u8,
}

impl EvalReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        // class 0 viewed as positive swaps the roles of the counts
        let precision = [precision(tn, fn_), precision(tp, fp)];
        let recall = [recall(tn, fp), recall(tp, fn_)];
        let f1 = [f1_score(tn, fn_, fp), f1_score(tp, fp, fn_)];
        EvalReport {
            n: tp + fp + fn_ + tn,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            macro_f1: (f1[0] + f1[1]) / 2.0,
            positive_class: 1,
        }
    }

    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (t, p) in truth.iter().zip(predicted) {
            match (t.value(), p.value()) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => tn += 1,
            }
        }
        EvalReport::from_counts(tp, fp, fn_, tn)
    }

    /// Headline metric: F1 of the positive class.
    pub fn f1_positive(&self) -> f64 {
        self.f1[1]
    }

    pub fn has_nan(&self) -> bool {
        self.precision
            .iter()
            .chain(&self.recall)
            .chain(&self.f1)
            .chain(std::iter::once(&self.macro_f1))
            .any(|v| v.is_nan())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n={}  tp={}  fp={}  fn={}  tn={}",
            self.n, self.tp, self.fp, self.fn_, self.tn
        );
        let _ = writeln!(s, "{:<7} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
        for c in 0..2 {
            let _ = writeln!(
                s,
                "{:<7} {:>9.4} {:>9.4} {:>9.4}",
                c, self.precision[c], self.recall[c], self.f1[c]
            );
        }
        let _ = writeln!(s, "macro_f1 {:.4}", self.macro_f1);
        s
    }
}

/// Argmax of eval-mode probabilities; ties go to class 0.
pub fn predict(model: &FusionModel, sample: &FeatureSample) -> Result<Label> {
    let (p, _) = fusion_forward(model, sample, false, 0)?;
    Ok(if p[1] > p[0] { Label::POSITIVE } else { Label::NEGATIVE })
}

pub fn evaluate(model: &FusionModel, test: &[FeatureSample]) -> Result<EvalReport> {
    evaluate_with(model, test, ExecPolicy::default())
}

pub fn evaluate_with(model: &FusionModel, test: &[FeatureSample], policy: ExecPolicy) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let predicted = exec::try_map(policy, test, |s| predict(model, s))?;
    let truth: Vec<Label> = test.iter().map(|s| s.label).collect();
    Ok(EvalReport::from_predictions(&truth, &predicted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    pub test: EvalReport,
    /// Metrics on the split the model was fitted on.
    pub train: EvalReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub prepare: PrepareSettings,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub results: Vec<ModeResult>,
}

impl AblationReport {
    pub fn get(&self, mode: Mode) -> Option<&ModeResult> {
        self.results.iter().find(|r| r.mode == mode)
    }

    pub fn has_nan(&self) -> bool {
        self.results.iter().any(|r| r.test.has_nan() || r.train.has_nan())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "train={} val={} test={} seed={}",
            self.n_train, self.n_val, self.n_test, self.config.seed
        );
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>9} {:>9} {:>9} {:>10}",
            "mode", "f1(1)", "prec(1)", "rec(1)", "macro_f1", "best_epoch"
        );
        for r in &self.results {
            let t = &r.test;
            let _ = writeln!(
                s,
                "{:<12} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>10}",
                r.mode.name(),
                t.f1[1],
                t.precision[1],
                t.recall[1],
                t.macro_f1,
                r.best_epoch
            );
        }
        s
    }
}

/// Trains one model per mode on a single shared split and evaluates each on
/// the same test partition. Only `mode` differs between the runs.
pub fn ablate(dataset: &Dataset, config: &TrainConfig, prepare: &PrepareSettings) -> Result<AblationReport> {
    let data = Prepared::new(dataset, prepare, config.exec)?;
    ablate_prepared(&data, config, &Mode::ALL)
}

pub fn ablate_prepared(data: &Prepared, config: &TrainConfig, modes: &[Mode]) -> Result<AblationReport> {
    let results = exec::try_map(config.exec, modes, |&mode| {
        let cfg = TrainConfig { mode, ..config.clone() };
        let (model, report) = fit(&data.train, &data.val, &cfg)?;
        Ok::<_, Error>(ModeResult {
            mode,
            test: evaluate_with(&model, &data.test, config.exec)?,
            train: evaluate_with(&model, &data.train, config.exec)?,
            best_epoch: report.best_epoch,
            epochs_run: report.epochs.len(),
        })
    })?;
    Ok(AblationReport {
        config: config.clone(),
        prepare: data.settings.clone(),
        n_train: data.train.len(),
        n_val: data.val.len(),
        n_test: data.test.len(),
        results,
    })
}
