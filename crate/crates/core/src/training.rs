//! Class-weighted optimization loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_counts, class_weights, ClassWeights, Label};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, EvalReport};
use crate::exec::{self, ExecPolicy};
use crate::features::FeatureSample;
use crate::model::{
    fusion_backward, fusion_forward, FusionModel, HeadActivation, Mode, ModelConfig, Params, N_CLASSES,
};

pub use crate::gradcheck::{grad_check, grad_check_suite, rel_error, GradCheckConfig, GradCheckReport};

/// Added inside the logarithm so a zero probability gives a finite loss.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn weighted_ce_loss(probs: [f64; N_CLASSES], label: Label, weights: &ClassWeights) -> f64 {
    -weights.get(label) * (probs[label.index()] + PROB_FLOOR).ln()
}

/// Derivative of `-w ln(p_y + floor)` with respect to the softmax inputs.
pub fn weighted_ce_grad(probs: [f64; N_CLASSES], label: Label, weight: f64) -> [f64; N_CLASSES] {
    let y = label.index();
    let py = probs[y];
    let scale = -weight * py / (py + PROB_FLOOR);
    let mut g = [0.0; N_CLASSES];
    for (k, gk) in g.iter_mut().enumerate() {
        let delta = if k == y { 1.0 } else { 0.0 };
        *gk = scale * (delta - probs[k]);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::ADAM
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// `None` derives inverse-frequency weights from the training labels.
    pub class_weights: Option<ClassWeights>,
    pub early_stop_patience: usize,
    pub mode: Mode,
    pub head_activation: HeadActivation,
    pub reduction: Reduction,
    #[serde(skip)]
    pub exec: ExecPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            batch_size: 16,
            dropout_rate: 0.2,
            seed: 42,
            class_weights: None,
            early_stop_patience: 25,
            mode: Mode::Merged,
            head_activation: HeadActivation::default(),
            reduction: Reduction::default(),
            exec: ExecPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        // zero is allowed: it freezes the parameters
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("class weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, in_dim: usize) -> ModelConfig {
        ModelConfig {
            head_activation: self.head_activation,
            seed: self.seed,
            ..ModelConfig::new(self.mode, in_dim, self.dropout_rate)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub class_weights: ClassWeights,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Where the CLI wrote the restored best model, if anywhere.
    pub checkpoint: Option<String>,
}

/// splitmix64 over a base seed and a stream of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Loss and summed-or-averaged gradient over a batch. Per-sample work may run
/// in parallel; the reduction always runs in batch order.
pub fn batch_gradient(
    model: &FusionModel,
    batch: &[&FeatureSample],
    weights: &ClassWeights,
    reduction: Reduction,
    train_mode: bool,
    dropout_seeds: &[u64],
    policy: ExecPolicy,
) -> Result<(f64, Params)> {
    let per_sample = exec::map_range(policy, batch.len(), |i| -> Result<(f64, Params)> {
        let s = batch[i];
        let (probs, cache) = fusion_forward(model, s, train_mode, dropout_seeds[i])?;
        let loss = weighted_ce_loss(probs, s.label, weights);
        let grad = fusion_backward(model, s, weights.get(s.label), &cache)?;
        Ok((loss, grad))
    });
    let mut loss = 0.0;
    let mut grad = model.params.zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    if reduction == Reduction::Mean && !batch.is_empty() {
        let n = batch.len() as f64;
        loss /= n;
        grad.scale(1.0 / n);
    }
    Ok((loss, grad))
}

/// Mean weighted loss in eval mode (no dropout).
pub fn eval_loss(
    model: &FusionModel,
    samples: &[FeatureSample],
    weights: &ClassWeights,
    policy: ExecPolicy,
) -> Result<f64> {
    let losses = exec::try_map(policy, samples, |s| {
        fusion_forward(model, s, false, 0).map(|(p, _)| weighted_ce_loss(p, s.label, weights))
    })?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

// one instance per training run, so the size gap is irrelevant
#[allow(clippy::large_enum_variant)]
enum OptState {
    Sgd,
    Adam {
        m: Params,
        v: Params,
        t: i32,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptState {
    fn new(opt: Optimizer, params: &Params) -> Self {
        match opt {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => OptState::Adam {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
                beta1,
                beta2,
                eps,
            },
        }
    }

    fn step(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        match self {
            OptState::Sgd => params.add_scaled(grad, -lr),
            OptState::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()));
                for ((p, g), (m, v)) in tensors {
                    for i in 0..p.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Trains a fresh model. Validation loss drives early stopping and the
/// parameters from the best validation epoch are returned.
pub fn fit(train: &[FeatureSample], val: &[FeatureSample], config: &TrainConfig) -> Result<(FusionModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let counts = class_counts(&labels);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InsufficientClass {
            class: c as u8,
            count: 0,
            needed: 1,
        });
    }
    let weights = match config.class_weights {
        Some(w) => w,
        None => class_weights(&labels)?,
    };
    let in_dim = train[0].meta_vec.len();
    let mut model = FusionModel::init(config.model_config(in_dim))?;
    let mut opt = OptState::new(config.optimizer, &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1]));

    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut history = Vec::with_capacity(config.epochs);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FeatureSample> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|i| derive_seed(config.seed, &[2, epoch as u64, b as u64, i as u64]))
                .collect();
            let (loss, grad) = batch_gradient(&model, &batch, &weights, config.reduction, true, &seeds, config.exec)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += match config.reduction {
                Reduction::Mean => loss * chunk.len() as f64,
                Reduction::Sum => loss,
            };
            opt.step(&mut model.params, &grad, config.learning_rate);
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = eval_loss(&model, val, &weights, config.exec)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        let val_f1 = evaluate_with(&model, val, config.exec)?.f1[1];
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_f1,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, best_params) = best;
    model.params = best_params;
    Ok((
        model,
        TrainReport {
            config: config.clone(),
            class_weights: weights,
            epochs: history,
            best_epoch,
            best_val_loss,
            stopped_early,
            checkpoint: None,
        },
    ))
}

/// Evaluates the training and held-out sets of one run.
pub fn final_reports(
    model: &FusionModel,
    train: &[FeatureSample],
    test: &[FeatureSample],
    policy: ExecPolicy,
) -> Result<(EvalReport, EvalReport)> {
    Ok((
        evaluate_with(model, train, policy)?,
        evaluate_with(model, test, policy)?,
    ))
}
