//! Split preparation shared by training, evaluation and ablation, plus the
//! checkpoint bundle the CLI writes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MetaEncoder, SplitIndices, SplitStrategy};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::features::{build_samples, FeatureSample};
use crate::model::FusionModel;
use crate::training::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareSettings {
    pub test_fraction: f64,
    /// Share of the training side held out for early stopping.
    pub val_fraction: f64,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            test_fraction: 0.2,
            val_fraction: 0.2,
            strategy: SplitStrategy::Stratified,
            seed: 42,
        }
    }
}

/// Train/validation/test samples. Meta statistics and the nationality
/// vocabulary come from the training side only.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub settings: PrepareSettings,
    pub encoder: MetaEncoder,
    pub outer: SplitIndices,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub train: Vec<FeatureSample>,
    pub val: Vec<FeatureSample>,
    pub test: Vec<FeatureSample>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, settings: &PrepareSettings, policy: ExecPolicy) -> Result<Self> {
        let outer = dataset.split(settings.strategy, settings.test_fraction, settings.seed)?;
        let rest = dataset.subset(&outer.train);
        let inner = rest.split(
            SplitStrategy::Stratified,
            settings.val_fraction,
            derive_seed(settings.seed, &[3]),
        )?;
        let train_idx: Vec<usize> = inner.train.iter().map(|&i| outer.train[i]).collect();
        let val_idx: Vec<usize> = inner.test.iter().map(|&i| outer.train[i]).collect();
        let train_set = dataset.subset(&train_idx);
        let metas: Vec<_> = train_set.records.iter().map(|r| r.meta.clone()).collect();
        let encoder = MetaEncoder::fit(&metas);
        Ok(Prepared {
            settings: settings.clone(),
            train: build_samples(&train_set, &encoder, policy)?,
            val: build_samples(&dataset.subset(&val_idx), &encoder, policy)?,
            test: build_samples(&dataset.subset(&outer.test), &encoder, policy)?,
            encoder,
            outer,
            train_idx,
            val_idx,
        })
    }

    /// Test samples rebuilt from a checkpoint's stored split and encoder.
    pub fn test_from_checkpoint(
        dataset: &Dataset,
        ckpt: &Checkpoint,
        policy: ExecPolicy,
    ) -> Result<Vec<FeatureSample>> {
        let s = &ckpt.prepare;
        let outer = dataset.split(s.strategy, s.test_fraction, s.seed)?;
        build_samples(&dataset.subset(&outer.test), &ckpt.encoder, policy)
    }
}

/// Model plus everything needed to rebuild its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub encoder: MetaEncoder,
    pub prepare: PrepareSettings,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.model.config.mode.uses_meta() && ckpt.model.config.in_dim != ckpt.encoder.dim() {
            return Err(Error::Shape(format!(
                "model expects meta length {}, encoder produces {}",
                ckpt.model.config.in_dim,
                ckpt.encoder.dim()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)
    }
}
