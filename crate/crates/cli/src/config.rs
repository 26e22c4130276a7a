//! Flat key-value run configuration. Command-line flags override values from
//! the file, which override built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::Failure;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub landmarks: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,

    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub head: Option<String>,
    pub optimizer: Option<String>,
    pub test_fraction: Option<f64>,
    pub val_fraction: Option<f64>,
    pub split: Option<String>,
    pub sequential: Option<bool>,

    pub n_samples: Option<usize>,
    pub class_balance: Option<f64>,
    pub frames: Option<usize>,
    pub p_face: Option<f64>,
    pub p_meta: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub missing_frame_rate: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::validation(format!("config {}: {e}", path.display())))
    }
}

/// First present value wins.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("epochs = 3\nlr = 0.01").is_ok());
        assert!(toml::from_str::<FileConfig>("epoch = 3").is_err());
    }
}
