//! Experiment configuration: sectioned key-value files (TOML), validated and
//! resolved against a data root, with a JSON export for tooling.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yae_core::dataio::{load_idx_images, load_idx_labels, pad_to, ImageSet, LabelSet};
use yae_core::trainer::TrainConfig;

use crate::CliError;

/// Environment variable naming the directory dataset paths resolve against.
/// Unset, paths resolve against the config file's directory.
pub const DATA_ROOT_ENV: &str = "YAE_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Images are zero-padded to this square size before training.
    #[serde(default = "default_pad")]
    pub pad_to: usize,
    /// Cap on training images (0 = all); used for subset experiments.
    #[serde(default)]
    pub train_limit: usize,
    /// Cap on test images (0 = all).
    #[serde(default)]
    pub test_limit: usize,
}

fn default_pad() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fraction of the content classes sampled per test input.
    pub fraction: f64,
    pub ensemble_seeds: Vec<u64>,
    pub ensemble_epochs: usize,
    /// Directory holding cached classifier ensembles; relative to the output
    /// directory unless absolute.
    pub cache_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fraction: 0.6,
            ensemble_seeds: vec![0, 1, 2, 3, 4],
            ensemble_epochs: 10,
            cache_dir: PathBuf::from("ensemble-cache"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/experiment") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmitSection {
    /// Rows in the sample grid (inputs per grid).
    pub grid_rows: usize,
}

impl Default for EmitSection {
    fn default() -> Self {
        EmitSection { grid_rows: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub emit: EmitSection,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((cfg, base))
    }

    /// Directory that relative dataset paths resolve against.
    pub fn data_root(config_dir: &Path) -> PathBuf {
        match env::var_os(DATA_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => config_dir.to_path_buf(),
        }
    }

    fn resolve(root: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }

    /// Absolute dataset paths, with existence validated field by field.
    pub fn dataset_paths(&self, config_dir: &Path) -> Result<[(&'static str, PathBuf); 4], CliError> {
        let root = Self::data_root(config_dir);
        let fields = [
            ("data.train_images", &self.data.train_images),
            ("data.train_labels", &self.data.train_labels),
            ("data.test_images", &self.data.test_images),
            ("data.test_labels", &self.data.test_labels),
        ];
        let mut out = Vec::new();
        for (name, p) in fields {
            let full = Self::resolve(&root, p);
            if !full.exists() {
                return Err(CliError::Config(format!(
                    "{name}: dataset file not found: {}",
                    full.display()
                )));
            }
            out.push((name, full));
        }
        Ok(out.try_into().unwrap())
    }

    /// Load, pad, and limit both splits.
    pub fn load_datasets(
        &self,
        config_dir: &Path,
    ) -> Result<(ImageSet, LabelSet, ImageSet, LabelSet), CliError> {
        let cfg = self.train.effective();
        if self.data.pad_to != cfg.input_hw {
            return Err(CliError::Config(format!(
                "data.pad_to = {} but train.input_hw = {}",
                self.data.pad_to, cfg.input_hw
            )));
        }
        let [(_, ti), (_, tl), (_, ei), (_, el)] = self.dataset_paths(config_dir)?;
        let k = cfg.num_classes;
        let pad = (self.data.pad_to, self.data.pad_to);
        let mut train_x = pad_to(&load_idx_images(&ti)?, pad)?;
        let mut train_y = load_idx_labels(&tl, k)?;
        let mut test_x = pad_to(&load_idx_images(&ei)?, pad)?;
        let mut test_y = load_idx_labels(&el, k)?;
        if self.data.train_limit > 0 {
            train_x = train_x.take(self.data.train_limit);
            train_y = train_y.take(self.data.train_limit);
        }
        if self.data.test_limit > 0 {
            test_x = test_x.take(self.data.test_limit);
            test_y = test_y.take(self.data.test_limit);
        }
        Ok((train_x, train_y, test_x, test_y))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
train_images = "train-images-idx3-ubyte"
train_labels = "train-labels-idx1-ubyte"
test_images = "t10k-images-idx3-ubyte"
test_labels = "t10k-labels-idx1-ubyte"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.eval.fraction, 0.6);
        assert_eq!(cfg.eval.ensemble_seeds.len(), 5);
        assert_eq!(cfg.emit.grid_rows, 8);
        assert_eq!(cfg.data.pad_to, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[train]\nlerning_rate = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn missing_dataset_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let err = cfg.dataset_paths(dir.path()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("data.train_images"), "{msg}");
    }

    #[test]
    fn json_export_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let json = cfg.to_json();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.train.epochs, cfg.train.epochs);
    }
}
