//! JSON run configuration. The schema is versioned; `version` must equal 1.

use std::path::{Path, PathBuf};

use edgepro::data::{load_idx, synth_blobs, Dataset};
use edgepro::error::{Error, Result};
use edgepro::network::Network;
use edgepro::select::Strategy;
use edgepro::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub lock: LockSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize> },
    Lenet1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Synth {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockSpec {
    pub rho: f64,
    pub value_range: (f64, f64),
    pub gamma_range: (f64, f64),
    #[serde(default = "default_strategy")]
    pub strategy: String,
}

fn default_strategy() -> String {
    "rnr".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub loss_threshold: f64,
    pub probe_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSpec {
            lr: 0.1,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            loss_threshold: base.loss_threshold,
            probe_size: base.probe_size,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::InvalidParam(format!(
                "{}: config version {} unsupported (expected {})",
                path.display(),
                cfg.version,
                CONFIG_VERSION
            )));
        }
        Ok(cfg)
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.lock.strategy.parse()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            loss_threshold: self.train.loss_threshold,
            probe_size: self.train.probe_size,
            seed,
        }
    }

    pub fn build_model(&self, input_shape: Vec<usize>, num_classes: usize, seed: u64) -> Network {
        match &self.model {
            ModelSpec::Mlp { hidden } => Network::mlp(input_shape, hidden, num_classes, seed),
            ModelSpec::Lenet1 => Network::lenet1(num_classes, seed),
        }
    }
}

impl DatasetSpec {
    /// Loads the dataset and splits off the trailing `test_fraction`.
    pub fn load_split(&self, limit_override: Option<usize>) -> Result<(Dataset, Dataset)> {
        let (full, fraction) = self.load_full(limit_override)?;
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidParam(format!(
                "test_fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let test_n = ((full.len() as f64) * fraction).round() as usize;
        let train_n = full.len() - test_n;
        if train_n == 0 || test_n == 0 {
            return Err(Error::InvalidParam(format!(
                "split {train_n}/{test_n} from {} examples leaves an empty side",
                full.len()
            )));
        }
        full.split_at(train_n)
    }

    pub fn load_full(&self, limit_override: Option<usize>) -> Result<(Dataset, f64)> {
        match self {
            DatasetSpec::Idx { images, labels, limit, test_fraction } => {
                let limit = limit_override.or(*limit);
                Ok((load_idx(images, labels, limit)?, *test_fraction))
            }
            DatasetSpec::Synth { n, classes, dim, separation, seed, test_fraction } => {
                let n = limit_override.unwrap_or(*n);
                Ok((synth_blobs(n, *classes, *dim, *separation, *seed)?, *test_fraction))
            }
        }
    }
}
