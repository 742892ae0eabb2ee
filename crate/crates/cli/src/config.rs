//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ocl_core::data::{Dataset, SyntheticSpec};
use ocl_core::model::InputShape;
use ocl_core::trainer::TrainConfig;

use crate::CliError;

pub const SEED_ENV: &str = "OCL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated in memory from the spec, seeded by the run seed.
    Synthetic { spec: SyntheticSpec },
    /// A CSV written by `generate` (or any file in the same layout).
    Csv { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { spec: SyntheticSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Input layout; `None` treats each row as a flat vector.
    pub input: Option<InputShape>,
    pub train: TrainConfig,
    /// Optional explicit batch size, checked against P·K.
    pub batch_size: Option<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            input: None,
            train: TrainConfig::default(),
            batch_size: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Applies the `OCL_SEED` override when set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Every problem with the config, gathered in one pass.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let DatasetSource::Synthetic { spec } = &self.dataset {
            v.extend(spec.violations());
        }
        let mut train = self.train.clone();
        if let Some(input) = self.input {
            train.extractor.input = input;
        }
        v.extend(train.violations());
        if let Some(b) = self.batch_size {
            let pk = self.train.batch.batch_size();
            if b != pk {
                v.push(format!(
                    "batch_size {b} does not equal P·K = {}·{} = {pk}",
                    self.train.batch.p, self.train.batch.k
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v.join("\n")))
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        match &self.dataset {
            DatasetSource::Synthetic { spec } => Ok(Dataset::generate(spec, self.seed)?.0),
            DatasetSource::Csv { path } => Dataset::load(path).map_err(|e| match e {
                ocl_core::Error::Io(io) => CliError::Config(format!("cannot read dataset {}: {io}", path.display())),
                other => other.into(),
            }),
        }
    }

    /// Training config with the run seed and the input layout resolved
    /// against the dataset.
    pub fn resolved_train(&self, dataset_dim: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.extractor.input = self.input.unwrap_or(InputShape::Vector { dim: dataset_dim });
        t
    }
}
