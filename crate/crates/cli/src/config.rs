//! Layered run configuration: command-line flag, then `NERFSUP_*`
//! environment variable (both handled by clap), then the TOML config file,
//! then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use nerfsup::correspondence::GenConfig;
use nerfsup::descriptor::DescTrainConfig;
use nerfsup::optimizer::TrainConfig;
use nerfsup::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_field: TrainConfig,
    pub gen: GenConfig,
    pub train_desc: DescTrainConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub fixture: String,
    /// Overrides the fixture's camera count.
    pub cameras: Option<usize>,
    /// Ground-truth correspondences written alongside the dataset.
    pub annotations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fixture: "slab".into(),
            cameras: None,
            annotations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Annotations drawn when no annotation file is given.
    pub annotations: usize,
    /// Samples per ray when a field is scored as a matcher.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            annotations: 100,
            samples: nerfsup::render::DEFAULT_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: nerfsup::render::DEFAULT_SAMPLES,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
