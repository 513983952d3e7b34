use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use p3mask_core::evalharness::config_hash;
use p3mask_core::frcore::{TrainOptions, ARCH_COARSE, ARCH_FINE};
use p3mask_core::maskgen::TrainConfig;
use p3mask_core::synthdata::GenParams;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub identities: usize,
    pub images: usize,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            images: 20,
            size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub fine_arch: String,
    pub coarse_arch: String,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            fine_arch: ARCH_FINE.into(),
            coarse_arch: ARCH_COARSE.into(),
            epochs: t.epochs,
            batch: t.batch,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
        }
    }
}

impl PoolConfig {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch: self.batch,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `protection`, `unmask` or `adaptive`.
    pub scenario: String,
    /// Filters of the adaptive scenario, e.g. `jpeg:75`.
    pub filters: Vec<String>,
    /// `text` or `csv`.
    pub format: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenario: "protection".into(),
            filters: ["jpeg:75", "jpeg:50", "gaussian:0.5", "gaussian:1", "median:3"]
                .map(String::from)
                .to_vec(),
            format: "text".into(),
        }
    }
}

/// Directories produced by earlier steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<PathBuf>,
}

/// Everything a subcommand reads besides its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub team_size: usize,
    /// Identities that get masks; empty means the first half of the corpus.
    pub protected: Vec<String>,
    pub data: DataConfig,
    pub pool: PoolConfig,
    pub mask: TrainConfig,
    pub eval: EvalConfig,
    pub inputs: Inputs,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            team_size: 2,
            protected: Vec::new(),
            data: DataConfig::default(),
            pool: PoolConfig::default(),
            mask: TrainConfig::default(),
            eval: EvalConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The mask seed always follows the global seed.
    pub fn normalized(mut self) -> Self {
        self.mask.seed = self.seed;
        self
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            n_identities: self.data.identities,
            images_per_identity: self.data.images,
            size: self.data.size,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the settings; input locations are left out so the same
    /// experiment hashes the same wherever its files live.
    pub fn hash(&self) -> String {
        let settings = Self {
            inputs: Inputs::default(),
            ..self.clone()
        };
        config_hash(&settings.to_toml())
    }

    pub fn require_data(&self) -> Result<&Path> {
        match &self.inputs.data {
            Some(p) => Ok(p),
            None => bail!("no dataset directory given (--data)"),
        }
    }

    pub fn require_models(&self) -> Result<&Path> {
        match &self.inputs.models {
            Some(p) => Ok(p),
            None => bail!("no model directory given (--models)"),
        }
    }

    pub fn require_masks(&self) -> Result<&Path> {
        match &self.inputs.masks {
            Some(p) => Ok(p),
            None => bail!("no mask directory given (--masks)"),
        }
    }
}

/// Provenance record written into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Inputs,
    pub outputs: Vec<String>,
}

/// Write the resolved configuration and the run manifest into `out`.
pub fn write_run(out: &Path, command: &str, cfg: &PipelineConfig, outputs: Vec<String>) -> Result<()> {
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    let run = RunManifest {
        command: command.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        inputs: cfg.inputs.clone(),
        outputs,
    };
    fs::write(out.join(RUN_FILE), toml::to_string(&run)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
