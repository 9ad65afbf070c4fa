//! Run configuration: one JSON document plus a seed fully determine
//! every artifact a run produces.

use crate::error::{CliError, CliResult};
use concept_probe::cav::CavOptions;
use concept_probe::factorization::{FactorizationOptions, Variant};
use concept_probe::model::{ModelConfig, TrainConfig};
use concept_probe::render::RenderSpec;
use concept_probe::roll::DEFAULT_STEP;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CONCEPT_PROBE_SEED";

/// Synthetic data layout shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Pattern kind per class, in label order.
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub eval_per_class: usize,
    /// Concept the TCAV stage probes.
    pub concept: String,
    pub concept_excerpts: usize,
    pub num_random_datasets: usize,
    pub random_excerpts: usize,
    pub excerpt_seconds: f64,
    pub step: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: vec!["alberti".into(), "random".into()],
            train_per_class: 60,
            val_per_class: 20,
            eval_per_class: 20,
            concept: "alberti".into(),
            concept_excerpts: 30,
            num_random_datasets: 10,
            random_excerpts: 30,
            excerpt_seconds: 10.0,
            step: DEFAULT_STEP,
        }
    }
}

impl DataConfig {
    /// Time columns of one excerpt's roll.
    pub fn columns(&self) -> usize {
        (self.excerpt_seconds / self.step).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcavConfig {
    pub alpha: f64,
    /// Block to probe; the model's last block when absent.
    pub layer: Option<usize>,
    pub cav: CavOptions,
}

impl Default for TcavConfig {
    fn default() -> Self {
        TcavConfig { alpha: 0.05, layer: None, cav: CavOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorConfig {
    pub variant: Variant,
    /// Explicit ranks; derived from the activation shape when absent.
    pub ranks: Option<Vec<usize>>,
    /// Channel-mode rank used when `ranks` is absent.
    pub channel_rank: usize,
    pub options: FactorizationOptions,
    /// Excerpts kept per concept in rankings and renders.
    pub top_k: usize,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            variant: Variant::FourD,
            ranks: None,
            channel_rank: 4,
            options: FactorizationOptions::default(),
            top_k: 5,
        }
    }
}

/// The whole run configuration. Every field has a default, so `{}` is a
/// valid document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tcav: TcavConfig,
    pub factorization: FactorConfig,
    pub render: RenderSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: desk_model(),
            train: desk_train(),
            tcav: TcavConfig::default(),
            factorization: FactorConfig::default(),
            render: RenderSpec::default(),
        }
    }
}

/// Default architecture sized for the synthetic pipeline: 10 s excerpts
/// instead of the reference model's 20 s input.
fn desk_model() -> ModelConfig {
    ModelConfig {
        input_height: 88,
        input_width: 200,
        conv_channels: vec![6, 12, 24],
        kernel_size: 3,
        num_classes: 2,
    }
}

/// Default optimizer settings for the synthetic task. Sparse rolls plus
/// global average pooling leave small gradients, so the rate sits far
/// above the core default.
fn desk_train() -> TrainConfig {
    TrainConfig { epochs: 40, batch_size: 8, learning_rate: 0.1, ..TrainConfig::default() }
}

impl RunConfig {
    /// Reads a config file, applies the seed override from the
    /// environment, and validates cross-field consistency.
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&bytes)?;
        if let Some(seed) = seed_override()? {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        if self.data.classes.len() != self.model.num_classes {
            return Err(CliError::Config(format!(
                "{} classes configured but the model has {}",
                self.data.classes.len(),
                self.model.num_classes
            )));
        }
        if self.data.columns() != self.model.input_width {
            return Err(CliError::Config(format!(
                "excerpts span {} columns but the model expects {}",
                self.data.columns(),
                self.model.input_width
            )));
        }
        if self.data.num_random_datasets < 2 {
            return Err(CliError::Config(
                "at least 2 random datasets are needed for the control runs".into(),
            ));
        }
        if let Some(layer) = self.tcav.layer {
            if layer >= self.model.num_blocks() {
                return Err(CliError::Config(format!(
                    "tcav layer {layer} out of range for {} blocks",
                    self.model.num_blocks()
                )));
            }
        }
        if !(self.tcav.alpha > 0.0 && self.tcav.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha {} outside (0, 1)", self.tcav.alpha)));
        }
        if self.factorization.channel_rank == 0 || self.factorization.top_k == 0 {
            return Err(CliError::Config("channel_rank and top_k must be positive".into()));
        }
        Ok(())
    }

    /// Block index explanations and TCAV use.
    pub fn probe_layer(&self) -> usize {
        self.tcav.layer.unwrap_or(self.model.last_block())
    }

    /// Canonical serialization; the manifest hash chain is rooted here.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Seed from `CONCEPT_PROBE_SEED`, if set.
pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw} is not a valid seed"))),
        Err(_) => Ok(None),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
