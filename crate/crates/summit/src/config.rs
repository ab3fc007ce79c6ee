//! The structured run configuration consumed by the CLI: one JSON document
//! merging every component's settings, schema-validated with unknown keys
//! rejected, and one root seed from which all sub-seeds derive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EvatVariant;
use crate::model::{LossConfig, ModelConfig};
use crate::seed::derive_seed;
use crate::summarize::SummarizationConfig;
use crate::synth::SynthConfig;
use crate::train::{SweepGrid, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub n_boot: usize,
    pub confidence_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            n_boot: 1000,
            confidence_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream below derives from it by purpose
    /// label. Seeds inside the sections are overwritten on resolve().
    pub seed: u64,
    pub synth: SynthConfig,
    pub summarization: SummarizationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub variant: EvatVariant,
    pub impute: bool,
    pub sweep: SweepGrid,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(format!("malformed run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_slice(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.sweep.validate()?;
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config("threshold must be in [0,1]".into()));
        }
        if !(0.0 < self.evaluation.confidence_level && self.evaluation.confidence_level < 1.0) {
            return Err(Error::Config("confidence level must be in (0,1)".into()));
        }
        if !(self.summarization.window_len > 0.0) {
            return Err(Error::Config("summarization window must be positive".into()));
        }
        Ok(())
    }

    /// Push derived sub-seeds and shared flags into the sections.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.synth.seed = derive_seed(self.seed, "synth");
        out.train.seed = derive_seed(self.seed, "train");
        out.train.impute = self.impute;
        out
    }

    /// Seed for evaluation bootstrap resampling.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "evaluate")
    }
}
