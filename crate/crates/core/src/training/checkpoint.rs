use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::config::ModelConfig;
use crate::data::Modality;
use crate::error::{PamfnError, Result};
use crate::network::Model;
use crate::params::ParamStore;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    /// Phase 1: one modality branch.
    Pretrain,
    /// Phase 2: mixed branch and decoders on top of pretrained branches.
    Mixed,
    /// Everything trained jointly from scratch.
    OneStage,
}

/// Parameters plus everything needed to continue or reproduce a run.
///
/// Stored as JSON; floats round-trip exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub phase: PhaseTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    /// Completed epochs.
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(
        phase: PhaseTag,
        modality: Option<Modality>,
        epoch: usize,
        model: ModelConfig,
        train: TrainConfig,
        params: ParamStore,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            format: FORMAT_VERSION,
            phase,
            modality,
            epoch,
            model,
            train,
            params,
            rng,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| PamfnError::Validation(format!("checkpoint serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| PamfnError::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| PamfnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PamfnError::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| PamfnError::format(path, e.to_string()))?;
        if ckpt.format != FORMAT_VERSION {
            return Err(PamfnError::format(
                path,
                format!("checkpoint format {} is not supported (expected {FORMAT_VERSION})", ckpt.format),
            ));
        }
        Ok(ckpt)
    }

    /// Full model for evaluation. Fails on phase-1 checkpoints.
    pub fn into_model(self) -> Result<Model> {
        if self.phase == PhaseTag::Pretrain {
            return Err(PamfnError::Config(
                "a branch checkpoint holds no mixed model; use it for pretrained branches".into(),
            ));
        }
        Model::from_params(self.model, self.params)
    }

    /// Checks the checkpoint against the configuration it is about to be used
    /// with.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let m = &self.model;
        let mismatch = |what: &str, found: String, want: String| {
            Err(PamfnError::Config(format!(
                "checkpoint {what} is {found} but the configuration says {want}"
            )))
        };
        if m.d != expected.d {
            return mismatch("d", m.d.to_string(), expected.d.to_string());
        }
        if m.n_stages != expected.n_stages {
            return mismatch("n_stages", m.n_stages.to_string(), expected.n_stages.to_string());
        }
        if m.dims != expected.dims {
            return mismatch("feature dims", format!("{:?}", m.dims), format!("{:?}", expected.dims));
        }
        if m.batch_norm != expected.batch_norm {
            return mismatch("batch_norm", m.batch_norm.to_string(), expected.batch_norm.to_string());
        }
        if self.phase != PhaseTag::Pretrain && m != expected {
            return Err(PamfnError::Config(
                "checkpoint model configuration differs from the requested one".into(),
            ));
        }
        Ok(())
    }
}
