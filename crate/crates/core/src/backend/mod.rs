//! Text-generation backends: fine-tune on a prompt corpus, then complete
//! inference prompts.

mod reference;
mod remote;

use serde::{Deserialize, Serialize};

use crate::codec::{prompt_permutation, PromptTemplate};
use crate::error::{invalid, Result};

pub use reference::{reference_fit, Copula, FaultModes, ReferenceBackend, OUTLIER_SCALE};
pub use remote::RemoteBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHandle {
    pub kind: BackendKind,
    pub model_id: String,
    pub fitted: bool,
}

impl BackendHandle {
    pub(crate) fn ensure_fitted(&self, kind: BackendKind) -> Result<()> {
        if self.kind != kind {
            return invalid(format!("handle belongs to a {:?} backend", self.kind));
        }
        if !self.fitted {
            return invalid(format!("model '{}' is not fitted", self.model_id));
        }
        Ok(())
    }
}

/// Fine-tuning hyperparameters, serialized with the wire field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub eval_every: usize,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            learning_rate: 8e-5,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            val_fraction: 0.2,
            eval_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    /// Prompts per generation batch (`G`).
    pub batch_size: usize,
    /// Defaults to `16 * K` when unset.
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            batch_size: 32,
            max_new_tokens: None,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return invalid("batch size G must be >= 1");
        }
        Ok(())
    }

    pub fn max_new_tokens_for(&self, k: usize) -> usize {
        self.max_new_tokens.unwrap_or(16 * k.max(1))
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn fine_tune(&mut self, prompts: &[String], hyper: &TrainingParams) -> Result<BackendHandle>;

    /// One completion per prompt, in order.
    fn generate(
        &self,
        handle: &BackendHandle,
        prompts: &[String],
        params: &SamplingParams,
    ) -> Result<Vec<String>>;
}

/// Number of features `K` listed in a prompt's `Input:` section.
pub fn prompt_width(prompt: &str, template: &PromptTemplate) -> Option<usize> {
    prompt_permutation(prompt, template).map(|p| p.len())
}
