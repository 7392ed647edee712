//! Batch generation loop: prompt, sample, parse, filter, check stopping.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendHandle, SamplingParams};
use crate::codec::{
    make_inference_prompt, parse_generation_with, sample_permutation, PromptTemplate,
};
use crate::embedding::EmbeddingTable;
use crate::error::{invalid, Error, Result};
use crate::filter::{
    filter_batch, should_stop, BatchLogRecord, FilterCounters, FilterState, StopDecision,
    StoppingRule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub sampling: SamplingParams,
    pub stopping: StoppingRule,
    /// Carries the condition label, if any; prompts and the filter state are
    /// then restricted to that label.
    pub template: PromptTemplate,
    /// Upper bound on batches, a guard against backends that never produce
    /// acceptable rows.
    pub max_batches: usize,
    pub seed: u64,
}

impl GenerationConfig {
    pub const DEFAULT_MAX_BATCHES: usize = 1000;

    pub fn fixed_count(target: usize, seed: u64) -> Self {
        Self {
            sampling: SamplingParams::default(),
            stopping: StoppingRule::fixed_count(target),
            template: PromptTemplate::default(),
            max_batches: Self::DEFAULT_MAX_BATCHES,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Collapse,
    Cap,
    Target,
    BatchLimit,
}

impl From<StopDecision> for Option<StopReason> {
    fn from(d: StopDecision) -> Self {
        match d {
            StopDecision::Continue => None,
            StopDecision::StopCollapse => Some(StopReason::Collapse),
            StopDecision::StopCap => Some(StopReason::Cap),
            StopDecision::StopTarget => Some(StopReason::Target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    /// Accepted rows in acceptance order; truncated to the target in
    /// fixed-count mode.
    pub rows: Vec<Vec<f64>>,
    pub condition: Option<String>,
    pub stop: StopReason,
    pub batches: usize,
    pub counters: FilterCounters,
    pub log: Vec<BatchLogRecord>,
}

impl GenerationOutcome {
    pub fn write_log(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_log(&self.log, path)
    }
}

/// Writes batch records as JSON lines.
pub fn write_log(log: &[BatchLogRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs generation against `table` until the stopping rule fires.
pub fn generate_rows(
    backend: &dyn Backend,
    handle: &BackendHandle,
    table: &EmbeddingTable,
    cfg: &GenerationConfig,
) -> Result<GenerationOutcome> {
    cfg.sampling.validate()?;
    cfg.template.validate()?;
    let k = table.width();
    let mut state = match &cfg.template.condition {
        Some(label) => {
            let rows = table.rows_with_label(label);
            if rows.is_empty() {
                return invalid(format!("no rows labelled '{label}'"));
            }
            FilterState::from_rows(rows, &table.channel_spans)
        }
        None => FilterState::seed(table),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.sampling.batch_size;
    let mut log = Vec::new();
    let mut stop = StopReason::BatchLimit;
    let mut batches = 0;
    while batches < cfg.max_batches {
        batches += 1;
        let prompts: Vec<String> = (0..g)
            .map(|_| make_inference_prompt(k, &sample_permutation(k, &mut rng), &cfg.template))
            .collect();
        let params = SamplingParams {
            seed: Some(rng.next_u64()),
            ..cfg.sampling.clone()
        };
        let completions = backend.generate(handle, &prompts, &params)?;
        if completions.len() != prompts.len() {
            return Err(Error::Backend(format!(
                "{} completions for {} prompts",
                completions.len(),
                prompts.len()
            )));
        }
        let parsed: Vec<_> = completions
            .iter()
            .map(|c| parse_generation_with(c, k, &cfg.template))
            .collect();
        let batch = filter_batch(&parsed, &mut state)?;
        let record = BatchLogRecord::new(batches, &batch, &state);
        log::info!(
            "batch {batches}: accepted {}/{g}, total {}, diversity {:?}",
            record.accepted,
            state.accepted_count(),
            record.diversity
        );
        log.push(record);
        if let Some(reason) = Option::<StopReason>::from(should_stop(&state, &cfg.stopping)) {
            stop = reason;
            break;
        }
    }
    if stop == StopReason::BatchLimit {
        log::warn!(
            "generation stopped after the batch limit of {}",
            cfg.max_batches
        );
    }

    let mut rows = state.accepted_rows().to_vec();
    if let Some(t) = cfg.stopping.target {
        rows.truncate(t);
    }
    Ok(GenerationOutcome {
        rows,
        condition: cfg.template.condition.clone(),
        stop,
        batches,
        counters: state.counters().clone(),
        log,
    })
}
