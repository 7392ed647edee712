//! Online validation of generated rows and the diversity stopping rule.
//!
//! A generated row is rejected when it has a missing value, when its
//! 4-decimal rounding duplicates an original or previously accepted row, or
//! when its squared coefficient norm in any channel falls outside
//! `[q1 - 3 IQR, q3 + 3 IQR]` of the norms accepted so far (originals
//! included). Bounds are computed once per batch from the pre-batch state.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::codec::ParsedRow;
use crate::embedding::{ChannelSpan, EmbeddingTable};
use crate::error::{invalid, Result};

/// Outlier multiplier applied to the interquartile range.
pub const IQR_FACTOR: f64 = 3.0;

fn round4(v: f64) -> i64 {
    (v * 1e4).round() as i64
}

/// First and third quartiles with linear interpolation between order
/// statistics (position `p * (n - 1)`).
pub fn quartiles(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return invalid("quartiles of an empty set");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Ok((q(0.25), q(0.75)))
}

/// Acceptance band `(q1 - 3 IQR, q3 + 3 IQR)`.
pub fn norm_bounds(norms: &[f64]) -> Result<(f64, f64)> {
    if norms.len() < 4 {
        return invalid(format!(
            "norm bounds need at least 4 values, got {}",
            norms.len()
        ));
    }
    let (q1, q3) = quartiles(norms)?;
    let iqr = q3 - q1;
    Ok((q1 - IQR_FACTOR * iqr, q3 + IQR_FACTOR * iqr))
}

pub fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Missing,
    Duplicate,
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    Accepted,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounters {
    pub missing: usize,
    pub duplicate: usize,
    pub norm: usize,
    pub accepted: usize,
}

impl FilterCounters {
    pub fn total(&self) -> usize {
        self.missing + self.duplicate + self.norm + self.accepted
    }
}

/// Accumulated filter state for one generation run.
#[derive(Debug, Clone)]
pub struct FilterState {
    spans: Vec<ChannelSpan>,
    /// Squared norms per channel of originals plus accepted generated rows.
    norms: Vec<Vec<f64>>,
    /// Squared norms per channel of accepted generated rows only.
    generated_norms: Vec<Vec<f64>>,
    keys: HashSet<Vec<i64>>,
    accepted: Vec<Vec<f64>>,
    counters: FilterCounters,
}

impl FilterState {
    /// Seeds the state from the original embedding rows.
    pub fn seed(table: &EmbeddingTable) -> Self {
        Self::from_rows(table.rows.iter().map(Vec::as_slice), &table.channel_spans)
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, spans: &[ChannelSpan]) -> Self {
        let mut state = Self {
            spans: spans.to_vec(),
            norms: vec![Vec::new(); spans.len()],
            generated_norms: vec![Vec::new(); spans.len()],
            keys: HashSet::new(),
            accepted: Vec::new(),
            counters: FilterCounters::default(),
        };
        for r in rows {
            for (c, s) in spans.iter().enumerate() {
                state.norms[c].push(squared_norm(&r[s.range()]));
            }
            state.keys.insert(r.iter().map(|v| round4(*v)).collect());
        }
        state
    }

    pub fn width(&self) -> usize {
        self.spans.iter().map(|s| s.k).sum()
    }

    pub fn spans(&self) -> &[ChannelSpan] {
        &self.spans
    }

    pub fn counters(&self) -> &FilterCounters {
        &self.counters
    }

    /// Number of accepted generated rows.
    pub fn accepted_count(&self) -> usize {
        self.counters.accepted
    }

    pub fn accepted_rows(&self) -> &[Vec<f64>] {
        &self.accepted
    }

    /// `N^old` for channel `c`.
    pub fn channel_norms(&self, c: usize) -> &[f64] {
        &self.norms[c]
    }

    pub fn generated_norms(&self, c: usize) -> &[f64] {
        &self.generated_norms[c]
    }

    pub fn bounds(&self) -> Result<Vec<(f64, f64)>> {
        self.norms.iter().map(|n| norm_bounds(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNormStats {
    pub lo: f64,
    pub hi: f64,
    pub mean_accepted: Option<f64>,
    pub mean_rejected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDisposition {
    pub accepted: Vec<Vec<f64>>,
    /// One entry per input row, in order.
    pub decisions: Vec<Disposition>,
    pub norm_stats: Vec<ChannelNormStats>,
}

impl BatchDisposition {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.decisions
            .iter()
            .filter(|d| **d == Disposition::Rejected(reason))
            .count()
    }

    pub fn rejected(&self) -> usize {
        self.decisions.len() - self.accepted.len()
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Filters one batch of parsed rows and commits the accepted ones.
pub fn filter_batch(rows: &[ParsedRow], state: &mut FilterState) -> Result<BatchDisposition> {
    let bounds = state.bounds()?;
    let k = state.width();
    let mut decisions = Vec::with_capacity(rows.len());
    let mut accepted = Vec::new();
    let mut acc_norms: Vec<Vec<f64>> = vec![Vec::new(); state.spans.len()];
    let mut rej_norms: Vec<Vec<f64>> = vec![Vec::new(); state.spans.len()];

    for row in rows {
        let values = match row.complete_values() {
            Some(v) if v.len() == k => v,
            _ => {
                decisions.push(Disposition::Rejected(RejectReason::Missing));
                state.counters.missing += 1;
                continue;
            }
        };
        let key: Vec<i64> = values.iter().map(|v| round4(*v)).collect();
        if state.keys.contains(&key) {
            decisions.push(Disposition::Rejected(RejectReason::Duplicate));
            state.counters.duplicate += 1;
            continue;
        }
        let norms: Vec<f64> = state
            .spans
            .iter()
            .map(|s| squared_norm(&values[s.range()]))
            .collect();
        let inside = norms
            .iter()
            .zip(&bounds)
            .all(|(n, (lo, hi))| *lo <= *n && *n <= *hi);
        if !inside {
            decisions.push(Disposition::Rejected(RejectReason::Norm));
            state.counters.norm += 1;
            for (c, n) in norms.iter().enumerate() {
                rej_norms[c].push(*n);
            }
            continue;
        }
        decisions.push(Disposition::Accepted);
        state.counters.accepted += 1;
        state.keys.insert(key);
        for (c, n) in norms.iter().enumerate() {
            acc_norms[c].push(*n);
        }
        accepted.push(values);
    }

    for (c, n) in acc_norms.iter().enumerate() {
        state.norms[c].extend_from_slice(n);
        state.generated_norms[c].extend_from_slice(n);
    }
    state.accepted.extend(accepted.iter().cloned());

    let norm_stats = bounds
        .iter()
        .enumerate()
        .map(|(c, (lo, hi))| ChannelNormStats {
            lo: *lo,
            hi: *hi,
            mean_accepted: mean(&acc_norms[c]),
            mean_rejected: mean(&rej_norms[c]),
        })
        .collect();
    Ok(BatchDisposition {
        accepted,
        decisions,
        norm_stats,
    })
}

/// `D^c = u^c / Ĩ`: distinct 4-decimal accepted generated norms over the
/// accepted generated count. Reported as 1.0 before anything is accepted.
pub fn diversity_score(state: &FilterState) -> Vec<f64> {
    let n = state.accepted_count();
    state
        .generated_norms
        .iter()
        .map(|norms| {
            if n == 0 {
                return 1.0;
            }
            let unique: HashSet<i64> = norms.iter().map(|v| round4(*v)).collect();
            unique.len() as f64 / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    /// Collapse threshold on `max_c D^c`.
    pub lambda_stop: f64,
    /// Hard cap: stop once more than this many rows were accepted.
    pub max_generated: usize,
    /// Fixed-count mode: stop once this many rows were accepted. The
    /// collapse rule is not applied in this mode.
    pub target: Option<usize>,
}

impl StoppingRule {
    pub const DEFAULT_LAMBDA_STOP: f64 = 0.1;

    /// Fixed-count rule with the default cap of ten times the target.
    pub fn fixed_count(target: usize) -> Self {
        Self {
            lambda_stop: Self::DEFAULT_LAMBDA_STOP,
            max_generated: 10 * target,
            target: Some(target),
        }
    }

    pub fn diversity(lambda_stop: f64, max_generated: usize) -> Self {
        Self {
            lambda_stop,
            max_generated,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopDecision {
    Continue,
    StopCollapse,
    StopCap,
    StopTarget,
}

/// Evaluates the stopping conditions in order: target (fixed-count mode
/// only), collapse (diversity mode only), cap.
pub fn should_stop(state: &FilterState, rule: &StoppingRule) -> StopDecision {
    let n = state.accepted_count();
    match rule.target {
        Some(t) => {
            if n >= t {
                return StopDecision::StopTarget;
            }
        }
        None => {
            let max_d = diversity_score(state)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            if n > 0 && max_d < rule.lambda_stop {
                return StopDecision::StopCollapse;
            }
        }
    }
    if n > rule.max_generated {
        return StopDecision::StopCap;
    }
    StopDecision::Continue
}

/// One line of the generation run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLogRecord {
    pub step: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub accepted: usize,
    pub rejected_missing: usize,
    pub rejected_dup: usize,
    pub rejected_norm: usize,
    pub diversity: Vec<f64>,
}

impl BatchLogRecord {
    pub fn new(step: usize, batch: &BatchDisposition, state: &FilterState) -> Self {
        Self {
            step,
            g: batch.decisions.len(),
            accepted: batch.accepted.len(),
            rejected_missing: batch.count(RejectReason::Missing),
            rejected_dup: batch.count(RejectReason::Duplicate),
            rejected_norm: batch.count(RejectReason::Norm),
            diversity: diversity_score(state),
        }
    }
}
