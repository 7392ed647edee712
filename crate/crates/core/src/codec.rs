//! Fill-in-the-middle text encoding of embedding rows.
//!
//! A fine-tuning prompt lists the feature slots in a random order and then
//! the values in that same order:
//!
//! ```text
//! Input: value_2 is [blank], value_1 is [blank] [sep] Target: 0.5000 [answer] -1.2500 [answer]
//! ```
//!
//! Inference prompts stop right after `Target:`. Parsing reads the feature
//! ids back from the `Input:` section, so completions that echo their prompt
//! map values to the right columns whatever order was sampled.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const CONDITION_PREFIX: &str = "Condition: data is ";
const INPUT: &str = "Input:";
const TARGET: &str = "Target:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Decimal places written for each value.
    pub precision: usize,
    /// Optional conditioning label, rendered as `Condition: data is <label> [sep] `.
    pub condition: Option<String>,
    pub blank: String,
    pub sep: String,
    pub answer: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            precision: 4,
            condition: None,
            blank: "[blank]".into(),
            sep: "[sep]".into(),
            answer: "[answer]".into(),
        }
    }
}

impl PromptTemplate {
    pub fn with_condition(mut self, label: impl Into<String>) -> Self {
        self.condition = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision < 1 {
            return invalid("template precision must be at least 1");
        }
        let tokens = [&self.blank, &self.sep, &self.answer];
        if tokens.iter().any(|t| t.trim().is_empty()) {
            return invalid("control tokens must be non-empty");
        }
        if self.blank == self.sep || self.blank == self.answer || self.sep == self.answer {
            return invalid("control tokens must be distinct");
        }
        if let Some(label) = &self.condition {
            if label.contains('\n') || label.contains(self.sep.as_str()) || label.trim().is_empty()
            {
                return invalid(format!("invalid condition label '{label}'"));
            }
        }
        Ok(())
    }

    pub fn format_value(&self, v: f64) -> String {
        let s = format!("{:.*}", self.precision, v);
        // "-0.0000" carries no information and breaks exact text equality
        if s.trim_start_matches('-')
            .chars()
            .all(|c| c == '0' || c == '.')
        {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }

    /// Rounds `v` to the template precision, as it would survive a text round trip.
    pub fn quantize(&self, v: f64) -> f64 {
        self.format_value(v)
            .parse()
            .expect("formatted float parses")
    }
}

/// A permutation of `0..K`; rendered 1-based as `value_{p+1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &p in &order {
            if p >= order.len() || seen[p] {
                return invalid(format!("{order:?} is not a permutation"));
            }
            seen[p] = true;
        }
        Ok(Self(order))
    }

    /// From 1-based feature ids.
    pub fn from_one_based(ids: &[usize]) -> Result<Self> {
        Self::new(ids.iter().map(|&i| i.wrapping_sub(1)).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniformly random permutation of `K` features.
pub fn sample_permutation<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Permutation {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    Permutation(order)
}

pub fn make_inference_prompt(k: usize, perm: &Permutation, template: &PromptTemplate) -> String {
    assert_eq!(perm.len(), k, "permutation length must equal K");
    let mut s = String::new();
    if let Some(label) = &template.condition {
        s.push_str(CONDITION_PREFIX);
        s.push_str(label);
        s.push(' ');
        s.push_str(&template.sep);
        s.push(' ');
    }
    s.push_str(INPUT);
    s.push(' ');
    let slots: Vec<String> = perm
        .as_slice()
        .iter()
        .map(|p| format!("value_{} is {}", p + 1, template.blank))
        .collect();
    s.push_str(&slots.join(", "));
    s.push(' ');
    s.push_str(&template.sep);
    s.push(' ');
    s.push_str(TARGET);
    s
}

/// Appends the answers for `row` (in permutation order) to an inference prompt.
pub fn complete_prompt(
    prompt: &str,
    row: &[f64],
    perm: &Permutation,
    template: &PromptTemplate,
) -> String {
    let mut s = String::from(prompt);
    for &p in perm.as_slice() {
        s.push(' ');
        s.push_str(&template.format_value(row[p]));
        s.push(' ');
        s.push_str(&template.answer);
    }
    s
}

pub fn encode_finetune(row: &[f64], perm: &Permutation, template: &PromptTemplate) -> String {
    assert!(
        row.iter().all(|v| v.is_finite()),
        "fine-tune rows must be finite"
    );
    let prompt = make_inference_prompt(row.len(), perm, template);
    complete_prompt(&prompt, row, perm, template)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRow {
    /// One slot per feature in canonical order; `None` marks a missing value.
    pub values: Vec<Option<f64>>,
    pub source_text: String,
    /// Feature order read from the `Input:` section, 0-based, if it was a
    /// valid permutation of `0..K`.
    pub permutation_used: Option<Vec<usize>>,
    pub condition: Option<String>,
}

impl ParsedRow {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn complete_values(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }
}

/// Parses a generated text into `K` feature values with the default control tokens.
pub fn parse_generation(text: &str, k: usize) -> ParsedRow {
    parse_generation_with(text, k, &PromptTemplate::default())
}

pub fn parse_generation_with(text: &str, k: usize, template: &PromptTemplate) -> ParsedRow {
    let mut values = vec![None; k];
    let condition = read_condition(text, template);

    let (slots, target) = match text.find(INPUT) {
        Some(at) => {
            let after = &text[at + INPUT.len()..];
            let sep_at = after.find(template.sep.as_str());
            let input = &after[..sep_at.unwrap_or(after.len())];
            let rest = sep_at.map_or("", |s| &after[s + template.sep.len()..]);
            let target = rest
                .find(TARGET)
                .map_or(rest, |t| &rest[t + TARGET.len()..]);
            (Some(read_slots(input, k, template)), target)
        }
        None => (
            None,
            text.find(TARGET)
                .map_or(text, |t| &text[t + TARGET.len()..]),
        ),
    };

    let mut pieces: Vec<&str> = target.split(template.answer.as_str()).collect();
    // the text after the last delimiter is not a terminated answer
    pieces.pop();
    for (pos, piece) in pieces.iter().enumerate() {
        let feature = match &slots {
            Some(s) => s.get(pos).copied().flatten(),
            None => (pos < k).then_some(pos),
        };
        let Some(f) = feature else { continue };
        if let Ok(v) = piece.trim().parse::<f64>() {
            if v.is_finite() {
                values[f] = Some(v);
            }
        }
    }

    let permutation_used = match &slots {
        Some(s) if s.len() == k && s.iter().all(Option::is_some) => {
            Some(s.iter().map(|v| v.unwrap()).collect())
        }
        _ => None,
    };
    ParsedRow {
        values,
        source_text: text.to_string(),
        permutation_used,
        condition,
    }
}

/// Condition label of a prompt, if it carries one.
pub fn read_condition(text: &str, template: &PromptTemplate) -> Option<String> {
    let at = text.find(CONDITION_PREFIX)?;
    if text.find(INPUT).is_some_and(|i| i < at) {
        return None;
    }
    let rest = &text[at + CONDITION_PREFIX.len()..];
    let end = rest.find(template.sep.as_str())?;
    Some(rest[..end].trim().to_string())
}

/// Feature order listed in the `Input:` section of a prompt.
pub fn prompt_permutation(text: &str, template: &PromptTemplate) -> Option<Permutation> {
    let at = text.find(INPUT)?;
    let after = &text[at + INPUT.len()..];
    let input = &after[..after.find(template.sep.as_str()).unwrap_or(after.len())];
    let n = input.split(',').filter(|s| !s.trim().is_empty()).count();
    let order: Option<Vec<usize>> = read_slots(input, n, template).into_iter().collect();
    order.filter(|o| !o.is_empty()).map(Permutation)
}

/// Feature index per listed slot; unknown, out-of-range or repeated ids are `None`.
fn read_slots(input: &str, k: usize, template: &PromptTemplate) -> Vec<Option<usize>> {
    let mut seen = vec![false; k];
    input
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|slot| {
            let slot = slot.trim();
            let id = slot
                .strip_prefix("value_")?
                .split_whitespace()
                .next()?
                .parse::<usize>()
                .ok()?;
            if !slot.ends_with(template.blank.as_str()) || id == 0 || id > k || seen[id - 1] {
                return None;
            }
            seen[id - 1] = true;
            Some(id - 1)
        })
        .collect()
}

/// One prompt per line; control tokens are literal text.
pub fn write_corpus(path: impl AsRef<Path>, prompts: &[String]) -> Result<()> {
    if prompts.iter().any(|p| p.contains('\n')) {
        return invalid("prompts must be single-line");
    }
    let mut s = prompts.join("\n");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}
