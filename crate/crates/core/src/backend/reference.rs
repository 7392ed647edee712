use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Backend, BackendHandle, BackendKind, SamplingParams, TrainingParams};
use crate::codec::{parse_generation_with, prompt_permutation, read_condition, PromptTemplate};
use crate::embedding::EmbeddingTable;
use crate::error::{invalid, Error, Result};

/// Factor applied to a sampled row by the outlier fault mode.
pub const OUTLIER_SCALE: f64 = 100.0;

const RIDGE: f64 = 1e-6;
const MIN_ROWS: usize = 5;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Normal scores `Φ⁻¹(rank / (n + 1))`, ties sharing their average rank.
fn normal_scores(col: &[f64]) -> Vec<f64> {
    let n = col.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && col[idx[j + 1]] == col[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[idx[t]] = r;
        }
        i = j + 1;
    }
    let normal = std_normal();
    ranks
        .iter()
        .map(|r| normal.inverse_cdf(r / (n + 1) as f64))
        .collect()
}

fn correlation(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let k = cols.len();
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let ss: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            return 1.0;
        }
        if ss[a] <= 1e-12 || ss[b] <= 1e-12 {
            return 0.0;
        }
        let cov: f64 = centered[a]
            .iter()
            .zip(&centered[b])
            .map(|(x, y)| x * y)
            .sum();
        (cov / (ss[a] * ss[b]).sqrt()).clamp(-1.0, 1.0)
    })
}

/// Linearly interpolated empirical quantile; stays within `[min, max]`.
fn quantile(sorted: &[f64], u: f64) -> f64 {
    let pos = u.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Gaussian copula over empirical marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Copula {
    sorted: Vec<Vec<f64>>,
    /// Lower Cholesky factor of the normal-score correlation, row-major.
    chol: Vec<Vec<f64>>,
    rows: Vec<Vec<f64>>,
}

impl Copula {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < MIN_ROWS {
            return invalid(format!(
                "copula fit needs at least {MIN_ROWS} rows, got {}",
                rows.len()
            ));
        }
        let k = rows[0].len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("ragged or empty rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("copula rows must be finite");
        }
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        let scores: Vec<Vec<f64>> = cols.iter().map(|c| normal_scores(c)).collect();
        let r = correlation(&scores);
        let chol = cholesky_with_ridge(r)?;
        let sorted = cols
            .into_iter()
            .map(|mut c| {
                c.sort_by(f64::total_cmp);
                c
            })
            .collect();
        Ok(Self {
            sorted,
            chol,
            rows: rows.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.sorted.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Latent correlation matrix actually sampled from.
    pub fn correlation(&self) -> Vec<Vec<f64>> {
        let k = self.k();
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| (0..k).map(|t| self.chol[a][t] * self.chol[b][t]).sum())
                    .collect()
            })
            .collect()
    }

    /// One draw; the latent normal is scaled by `sqrt(temperature)`.
    pub fn sample<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> Vec<f64> {
        let k = self.k();
        let n: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let scale = temperature.sqrt();
        let normal = std_normal();
        (0..k)
            .map(|a| {
                let z: f64 = (0..=a).map(|t| self.chol[a][t] * n[t]).sum();
                quantile(&self.sorted[a], normal.cdf(scale * z))
            })
            .collect()
    }

    /// Training row with the median squared norm.
    fn anchor(&self) -> &[f64] {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        let norm = |i: usize| self.rows[i].iter().map(|v| v * v).sum::<f64>();
        idx.sort_by(|&a, &b| norm(a).total_cmp(&norm(b)));
        &self.rows[idx[idx.len() / 2]]
    }
}

fn cholesky_with_ridge(r: DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    let k = r.nrows();
    let mut ridge = 0.0;
    loop {
        let m = &r + DMatrix::identity(k, k) * ridge;
        if let Some(c) = m.cholesky() {
            let l = c.l();
            return Ok((0..k)
                .map(|a| (0..k).map(|b| l[(a, b)]).collect())
                .collect());
        }
        ridge = if ridge == 0.0 { RIDGE } else { ridge * 10.0 };
        if ridge > 1.0 {
            return Err(Error::Backend(
                "correlation matrix is not positive definite".into(),
            ));
        }
        log::debug!("copula correlation singular, ridge {ridge:e}");
    }
}

pub fn reference_fit(table: &EmbeddingTable) -> Result<Copula> {
    Copula::fit(&table.rows)
}

/// Deliberate corruption of completions, drawn independently per prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultModes {
    /// Drop the last answer.
    pub missing_rate: f64,
    /// Emit a training row verbatim.
    pub duplicate_rate: f64,
    /// Scale a sampled row by [`OUTLIER_SCALE`].
    pub outlier_rate: f64,
    /// Emit sign flips and within-channel permutations of one training row,
    /// so every completion has the same per-channel norms.
    pub constant_norm: bool,
}

impl FaultModes {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.missing_rate, self.duplicate_rate, self.outlier_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 {
            return invalid("fault rates must lie in [0, 1] and sum to at most 1");
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.constant_norm || self.missing_rate + self.duplicate_rate + self.outlier_rate > 0.0
    }
}

/// Built-in sampler: one Gaussian copula per condition label (plus a pooled
/// one for unconditioned prompts), fitted on the rows parsed back from the
/// fine-tuning corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReferenceBackend {
    template: PromptTemplate,
    faults: FaultModes,
    channel_widths: Option<Vec<usize>>,
    k: Option<usize>,
    pooled: Option<Copula>,
    by_label: BTreeMap<String, Copula>,
    model_id: Option<String>,
}

impl ReferenceBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_faults(mut self, faults: FaultModes) -> Self {
        self.faults = faults;
        self
    }

    /// Channel block widths used by the constant-norm fault mode; without
    /// them the whole row is treated as one channel.
    pub fn with_channel_widths(mut self, widths: Vec<usize>) -> Self {
        self.channel_widths = Some(widths);
        self
    }

    pub fn faults(&self) -> &FaultModes {
        &self.faults
    }

    pub fn set_faults(&mut self, faults: FaultModes) {
        self.faults = faults;
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn copula(&self, label: Option<&str>) -> Option<&Copula> {
        match label {
            Some(l) => self.by_label.get(l),
            None => self.pooled.as_ref(),
        }
    }

    /// Handle of an already fitted model, e.g. after [`ReferenceBackend::load`].
    pub fn handle(&self) -> Option<BackendHandle> {
        self.model_id.as_ref().map(|id| BackendHandle {
            kind: BackendKind::Reference,
            model_id: id.clone(),
            fitted: true,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn widths(&self, k: usize) -> Vec<usize> {
        match &self.channel_widths {
            Some(w) if w.iter().sum::<usize>() == k => w.clone(),
            _ => vec![k],
        }
    }

    fn constant_norm_row<R: Rng + ?Sized>(&self, copula: &Copula, rng: &mut R) -> Vec<f64> {
        let anchor = copula.anchor();
        let mut out = Vec::with_capacity(anchor.len());
        let mut start = 0;
        for w in self.widths(anchor.len()) {
            let mut block: Vec<f64> = anchor[start..start + w].to_vec();
            block.shuffle(rng);
            for v in block.iter_mut() {
                if rng.random_bool(0.5) {
                    *v = -*v;
                }
            }
            out.extend(block);
            start += w;
        }
        out
    }

    fn complete<R: Rng + ?Sized>(
        &self,
        prompt: &str,
        params: &SamplingParams,
        rng: &mut R,
    ) -> Result<String> {
        let k = self.k.expect("fitted");
        let perm = match prompt_permutation(prompt, &self.template) {
            Some(p) if p.len() == k => p,
            _ => return invalid(format!("prompt does not list {k} features: {prompt}")),
        };
        let label = read_condition(prompt, &self.template);
        let copula = self
            .copula(label.as_deref())
            .ok_or_else(|| Error::Backend(format!("unknown condition label {label:?}")))?;

        let mut order = perm.as_slice().to_vec();
        let row = if self.faults.constant_norm {
            self.constant_norm_row(copula, rng)
        } else {
            let f = &self.faults;
            let u: f64 = rng.random();
            let sample = copula.sample(params.temperature, rng);
            if u < f.missing_rate {
                order.pop();
                sample
            } else if u < f.missing_rate + f.duplicate_rate {
                copula.rows[rng.random_range(0..copula.rows.len())].clone()
            } else if u < f.missing_rate + f.duplicate_rate + f.outlier_rate {
                sample.iter().map(|v| v * OUTLIER_SCALE).collect()
            } else {
                sample
            }
        };

        let mut s = String::from(prompt.trim_end());
        for p in order {
            s.push(' ');
            s.push_str(&self.template.format_value(row[p]));
            s.push(' ');
            s.push_str(&self.template.answer);
        }
        Ok(s)
    }
}

impl Backend for ReferenceBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Reference
    }

    fn fine_tune(&mut self, prompts: &[String], _hyper: &TrainingParams) -> Result<BackendHandle> {
        if prompts.is_empty() {
            return invalid("empty fine-tuning corpus");
        }
        self.faults.validate()?;
        let k = prompt_permutation(&prompts[0], &self.template)
            .map(|p| p.len())
            .ok_or_else(|| Error::InvalidInput("corpus prompt 1 lists no features".into()))?;
        let mut pooled = Vec::with_capacity(prompts.len());
        let mut grouped: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            let parsed = parse_generation_with(p, k, &self.template);
            let row = match (&parsed.permutation_used, parsed.complete_values()) {
                (Some(_), Some(row)) => row,
                _ => {
                    return invalid(format!(
                        "corpus prompt {} is not a complete {k}-feature row",
                        i + 1
                    ))
                }
            };
            if let Some(label) = parsed.condition {
                grouped.entry(label).or_default().push(row.clone());
            }
            pooled.push(row);
        }
        self.pooled = Some(Copula::fit(&pooled)?);
        self.by_label = grouped
            .into_iter()
            .map(|(l, rows)| Copula::fit(&rows).map(|c| (l, c)))
            .collect::<Result<_>>()?;
        self.k = Some(k);
        let id = format!("reference-k{k}-n{}", prompts.len());
        self.model_id = Some(id.clone());
        Ok(BackendHandle {
            kind: BackendKind::Reference,
            model_id: id,
            fitted: true,
        })
    }

    fn generate(
        &self,
        handle: &BackendHandle,
        prompts: &[String],
        params: &SamplingParams,
    ) -> Result<Vec<String>> {
        handle.ensure_fitted(BackendKind::Reference)?;
        if self.model_id.as_deref() != Some(handle.model_id.as_str()) {
            return invalid(format!("unknown model '{}'", handle.model_id));
        }
        params.validate()?;
        let mut rng = match params.seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_os_rng(),
        };
        prompts
            .iter()
            .map(|p| self.complete(p, params, &mut rng))
            .collect()
    }
}
