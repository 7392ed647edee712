//! Functional basis decomposition of windows into compact coefficient tables.
//!
//! Each channel gets its own basis of `k_c` curves of length `L`. Windows are
//! centered by the channel's pointwise mean curve, projected onto the basis,
//! and the resulting coefficients of all channels are concatenated into one
//! `I x K` table. Decoding adds the mean curve back.

mod fastica;
mod fpc;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InstanceSet;
use crate::error::{invalid, Error, Result};
use crate::linalg::dot;

pub use fastica::{fit_fastica, FastIcaParams};
pub use fpc::fit_fpc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fpc,
    Fica,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fpc => "fpc",
            Method::Fica => "fica",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpc" => Ok(Method::Fpc),
            "fica" | "fastica" | "ica" => Ok(Method::Fica),
            other => invalid(format!("unknown embedding method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Basis of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBasis {
    pub name: String,
    pub k: usize,
    pub mean_curve: Vec<f64>,
    /// `k` rows of length `L`.
    pub basis: Vec<Vec<f64>>,
    /// Covariance eigenvalues (FPC only), descending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(skip)]
    pub diagnostics: FitDiagnostics,
}

impl ChannelBasis {
    pub fn len(&self) -> usize {
        self.mean_curve.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_curve.is_empty()
    }

    /// Keeps the first `k` rows.
    pub fn truncated(&self, k: usize) -> ChannelBasis {
        let mut out = self.clone();
        out.k = k.min(self.k);
        out.basis.truncate(out.k);
        if let Some(e) = &mut out.eigenvalues {
            e.truncate(out.k);
        }
        out
    }

    /// `k x L` matrix mapping a centered window to its coefficients.
    fn projector(&self, method: Method) -> DMatrix<f64> {
        let l = self.len();
        let b = DMatrix::from_fn(self.k, l, |j, t| self.basis[j][t]);
        match method {
            Method::Fpc => b,
            Method::Fica => {
                // least squares: (B B^T)^+ B
                let gram = &b * b.transpose();
                let pinv = gram
                    .pseudo_inverse(1e-12)
                    .expect("pseudo-inverse of a Gram matrix");
                pinv * b
            }
        }
    }

    fn coefficients(&self, projector: &DMatrix<f64>, window: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = window
            .iter()
            .zip(&self.mean_curve)
            .map(|(v, m)| v - m)
            .collect();
        (0..self.k)
            .map(|j| {
                projector
                    .row(j)
                    .iter()
                    .zip(&centered)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn curve(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = self.mean_curve.clone();
        for (c, row) in coeffs.iter().zip(&self.basis) {
            out.iter_mut().zip(row).for_each(|(o, b)| *o += c * b);
        }
        out
    }

    /// Gram matrix of the basis rows.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        self.basis
            .iter()
            .map(|a| self.basis.iter().map(|b| dot(a, b)).collect())
            .collect()
    }
}

/// Per-channel bases for every channel of an instance set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    pub method: Method,
    pub channels: Vec<ChannelBasis>,
    #[serde(default)]
    pub diagnostics: Vec<FitDiagnostics>,
}

impl BasisSystem {
    pub fn new(method: Method, channels: Vec<ChannelBasis>) -> Self {
        let diagnostics = channels.iter().map(|c| c.diagnostics.clone()).collect();
        Self {
            method,
            channels,
            diagnostics,
        }
    }

    pub fn total_k(&self) -> usize {
        self.channels.iter().map(|c| c.k).sum()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, ChannelBasis::len)
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn spans(&self) -> Vec<ChannelSpan> {
        let mut start = 0;
        self.channels
            .iter()
            .map(|c| {
                let span = ChannelSpan {
                    name: c.name.clone(),
                    start,
                    k: c.k,
                };
                start += c.k;
                span
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut sys: BasisSystem = serde_json::from_str(s)?;
        for (c, d) in sys.channels.iter_mut().zip(&sys.diagnostics) {
            c.diagnostics = d.clone();
        }
        for c in &sys.channels {
            if c.basis.len() != c.k || c.basis.iter().any(|r| r.len() != c.mean_curve.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "basis for channel '{}' is not {} x {}",
                    c.name,
                    c.k,
                    c.mean_curve.len()
                )));
            }
        }
        Ok(sys)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpan {
    pub name: String,
    pub start: usize,
    pub k: usize,
}

impl ChannelSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.k
    }
}

/// `I x K` coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<Vec<f64>>,
    pub channel_spans: Vec<ChannelSpan>,
    pub row_ids: Vec<usize>,
    /// Condition label per row, for label-conditioned generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct TableSidecar {
    channel_spans: Vec<ChannelSpan>,
    row_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<Vec<f64>>, channel_spans: Vec<ChannelSpan>) -> Result<Self> {
        let k: usize = channel_spans.iter().map(|s| s.k).sum();
        let mut expect = 0;
        for s in &channel_spans {
            if s.start != expect {
                return Err(Error::ShapeMismatch(
                    "channel spans are not contiguous".into(),
                ));
            }
            expect += s.k;
        }
        for r in &rows {
            if r.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "row of width {} in a table with K = {k}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return invalid("embedding table values must be finite");
            }
        }
        let row_ids = (0..rows.len()).collect();
        Ok(Self {
            rows,
            channel_spans,
            row_ids,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.channel_spans.iter().map(|s| s.k).sum()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Rows whose label equals `label` (all rows when unlabeled).
    pub fn rows_with_label(&self, label: &str) -> Vec<&[f64]> {
        match &self.labels {
            Some(l) => self
                .rows
                .iter()
                .zip(l)
                .filter(|(_, x)| x.as_str() == label)
                .map(|(r, _)| r.as_slice())
                .collect(),
            None => self.rows.iter().map(Vec::as_slice).collect(),
        }
    }

    /// Writes `<path>` as CSV (`value_1..value_K`) and `<path>.json` with
    /// channel spans, row ids and labels.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record((1..=self.width()).map(|j| format!("value_{j}")))?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let side = TableSidecar {
            channel_spans: self.channel_spans.clone(),
            row_ids: self.row_ids.clone(),
            labels: self.labels.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: TableSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .enumerate()
                    .map(|(j, cell)| {
                        cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                            row: i + 1,
                            column: format!("value_{}", j + 1),
                            message: format!("'{cell}' is not a number"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut t = Self::new(rows, side.channel_spans)?;
        if side.row_ids.len() == t.rows.len() {
            t.row_ids = side.row_ids;
        }
        if let Some(l) = side.labels {
            t = t.with_labels(l)?;
        }
        Ok(t)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Fits one basis per channel. `ks[c]` is the component count for channel
/// `c`; FastICA channels use independent seed streams.
pub fn fit_basis(
    x: &InstanceSet,
    method: Method,
    ks: &[usize],
    ica: &FastIcaParams,
) -> Result<BasisSystem> {
    if ks.len() != x.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} component counts for {} channels",
            ks.len(),
            x.n_channels()
        )));
    }
    let channels = (0..x.n_channels())
        .into_par_iter()
        .map(|c| match method {
            Method::Fpc => fit_fpc(x, c, ks[c]),
            Method::Fica => {
                let params = FastIcaParams {
                    seed: ica.seed.wrapping_add(c as u64),
                    ..ica.clone()
                };
                fit_fastica(x, c, ks[c], &params)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BasisSystem::new(method, channels))
}

fn check_compatible(x: &InstanceSet, basis: &BasisSystem) -> Result<()> {
    if basis.channels.len() != x.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} channels, data has {}",
            basis.channels.len(),
            x.n_channels()
        )));
    }
    if basis.channels.iter().any(|c| c.len() != x.len()) {
        return Err(Error::ShapeMismatch(format!(
            "basis length {} does not match window length {}",
            basis.len(),
            x.len()
        )));
    }
    Ok(())
}

/// Projects every window onto its channel basis.
pub fn embed(x: &InstanceSet, basis: &BasisSystem) -> Result<EmbeddingTable> {
    check_compatible(x, basis)?;
    let projectors: Vec<DMatrix<f64>> = basis
        .channels
        .iter()
        .map(|c| c.projector(basis.method))
        .collect();
    let rows = (0..x.n_instances())
        .map(|i| {
            basis
                .channels
                .iter()
                .zip(&projectors)
                .enumerate()
                .flat_map(|(c, (cb, p))| cb.coefficients(p, x.series(i, c)))
                .collect()
        })
        .collect();
    EmbeddingTable::new(rows, basis.spans())
}

/// Decodes coefficient rows back into windows: `mean + sum_j e_j b_j`.
pub fn reconstruct(e: &EmbeddingTable, basis: &BasisSystem) -> Result<InstanceSet> {
    if e.channel_spans.len() != basis.channels.len()
        || e.channel_spans
            .iter()
            .zip(&basis.channels)
            .any(|(s, c)| s.k != c.k)
    {
        return Err(Error::ShapeMismatch(
            "table channel spans do not match the basis".into(),
        ));
    }
    if e.rows.is_empty() {
        return invalid("cannot reconstruct an empty table");
    }
    let nested = e
        .rows
        .iter()
        .map(|r| {
            e.channel_spans
                .iter()
                .zip(&basis.channels)
                .map(|(s, c)| c.curve(&r[s.range()]))
                .collect()
        })
        .collect();
    InstanceSet::from_nested(
        nested,
        basis.channels.iter().map(|c| c.name.clone()).collect(),
    )
}

/// Fraction of centered variance reproduced by embed-then-reconstruct,
/// per channel: `1 - |Xc - Xc_hat|^2 / |Xc|^2`.
pub fn variance_retained(x: &InstanceSet, basis: &BasisSystem) -> Result<Vec<f64>> {
    let recon = reconstruct(&embed(x, basis)?, basis)?;
    (0..x.n_channels())
        .map(|c| {
            let mean = &basis.channels[c].mean_curve;
            let mut total = 0.0;
            let mut resid = 0.0;
            for i in 0..x.n_instances() {
                for ((v, r), m) in x.series(i, c).iter().zip(recon.series(i, c)).zip(mean) {
                    total += (v - m).powi(2);
                    resid += (v - r).powi(2);
                }
            }
            if total <= 0.0 {
                return Err(Error::ZeroVariance(format!(
                    "channel '{}' has no variance around its mean curve",
                    x.channel_names()[c]
                )));
            }
            Ok((1.0 - resid / total).clamp(0.0, 1.0))
        })
        .collect()
}

/// Largest admissible component count: `min(I - 1, L)`.
pub fn k_cap(x: &InstanceSet) -> usize {
    (x.n_instances() - 1).min(x.len()).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: Vec<usize>,
    pub retained: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Smallest `k` per channel reaching `target` variance retained, capped at
/// `k_max` (itself capped at `min(I - 1, L)`).
pub fn select_k(
    x: &InstanceSet,
    method: Method,
    target: f64,
    k_max: usize,
    ica: &FastIcaParams,
) -> Result<KSelection> {
    if !(target > 0.0 && target <= 1.0) {
        return invalid(format!("variance target {target} not in (0, 1]"));
    }
    let k_max = k_max.min(k_cap(x));
    if k_max < 1 {
        return invalid("k_max must be at least 1");
    }
    let mut out = KSelection {
        k: Vec::new(),
        retained: Vec::new(),
        warnings: Vec::new(),
    };
    for c in 0..x.n_channels() {
        let single = x.channel_subset(c)?;
        let full = match method {
            Method::Fpc => Some(fit_fpc(&single, 0, k_max)?),
            Method::Fica => None,
        };
        let mut chosen = None;
        let mut last = 0.0;
        for k in 1..=k_max {
            let cb = match &full {
                Some(f) => f.truncated(k),
                None => fit_fastica(&single, 0, k, ica)?,
            };
            let r = variance_retained(&single, &BasisSystem::new(method, vec![cb]))?[0];
            last = r;
            // small slack so an exact reconstruction counts as reaching 1.0
            if r >= target - 1e-12 {
                chosen = Some((k, r));
                break;
            }
        }
        let (k, r) = chosen.unwrap_or_else(|| {
            let msg = format!(
                "channel '{}': target {target} unreachable, using k = {k_max} ({last:.4} retained)",
                x.channel_names()[c]
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            (k_max, last)
        });
        out.k.push(k);
        out.retained.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
