//! Similarity metrics between an original and a generated instance set, and
//! cross-model normalization and ranking.
//!
//! MDD, ACD, SD and KD compare distributional features; ED and DTW compare
//! each generated series against its nearest original.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InstanceSet;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Mdd,
    Acd,
    Sd,
    Kd,
    Ed,
    Dtw,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Mdd,
        Metric::Acd,
        Metric::Sd,
        Metric::Kd,
        Metric::Ed,
        Metric::Dtw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mdd => "MDD",
            Metric::Acd => "ACD",
            Metric::Sd => "SD",
            Metric::Kd => "KD",
            Metric::Ed => "ED",
            Metric::Dtw => "DTW",
        }
    }

    pub fn group(self) -> MetricGroup {
        match self {
            Metric::Ed | Metric::Dtw => MetricGroup::Distance,
            _ => MetricGroup::Feature,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric '{s}'")))
    }
}

/// Parses a comma-separated metric list such as `mdd,acd,dtw`.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return invalid("empty metric list");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricGroup {
    /// MDD, ACD, SD, KD.
    Feature,
    /// ED, DTW.
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Each generated series against its closest original.
    #[default]
    Nearest,
    /// Generated series `i` against original series `i`.
    Indexed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtwCost {
    /// Square root of the minimal summed squared difference; never exceeds ED.
    #[default]
    SquaredRoot,
    /// Minimal summed absolute difference.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Histogram bins per timestep; `ceil(sqrt(I_orig))` when unset.
    pub bins: Option<usize>,
    /// Largest ACF lag; `floor(L / 2)` when unset.
    pub max_lag: Option<usize>,
    pub pairing: Pairing,
    /// Sakoe-Chiba half-width.
    pub dtw_window: Option<usize>,
    pub dtw_cost: DtwCost,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins: None,
            max_lag: None,
            pairing: Pairing::Nearest,
            dtw_window: None,
            dtw_cost: DtwCost::SquaredRoot,
        }
    }
}

fn check_shapes(orig: &InstanceSet, gen: &InstanceSet) -> Result<()> {
    if orig.n_instances() == 0 || gen.n_instances() == 0 {
        return invalid("metric inputs must be non-empty");
    }
    if orig.n_channels() != gen.n_channels() || orig.len() != gen.len() {
        return Err(Error::ShapeMismatch(format!(
            "original is {} channels x {} steps, generated is {} x {}",
            orig.n_channels(),
            orig.len(),
            gen.n_channels(),
            gen.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn default_bins(n_orig: usize) -> usize {
    ((n_orig as f64).sqrt().ceil() as usize).max(2)
}

/// Histogram proportions of `values` on `bins` equal-width bins spanning
/// `[lo, hi]`; values outside are dropped but still count in the total.
fn proportions(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    let width = (hi - lo) / bins as f64;
    for v in values {
        total += 1;
        if v < lo || v > hi {
            continue;
        }
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Per-channel marginal distribution difference.
pub fn mdd_per_channel(orig: &InstanceSet, gen: &InstanceSet, bins: usize) -> Result<Vec<f64>> {
    check_shapes(orig, gen)?;
    if bins < 2 {
        return invalid("MDD needs at least 2 bins");
    }
    let l = orig.len();
    Ok((0..orig.n_channels())
        .map(|c| {
            let mut total = 0.0;
            for t in 0..l {
                let o: Vec<f64> = orig.channel_series(c).map(|s| s[t]).collect();
                let (lo, hi) = o
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                        (a.min(*v), b.max(*v))
                    });
                let po = proportions(o.into_iter(), lo, hi, bins);
                let pg = proportions(gen.channel_series(c).map(|s| s[t]), lo, hi, bins);
                total += po.iter().zip(&pg).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64;
            }
            total / l as f64
        })
        .collect())
}

pub fn mdd(orig: &InstanceSet, gen: &InstanceSet, bins: usize) -> Result<f64> {
    Ok(mean(&mdd_per_channel(orig, gen, bins)?))
}

/// ACF at lags `0..=max_lag`, `None` for a constant series.
fn acf(series: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = series.len();
    let m = mean(series);
    let c: Vec<f64> = series.iter().map(|v| v - m).collect();
    let denom: f64 = c.iter().map(|v| v * v).sum();
    if denom <= 1e-12 * n as f64 * m.abs().max(1.0).powi(2) {
        return None;
    }
    Some(
        (0..=max_lag)
            .map(|lag| {
                c[..n - lag]
                    .iter()
                    .zip(&c[lag..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / denom
            })
            .collect(),
    )
}

fn mean_acf(x: &InstanceSet, channel: usize, max_lag: usize) -> Option<Vec<f64>> {
    let acfs: Vec<Vec<f64>> = x
        .channel_series(channel)
        .filter_map(|s| acf(s, max_lag))
        .collect();
    if acfs.is_empty() {
        return None;
    }
    Some(
        (0..=max_lag)
            .map(|lag| acfs.iter().map(|a| a[lag]).sum::<f64>() / acfs.len() as f64)
            .collect(),
    )
}

/// Per-channel autocorrelation difference; `None` for channels skipped
/// because every series in one of the sets is constant.
pub fn acd_per_channel(
    orig: &InstanceSet,
    gen: &InstanceSet,
    max_lag: usize,
) -> Result<Vec<Option<f64>>> {
    check_shapes(orig, gen)?;
    if max_lag == 0 || max_lag >= orig.len() {
        return invalid(format!(
            "max_lag must lie in 1..{}, got {max_lag}",
            orig.len()
        ));
    }
    Ok((0..orig.n_channels())
        .map(|c| {
            let a = mean_acf(orig, c, max_lag)?;
            let b = mean_acf(gen, c, max_lag)?;
            Some(
                (1..=max_lag)
                    .map(|lag| (a[lag] - b[lag]).abs())
                    .sum::<f64>()
                    / max_lag as f64,
            )
        })
        .collect())
}

pub fn acd(orig: &InstanceSet, gen: &InstanceSet, max_lag: usize) -> Result<f64> {
    let per: Vec<f64> = acd_per_channel(orig, gen, max_lag)?
        .into_iter()
        .flatten()
        .collect();
    if per.is_empty() {
        return Err(Error::ZeroVariance("every channel is constant".into()));
    }
    Ok(mean(&per))
}

/// Pooled population skewness and (non-excess) kurtosis of a channel.
pub fn pooled_moments(x: &InstanceSet, channel: usize) -> Result<(f64, f64)> {
    let values: Vec<f64> = x.channel_series(channel).flatten().copied().collect();
    if values.len() < 4 {
        return invalid("moments need at least 4 pooled values");
    }
    let m = mean(&values);
    let n = values.len() as f64;
    let (m2, m3, m4) = values.iter().fold((0.0, 0.0, 0.0), |(a, b, c), v| {
        let d = v - m;
        (a + d * d, b + d * d * d, c + d * d * d * d)
    });
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 <= 1e-24 * m.abs().max(1.0).powi(2) {
        return Err(Error::ZeroVariance(format!(
            "channel '{}' has zero pooled variance",
            x.channel_names()[channel]
        )));
    }
    Ok((m3 / m2.powf(1.5), m4 / (m2 * m2)))
}

fn moment_diff(
    orig: &InstanceSet,
    gen: &InstanceSet,
    pick: fn((f64, f64)) -> f64,
) -> Result<Vec<f64>> {
    check_shapes(orig, gen)?;
    (0..orig.n_channels())
        .map(|c| Ok((pick(pooled_moments(gen, c)?) - pick(pooled_moments(orig, c)?)).abs()))
        .collect()
}

pub fn sd_per_channel(orig: &InstanceSet, gen: &InstanceSet) -> Result<Vec<f64>> {
    moment_diff(orig, gen, |m| m.0)
}

pub fn kd_per_channel(orig: &InstanceSet, gen: &InstanceSet) -> Result<Vec<f64>> {
    moment_diff(orig, gen, |m| m.1)
}

pub fn sd(orig: &InstanceSet, gen: &InstanceSet) -> Result<f64> {
    Ok(mean(&sd_per_channel(orig, gen)?))
}

pub fn kd(orig: &InstanceSet, gen: &InstanceSet) -> Result<f64> {
    Ok(mean(&kd_per_channel(orig, gen)?))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Dynamic time warping distance with an optional Sakoe-Chiba band.
pub fn dtw_distance(a: &[f64], b: &[f64], window: Option<usize>, cost: DtwCost) -> f64 {
    dtw_bounded(a, b, window, cost, f64::INFINITY)
}

/// DTW that gives up (returning infinity) once every cell of a DP row exceeds
/// `bound`, expressed in the final distance unit.
fn dtw_bounded(a: &[f64], b: &[f64], window: Option<usize>, cost: DtwCost, bound: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return if n == m { 0.0 } else { f64::INFINITY };
    }
    let w = window.unwrap_or(n.max(m)).max(n.abs_diff(m));
    let local = |x: f64, y: f64| match cost {
        DtwCost::SquaredRoot => (x - y) * (x - y),
        DtwCost::Absolute => (x - y).abs(),
    };
    let raw_bound = match cost {
        DtwCost::SquaredRoot if bound.is_finite() => bound * bound,
        _ => bound,
    };
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        let mut row_min = f64::INFINITY;
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = local(a[i - 1], b[j - 1]) + best;
            row_min = row_min.min(cur[j]);
        }
        if row_min > raw_bound {
            return f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    match cost {
        DtwCost::SquaredRoot => prev[m].sqrt(),
        DtwCost::Absolute => prev[m],
    }
}

fn pair_scores<F>(
    orig: &InstanceSet,
    gen: &InstanceSet,
    pairing: Pairing,
    dist: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64], f64) -> f64 + Sync,
{
    check_shapes(orig, gen)?;
    if pairing == Pairing::Indexed && orig.n_instances() != gen.n_instances() {
        return Err(Error::ShapeMismatch(format!(
            "indexed pairing needs equal set sizes, got {} and {}",
            orig.n_instances(),
            gen.n_instances()
        )));
    }
    Ok((0..orig.n_channels())
        .map(|c| {
            let originals: Vec<&[f64]> = orig.channel_series(c).collect();
            let per_gen: Vec<f64> = (0..gen.n_instances())
                .into_par_iter()
                .map(|g| {
                    let s = gen.series(g, c);
                    match pairing {
                        Pairing::Indexed => dist(s, originals[g], f64::INFINITY),
                        Pairing::Nearest => originals
                            .iter()
                            .fold(f64::INFINITY, |best, o| best.min(dist(s, o, best))),
                    }
                })
                .collect();
            mean(&per_gen)
        })
        .collect())
}

pub fn ed_per_channel(orig: &InstanceSet, gen: &InstanceSet, pairing: Pairing) -> Result<Vec<f64>> {
    pair_scores(orig, gen, pairing, |a, b, _| euclidean(a, b))
}

pub fn dtw_per_channel(
    orig: &InstanceSet,
    gen: &InstanceSet,
    pairing: Pairing,
    window: Option<usize>,
    cost: DtwCost,
) -> Result<Vec<f64>> {
    pair_scores(orig, gen, pairing, |a, b, bound| {
        dtw_bounded(a, b, window, cost, bound)
    })
}

pub fn ed(orig: &InstanceSet, gen: &InstanceSet) -> Result<f64> {
    Ok(mean(&ed_per_channel(orig, gen, Pairing::Nearest)?))
}

pub fn dtw(orig: &InstanceSet, gen: &InstanceSet, window: Option<usize>) -> Result<f64> {
    Ok(mean(&dtw_per_channel(
        orig,
        gen,
        Pairing::Nearest,
        window,
        DtwCost::SquaredRoot,
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    /// `None` for channels the metric skipped.
    pub per_channel: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub channels: Vec<String>,
    pub n_original: usize,
    pub n_generated: usize,
    pub len: usize,
    pub bins: usize,
    pub max_lag: usize,
    pub pairing: Pairing,
    pub dtw_window: Option<usize>,
    pub dtw_cost: DtwCost,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scores: BTreeMap<Metric, MetricScore>,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.scores.get(&m).map(|s| s.mean)
    }

    pub fn means(&self) -> BTreeMap<Metric, f64> {
        self.scores.iter().map(|(m, s)| (*m, s.mean)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn complete(v: Vec<f64>) -> MetricScore {
    MetricScore {
        mean: mean(&v),
        per_channel: v.into_iter().map(Some).collect(),
    }
}

/// Scores `gen` against `orig` on the requested metrics.
pub fn evaluate(
    orig: &InstanceSet,
    gen: &InstanceSet,
    metrics: &[Metric],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    check_shapes(orig, gen)?;
    let bins = cfg.bins.unwrap_or_else(|| default_bins(orig.n_instances()));
    let max_lag = cfg.max_lag.unwrap_or(orig.len() / 2);
    let mut warnings = Vec::new();
    let mut scores = BTreeMap::new();
    for &m in metrics {
        let score = match m {
            Metric::Mdd => complete(mdd_per_channel(orig, gen, bins)?),
            Metric::Acd => {
                let per = acd_per_channel(orig, gen, max_lag)?;
                for (c, v) in per.iter().enumerate() {
                    if v.is_none() {
                        let w =
                            format!("ACD skipped constant channel '{}'", orig.channel_names()[c]);
                        log::warn!("{w}");
                        warnings.push(w);
                    }
                }
                let present: Vec<f64> = per.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::ZeroVariance("every channel is constant".into()));
                }
                MetricScore {
                    mean: mean(&present),
                    per_channel: per,
                }
            }
            Metric::Sd => complete(sd_per_channel(orig, gen)?),
            Metric::Kd => complete(kd_per_channel(orig, gen)?),
            Metric::Ed => complete(ed_per_channel(orig, gen, cfg.pairing)?),
            Metric::Dtw => complete(dtw_per_channel(
                orig,
                gen,
                cfg.pairing,
                cfg.dtw_window,
                cfg.dtw_cost,
            )?),
        };
        scores.insert(m, score);
    }
    Ok(MetricReport {
        scores,
        metadata: ReportMetadata {
            channels: orig.channel_names().to_vec(),
            n_original: orig.n_instances(),
            n_generated: gen.n_instances(),
            len: orig.len(),
            bins,
            max_lag,
            pairing: cfg.pairing,
            dtw_window: cfg.dtw_window,
            dtw_cost: cfg.dtw_cost,
            warnings,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Mean normalized MDD/ACD/SD/KD, if any were scored.
    pub feature_avg: Option<f64>,
    /// Mean normalized ED/DTW, if any were scored.
    pub distance_avg: Option<f64>,
    pub avg_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metrics: Vec<Metric>,
    pub rows: Vec<ComparisonRow>,
}

/// Ranks `1..=n` with ties sharing their average rank; lower is better.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for t in i..=j {
            ranks[idx[t]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    ranks
}

/// Min-max normalizes every metric across models, averages the groups and
/// computes the mean rank of each model.
pub fn normalize_and_rank(raw: &[(String, BTreeMap<Metric, f64>)]) -> Result<ComparisonTable> {
    if raw.len() < 2 {
        return invalid("ranking needs at least 2 models");
    }
    let metrics: Vec<Metric> = raw[0].1.keys().copied().collect();
    if metrics.is_empty() {
        return invalid("no metrics to rank");
    }
    for (name, scores) in raw {
        if scores.keys().copied().collect::<Vec<_>>() != metrics {
            return invalid(format!("model '{name}' has a different metric set"));
        }
        if scores.values().any(|v| !v.is_finite()) {
            return invalid(format!("model '{name}' has a non-finite score"));
        }
    }
    let n = raw.len();
    let mut normalized = vec![vec![0.0; metrics.len()]; n];
    let mut ranks = vec![vec![0.0; metrics.len()]; n];
    for (j, m) in metrics.iter().enumerate() {
        let col: Vec<f64> = raw.iter().map(|(_, s)| s[m]).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r = average_ranks(&col);
        for i in 0..n {
            normalized[i][j] = if hi > lo {
                (col[i] - lo) / (hi - lo)
            } else {
                0.0
            };
            ranks[i][j] = r[i];
        }
    }
    let group_avg = |norm: &[f64], g: MetricGroup| {
        let v: Vec<f64> = metrics
            .iter()
            .zip(norm)
            .filter(|(m, _)| m.group() == g)
            .map(|(_, x)| *x)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let rows = raw
        .iter()
        .enumerate()
        .map(|(i, (name, scores))| ComparisonRow {
            model: name.clone(),
            raw: metrics.iter().map(|m| scores[m]).collect(),
            feature_avg: group_avg(&normalized[i], MetricGroup::Feature),
            distance_avg: group_avg(&normalized[i], MetricGroup::Distance),
            normalized: normalized[i].clone(),
            avg_rank: mean(&ranks[i]),
        })
        .collect();
    Ok(ComparisonTable { metrics, rows })
}

impl ComparisonTable {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(self.metrics.iter().map(|m| m.name().to_string()));
        header.extend(["feature_norm_avg", "distance_norm_avg", "avg_rank"].map(String::from));
        out.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.model.clone()];
            rec.extend(r.raw.iter().map(|v| format!("{v:.6}")));
            rec.push(opt(r.feature_avg));
            rec.push(opt(r.distance_avg));
            rec.push(format!("{:.3}", r.avg_rank));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
