//! Period-aligned sliding-window segmentation of a long series.
//!
//! The dominant period is read off the autocorrelation function; the window
//! stride `s = max(1, floor((L0 - L) / (I - 1)))` is then snapped to the
//! nearest multiple of that period.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{InstanceSet, RawSeries};
use crate::error::{invalid, Error, Result};

/// Shortest lag accepted as a period; lag-1 structure is trend, not cycle.
pub const MIN_PERIOD: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    /// Window length `L`.
    pub window_len: usize,
    /// Number of windows `I`.
    pub n_instances: usize,
    /// Dominant period `P`, if one was found or given.
    pub period: Option<usize>,
    /// Stride before snapping to the period.
    pub raw_step: usize,
    /// Stride `s` actually used.
    pub step: usize,
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PeriodChoice {
    /// Estimate from the first channel's ACF.
    #[default]
    Auto,
    Fixed(usize),
    /// Do not align the stride to any period.
    Disabled,
}

/// Biased, mean-removed sample autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 * max_lag || n < 2 {
        return invalid(format!(
            "series of length {n} is too short for max_lag {max_lag}"
        ));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom <= f64::EPSILON * n as f64 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance("series is constant".into()));
    }
    Ok((0..=max_lag)
        .map(|lag| {
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect())
}

/// Two-sided 95% white-noise band multiplier, Bonferroni-corrected over
/// `n_lags` simultaneous tests. Never below 2.
pub fn significance_z(n_lags: usize) -> f64 {
    let alpha = 0.05 / n_lags.max(1) as f64;
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    z.max(2.0)
}

/// Dominant period for windows of length `window_len`: the highest local ACF
/// maximum with `2 <= lag < window_len / 2` that clears the significance band.
pub fn estimate_period(series: &[f64], window_len: usize) -> Result<usize> {
    let n = series.len();
    // candidate lags satisfy 2 * lag < window_len
    let last_candidate = (window_len.saturating_sub(1)) / 2;
    if last_candidate < MIN_PERIOD {
        return Err(Error::NoPeriodicity);
    }
    let max_lag = (last_candidate + 1).min(n / 2);
    if max_lag < MIN_PERIOD {
        return Err(Error::NoPeriodicity);
    }
    let acf = autocorrelation(series, max_lag)?;
    let last_candidate = last_candidate.min(max_lag);
    let n_candidates = last_candidate + 1 - MIN_PERIOD;
    let threshold = significance_z(n_candidates) / (n as f64).sqrt();

    let mut best: Option<(usize, f64)> = None;
    for lag in MIN_PERIOD..=last_candidate {
        let v = acf[lag];
        let rises = v > acf[lag - 1];
        let not_falling_after = lag + 1 > max_lag || v >= acf[lag + 1];
        if rises && not_falling_after && v > threshold && best.is_none_or(|(_, b)| v > b) {
            best = Some((lag, v));
        }
    }
    best.map(|(lag, _)| lag).ok_or(Error::NoPeriodicity)
}

/// Unadjusted stride `max(1, floor((L0 - L) / (I - 1)))`.
pub fn raw_step(total_len: usize, window_len: usize, n_instances: usize) -> usize {
    ((total_len - window_len) / (n_instances - 1)).max(1)
}

/// Snaps `raw` to the nearest multiple of `period` (ties go to the smaller
/// one), then shrinks to the largest multiple that still fits `I` windows.
/// Falls back to `raw` if no positive multiple fits.
pub fn align_step(
    raw: usize,
    period: usize,
    total_len: usize,
    window_len: usize,
    n_instances: usize,
) -> usize {
    let fits = |s: usize| (n_instances - 1) * s + window_len <= total_len;
    let lower = raw / period * period;
    let upper = lower + period;
    let nearest = if lower == 0 || upper - raw < raw - lower {
        upper
    } else {
        lower
    };
    if fits(nearest) {
        return nearest;
    }
    let largest = (total_len - window_len) / (n_instances - 1) / period * period;
    if largest >= period {
        largest
    } else {
        raw
    }
}

pub fn segment(
    series: &RawSeries,
    window_len: usize,
    n_instances: usize,
) -> Result<(InstanceSet, SegmentationPlan)> {
    segment_with(series, window_len, n_instances, PeriodChoice::Auto)
}

pub fn segment_with(
    series: &RawSeries,
    window_len: usize,
    n_instances: usize,
    period: PeriodChoice,
) -> Result<(InstanceSet, SegmentationPlan)> {
    let total = series.len();
    if n_instances < 2 {
        return invalid("segmentation needs at least 2 windows");
    }
    if window_len < 2 || window_len >= total {
        return invalid(format!(
            "window length {window_len} must satisfy 2 <= L < L0 = {total}"
        ));
    }
    if n_instances - 1 + window_len > total {
        return invalid(format!(
            "{n_instances} windows of length {window_len} do not fit in {total} samples"
        ));
    }
    let period = match period {
        PeriodChoice::Disabled => None,
        PeriodChoice::Fixed(p) if p >= 1 => Some(p),
        PeriodChoice::Fixed(_) => return invalid("period must be positive"),
        PeriodChoice::Auto => match estimate_period(&series.channels()[0].values, window_len) {
            Ok(p) => Some(p),
            Err(Error::NoPeriodicity) | Err(Error::ZeroVariance(_)) => None,
            Err(e) => return Err(e),
        },
    };
    let raw = raw_step(total, window_len, n_instances);
    let step = match period {
        Some(p) => align_step(raw, p, total, window_len, n_instances),
        None => raw,
    };
    let offsets: Vec<usize> = (0..n_instances).map(|i| i * step).collect();

    let channels = series.channels();
    let mut data = Vec::with_capacity(n_instances * channels.len() * window_len);
    for &o in &offsets {
        for ch in channels {
            data.extend_from_slice(&ch.values[o..o + window_len]);
        }
    }
    let set = InstanceSet::new(data, n_instances, series.channel_names(), window_len)?
        .with_offsets(offsets.clone())?;
    let plan = SegmentationPlan {
        window_len,
        n_instances,
        period,
        raw_step: raw,
        step,
        offsets,
    };
    Ok((set, plan))
}
