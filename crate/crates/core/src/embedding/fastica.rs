use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ChannelBasis, FitDiagnostics};
use crate::data::InstanceSet;
use crate::error::{invalid, Result};
use crate::linalg::{column_vec, dot, inv_sqrt_spd, norm, normalize_sign, sorted_eigh};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastIcaParams {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for FastIcaParams {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Temporally independent components of one channel.
///
/// The centered windows are read as `L` samples of an `I`-variate signal,
/// whitened down to `k` dimensions, and unmixed with symmetric fixed-point
/// iterations under the log-cosh contrast. Components come back as unit-norm
/// curves, sign-normalized, ordered by the variance each one retains alone.
pub fn fit_fastica(
    x: &InstanceSet,
    channel: usize,
    k: usize,
    params: &FastIcaParams,
) -> Result<ChannelBasis> {
    let (n, len) = (x.n_instances(), x.len());
    if n < 2 {
        return invalid("FastICA needs at least 2 instances");
    }
    if k < 1 || k > n.min(len) {
        return invalid(format!("k = {k} outside 1..={}", n.min(len)));
    }
    if channel >= x.n_channels() {
        return invalid(format!("channel {channel} out of range"));
    }
    if params.max_iter == 0 || params.tol <= 0.0 {
        return invalid("FastICA needs max_iter >= 1 and tol > 0");
    }
    let raw = x.channel_matrix(channel);
    let mean_curve: Vec<f64> = raw.row_mean().iter().copied().collect();
    // L x I: time points are samples, instances are variables
    let samples = DMatrix::from_fn(len, n, |t, i| raw[(i, t)] - mean_curve[t]);
    let lf = len as f64;

    let second_moment = samples.transpose() * &samples / lf;
    let (vals, vecs) = sorted_eigh(second_moment);
    let top = vals[0].abs().max(f64::MIN_POSITIVE);
    let mut warnings = Vec::new();
    let weak = vals[..k].iter().filter(|&&v| v <= 1e-12 * top).count();
    if weak > 0 {
        let msg = format!(
            "channel '{}': {weak} whitened direction(s) carry no variance",
            x.channel_names()[channel]
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    // whitened signals, L x k
    let mut whitened = DMatrix::zeros(len, k);
    for (j, v) in vals.iter().take(k).enumerate() {
        let s = v.max(1e-12 * top).sqrt();
        let col = &samples * vecs.column(j) / s;
        whitened.set_column(j, &col);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(init);
    let mut best = (f64::INFINITY, w.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        iterations = it;
        let proj = &whitened * w.transpose(); // L x k
        let g = proj.map(f64::tanh);
        let g_prime_mean: Vec<f64> = (0..k)
            .map(|j| g.column(j).iter().map(|v| 1.0 - v * v).sum::<f64>() / lf)
            .collect();
        let mut next = g.transpose() * &whitened / lf; // k x k
        for j in 0..k {
            for c in 0..k {
                next[(j, c)] -= g_prime_mean[j] * w[(j, c)];
            }
        }
        let next = symmetric_decorrelation(next);
        let change = (0..k)
            .map(|j| (dot_rows(&next, &w, j).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < best.0 {
            best = (change, w.clone());
        }
        if change < params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        w = best.1;
        let msg = format!(
            "channel '{}': FastICA did not converge in {} iterations",
            x.channel_names()[channel],
            params.max_iter
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let sources = &whitened * w.transpose(); // L x k
    let total: f64 = samples.iter().map(|v| v * v).sum();
    let mut comps: Vec<(f64, Vec<f64>)> = (0..k)
        .map(|j| {
            let mut c = column_vec(&sources, j);
            let nrm = norm(&c);
            if nrm > 0.0 {
                c.iter_mut().for_each(|v| *v /= nrm);
            }
            normalize_sign(&mut c);
            // variance this single unit-norm curve reproduces
            let captured: f64 = (0..n)
                .map(|i| {
                    let p: f64 = (0..len).map(|t| samples[(t, i)] * c[t]).sum();
                    p * p
                })
                .sum();
            (if total > 0.0 { captured / total } else { 0.0 }, c)
        })
        .collect();
    comps.sort_by(|a, b| b.0.total_cmp(&a.0));

    Ok(ChannelBasis {
        name: x.channel_names()[channel].clone(),
        k,
        mean_curve,
        basis: comps.into_iter().map(|(_, c)| c).collect(),
        eigenvalues: None,
        diagnostics: FitDiagnostics {
            iterations,
            converged,
            warnings,
        },
    })
}

fn dot_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, r: usize) -> f64 {
    let ra: Vec<f64> = a.row(r).iter().copied().collect();
    let rb: Vec<f64> = b.row(r).iter().copied().collect();
    dot(&ra, &rb)
}

/// `(W W^T)^{-1/2} W`
fn symmetric_decorrelation(w: DMatrix<f64>) -> DMatrix<f64> {
    inv_sqrt_spd(&w * w.transpose()) * w
}
