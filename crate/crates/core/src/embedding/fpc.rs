use nalgebra::DMatrix;

use super::{ChannelBasis, FitDiagnostics};
use crate::data::InstanceSet;
use crate::error::{invalid, Result};
use crate::linalg::{column_vec, normalize_sign, orthonormalize_rows, sorted_eigh};

/// Functional principal components of one channel: the top-`k` eigenvectors
/// of the sample covariance of the mean-centered windows.
///
/// The eigenproblem is solved on whichever of the `L x L` covariance or the
/// `I x I` Gram matrix is smaller; both share the nonzero spectrum.
pub fn fit_fpc(x: &InstanceSet, channel: usize, k: usize) -> Result<ChannelBasis> {
    let (n, len) = (x.n_instances(), x.len());
    if n < 2 {
        return invalid("FPC needs at least 2 instances");
    }
    if k < 1 || k > n.min(len) {
        return invalid(format!("k = {k} outside 1..={}", n.min(len)));
    }
    if channel >= x.n_channels() {
        return invalid(format!("channel {channel} out of range"));
    }
    let raw = x.channel_matrix(channel);
    let mean_curve: Vec<f64> = raw.row_mean().iter().copied().collect();
    let centered = DMatrix::from_fn(n, len, |i, t| raw[(i, t)] - mean_curve[t]);
    let dof = (n - 1) as f64;

    let (eigenvalues, mut rows): (Vec<f64>, Vec<Vec<f64>>) = if len <= n {
        let cov = centered.transpose() * &centered / dof;
        let (vals, vecs) = sorted_eigh(cov);
        (
            vals[..k].to_vec(),
            (0..k).map(|j| column_vec(&vecs, j)).collect(),
        )
    } else {
        let gram = &centered * centered.transpose();
        let (vals, vecs) = sorted_eigh(gram);
        let scale = vals[0].abs().max(f64::MIN_POSITIVE);
        let rows = (0..k)
            .map(|j| {
                if vals[j] > 1e-12 * scale {
                    let v = centered.transpose() * vecs.column(j);
                    let s = vals[j].sqrt();
                    v.iter().map(|x| x / s).collect()
                } else {
                    vec![0.0; len]
                }
            })
            .collect();
        (vals[..k].iter().map(|v| v / dof).collect(), rows)
    };

    let top = eigenvalues[0].abs().max(f64::MIN_POSITIVE);
    let rank = eigenvalues.iter().filter(|&&v| v > 1e-12 * top).count();
    let mut warnings = Vec::new();
    if rank < k {
        let msg = format!(
            "channel '{}': only {rank} of {k} eigenvalues are nonzero",
            x.channel_names()[channel]
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    orthonormalize_rows(&mut rows, len);
    rows.iter_mut().for_each(|r| normalize_sign(r));

    Ok(ChannelBasis {
        name: x.channel_names()[channel].clone(),
        k,
        mean_curve,
        basis: rows,
        eigenvalues: Some(eigenvalues.into_iter().map(|v| v.max(0.0)).collect()),
        diagnostics: FitDiagnostics {
            iterations: 1,
            converged: true,
            warnings,
        },
    })
}
