use nalgebra::{DMatrix, DVector};

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
pub(crate) fn sorted_eigh(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub(crate) fn normalize_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes from `v` its components along every row of `basis` (twice, for
/// numerical stability) and returns the remaining norm.
pub(crate) fn orthogonalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    norm(v)
}

/// Re-orthonormalizes rows in order; rows that collapse are replaced with the
/// first canonical direction not yet spanned.
pub(crate) fn orthonormalize_rows(rows: &mut Vec<Vec<f64>>, dim: usize) {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let mut canonical = 0;
    for mut v in rows.drain(..) {
        let n = orthogonalize_against(&mut v, &out);
        if n > 1e-10 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
            continue;
        }
        loop {
            assert!(canonical < dim, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; dim];
            e[canonical] = 1.0;
            canonical += 1;
            let n = orthogonalize_against(&mut e, &out);
            if n > 1e-6 {
                e.iter_mut().for_each(|x| *x /= n);
                out.push(e);
                break;
            }
        }
    }
    *rows = out;
}

pub(crate) fn column_vec(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}

/// Inverse square root of a symmetric positive definite matrix.
pub(crate) fn inv_sqrt_spd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(1e-300).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}
