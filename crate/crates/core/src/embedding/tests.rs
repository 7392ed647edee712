use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn random_set(n: usize, len: usize, seed: u64) -> InstanceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InstanceSet::univariate(
        "y",
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    )
    .unwrap()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Two orthogonal modes whose coefficients have sample variances 4 and 1
/// and zero sample covariance.
fn two_mode_set() -> InstanceSet {
    let len = 16;
    let m1 = unit(
        (0..len)
            .map(|t| (2.0 * PI * t as f64 / len as f64).sin())
            .collect(),
    );
    let m2 = unit(
        (0..len)
            .map(|t| (2.0 * PI * t as f64 / len as f64).cos())
            .collect(),
    );
    let s3 = 3f64.sqrt();
    let a = [s3, -s3, s3, -s3];
    let b = [1.0, 1.0, -1.0, -1.0].map(|v: f64| v * 0.75f64.sqrt());
    let rows = (0..4)
        .map(|i| {
            (0..len)
                .map(|t| 5.0 + a[i] * m1[t] + b[i] * m2[t])
                .collect()
        })
        .collect();
    InstanceSet::univariate("y", rows).unwrap()
}

#[test]
fn rank_one_data_recovers_direction() {
    let v = unit(vec![0.5, -1.0, 2.0, 0.25, 1.0]);
    let x = InstanceSet::univariate(
        "y",
        [1.0, 2.0, 3.0]
            .iter()
            .map(|a| v.iter().map(|x| a * x).collect())
            .collect(),
    )
    .unwrap();
    let cb = fit_fpc(&x, 0, 1).unwrap();
    for (a, b) in cb.basis[0].iter().zip(&v) {
        assert!((a - b).abs() < 1e-10);
    }
    let ev = cb.eigenvalues.as_ref().unwrap();
    assert!((ev[0] - 1.0).abs() < 1e-10);
    let sys = BasisSystem::new(Method::Fpc, vec![cb]);
    assert!((variance_retained(&x, &sys).unwrap()[0] - 1.0).abs() < 1e-10);

    let ica = fit_fastica(&x, 0, 1, &FastIcaParams::default()).unwrap();
    for (a, b) in ica.basis[0].iter().zip(&v) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn two_mode_variance_retained() {
    let x = two_mode_set();
    // oracle: retained(k=1) = 4 / (4 + 1)
    let cb = fit_fpc(&x, 0, 2).unwrap();
    let ev = cb.eigenvalues.clone().unwrap();
    assert!((ev[0] - 4.0).abs() < 1e-9 && (ev[1] - 1.0).abs() < 1e-9);
    let r1 = variance_retained(&x, &BasisSystem::new(Method::Fpc, vec![cb.truncated(1)])).unwrap();
    assert!((r1[0] - 0.8).abs() < 1e-9);
    let r2 = variance_retained(&x, &BasisSystem::new(Method::Fpc, vec![cb])).unwrap();
    assert!((r2[0] - 1.0).abs() < 1e-9);
}

#[test]
fn select_k_sweeps_targets() {
    let x = two_mode_set();
    let p = FastIcaParams::default();
    assert_eq!(select_k(&x, Method::Fpc, 0.75, 3, &p).unwrap().k, vec![1]);
    assert_eq!(select_k(&x, Method::Fpc, 0.9, 3, &p).unwrap().k, vec![2]);
    assert!(select_k(&x, Method::Fpc, 0.0, 3, &p).is_err());
    assert!(select_k(&x, Method::Fpc, 1.5, 3, &p).is_err());
}

#[test]
fn select_k_full_rank_hits_cap() {
    let x = random_set(6, 20, 1);
    let sel = select_k(&x, Method::Fpc, 1.0, 50, &FastIcaParams::default()).unwrap();
    assert_eq!(sel.k, vec![5]);
    assert!(sel.warnings.is_empty(), "{:?}", sel.warnings);
}

#[test]
fn select_k_unreachable_warns() {
    let x = random_set(10, 20, 2);
    let sel = select_k(&x, Method::Fpc, 0.999, 2, &FastIcaParams::default()).unwrap();
    assert_eq!(sel.k, vec![2]);
    assert_eq!(sel.warnings.len(), 1);
}

#[test]
fn select_k_is_monotone_in_target() {
    let x = random_set(12, 30, 3);
    let p = FastIcaParams::default();
    let mut prev = 0;
    for target in [0.2, 0.4, 0.6, 0.8, 0.95, 1.0] {
        let k = select_k(&x, Method::Fpc, target, 11, &p).unwrap().k[0];
        assert!(k >= prev);
        prev = k;
    }
}

#[test]
fn explicit_k_is_honored() {
    let x = random_set(30, 50, 4);
    let sys = fit_basis(&x, Method::Fpc, &[3], &FastIcaParams::default()).unwrap();
    assert_eq!(sys.total_k(), 3);
    let sys = fit_basis(&x, Method::Fica, &[3], &FastIcaParams::default()).unwrap();
    assert_eq!(sys.total_k(), 3);
}

#[test]
fn full_rank_round_trip_both_branches() {
    for (n, len) in [(8, 20), (30, 10)] {
        let x = random_set(n, len, 5);
        let k = k_cap(&x);
        let sys = fit_basis(&x, Method::Fpc, &[k], &FastIcaParams::default()).unwrap();
        let back = reconstruct(&embed(&x, &sys).unwrap(), &sys).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((variance_retained(&x, &sys).unwrap()[0] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn three_harmonic_modes_recovered_exactly() {
    let len = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let modes: Vec<Vec<f64>> = (1..=3)
        .map(|h| {
            (0..len)
                .map(|t| (2.0 * PI * h as f64 * t as f64 / len as f64).sin())
                .collect()
        })
        .collect();
    let rows = (0..30)
        .map(|_| {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            (0..len)
                .map(|t| 1.0 + (0..3).map(|j| c[j] * modes[j][t]).sum::<f64>())
                .collect()
        })
        .collect();
    let x = InstanceSet::univariate("y", rows).unwrap();
    let sys = fit_basis(&x, Method::Fpc, &[3], &FastIcaParams::default()).unwrap();
    assert!(variance_retained(&x, &sys).unwrap()[0] >= 1.0 - 1e-8);
    let back = reconstruct(&embed(&x, &sys).unwrap(), &sys).unwrap();
    let err = x
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn k_out_of_range() {
    let x = random_set(5, 10, 6);
    assert!(fit_fpc(&x, 0, 0).is_err());
    assert!(fit_fpc(&x, 0, 6).is_err());
    assert!(fit_fastica(&x, 0, 6, &FastIcaParams::default()).is_err());
}

#[test]
fn rank_deficient_fit_warns_but_succeeds() {
    let x = random_set(5, 10, 7);
    let cb = fit_fpc(&x, 0, 5).unwrap();
    assert!(!cb.diagnostics.warnings.is_empty());
    assert_eq!(cb.basis.len(), 5);
    let g = cb.gram();
    for (i, row) in g.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-8);
        }
    }
}

fn sources(len: usize) -> [Vec<f64>; 2] {
    let sine = (0..len)
        .map(|t| (2.0 * PI * t as f64 / 20.0).sin())
        .collect();
    let square = (0..len)
        .map(|t| if (t % 37) < 18 { 1.0 } else { -1.0 })
        .collect();
    [sine, square]
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn fastica_separates_sine_and_square() {
    let len = 500;
    let src = sources(len);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = (0..6)
        .map(|_| {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            (0..len).map(|t| a * src[0][t] + b * src[1][t]).collect()
        })
        .collect();
    let x = InstanceSet::univariate("y", rows).unwrap();
    let cb = fit_fastica(&x, 0, 2, &FastIcaParams::default()).unwrap();
    assert!(cb.diagnostics.converged);
    let c00 = pearson(&cb.basis[0], &src[0]).abs();
    let c01 = pearson(&cb.basis[0], &src[1]).abs();
    let c10 = pearson(&cb.basis[1], &src[0]).abs();
    let c11 = pearson(&cb.basis[1], &src[1]).abs();
    let best = (c00.min(c11)).max(c01.min(c10));
    assert!(best >= 0.95, "{c00} {c01} {c10} {c11}");
}

#[test]
fn fastica_forced_non_convergence() {
    let x = random_set(10, 200, 12);
    let params = FastIcaParams {
        max_iter: 1,
        tol: 1e-12,
        seed: 3,
    };
    let cb = fit_fastica(&x, 0, 4, &params).unwrap();
    assert!(!cb.diagnostics.converged);
    assert_eq!(cb.diagnostics.iterations, 1);
}

#[test]
fn fastica_is_deterministic_per_seed() {
    let x = random_set(10, 100, 13);
    let p = FastIcaParams {
        seed: 42,
        ..Default::default()
    };
    assert_eq!(
        fit_fastica(&x, 0, 3, &p).unwrap(),
        fit_fastica(&x, 0, 3, &p).unwrap()
    );
}

#[test]
fn orthonormal_projection_and_centering() {
    let x = random_set(10, 30, 14);
    let sys = fit_basis(&x, Method::Fpc, &[3], &FastIcaParams::default()).unwrap();
    let cb = &sys.channels[0];
    let window: Vec<f64> = cb
        .mean_curve
        .iter()
        .zip(&cb.basis[0])
        .map(|(m, b)| m + 2.0 * b)
        .collect();
    let probe = InstanceSet::univariate("y", vec![window, cb.mean_curve.clone()]).unwrap();
    let t = embed(&probe, &sys).unwrap();
    let want = [[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
    for (row, w) in t.rows.iter().zip(want) {
        for (a, b) in row.iter().zip(w) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_row_reconstructs_mean_curve() {
    let x = random_set(10, 30, 15);
    let sys = fit_basis(&x, Method::Fica, &[3], &FastIcaParams::default()).unwrap();
    let t = EmbeddingTable::new(vec![vec![0.0; 3]], sys.spans()).unwrap();
    let back = reconstruct(&t, &sys).unwrap();
    assert_eq!(back.series(0, 0), sys.channels[0].mean_curve.as_slice());
}

#[test]
fn oblique_least_squares_projection_is_idempotent() {
    let len = 12;
    let basis = vec![
        unit((0..len).map(|t| 1.0 + t as f64).collect()),
        unit((0..len).map(|t| (t as f64 * 0.7).cos() + 0.5).collect()),
        unit((0..len).map(|t| if t < 6 { 1.0 } else { 0.2 }).collect()),
    ];
    let cb = ChannelBasis {
        name: "y".into(),
        k: 3,
        mean_curve: vec![0.3; len],
        basis,
        eigenvalues: None,
        diagnostics: FitDiagnostics::default(),
    };
    // rows are oblique
    assert!(cb.gram()[0][1].abs() > 0.1);
    let sys = BasisSystem::new(Method::Fica, vec![cb]);
    let x = random_set(7, len, 16);
    let once = reconstruct(&embed(&x, &sys).unwrap(), &sys).unwrap();
    let twice = reconstruct(&embed(&once, &sys).unwrap(), &sys).unwrap();
    for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
        assert!((a - b).abs() < 1e-9);
    }
    // a curve inside the span comes back unchanged
    let inside: Vec<f64> = (0..len)
        .map(|t| 0.3 + 2.0 * sys.channels[0].basis[0][t] - sys.channels[0].basis[1][t])
        .collect();
    let probe = InstanceSet::univariate("y", vec![inside.clone(), inside.clone()]).unwrap();
    let e = embed(&probe, &sys).unwrap();
    assert!((e.rows[0][0] - 2.0).abs() < 1e-9 && (e.rows[0][1] + 1.0).abs() < 1e-9);
}

#[test]
fn table_shape_independent_of_length() {
    for len in [50, 100] {
        let x = random_set(20, len, 17);
        let sys = fit_basis(&x, Method::Fpc, &[4], &FastIcaParams::default()).unwrap();
        let t = embed(&x, &sys).unwrap();
        assert_eq!((t.n_rows(), t.width()), (20, 4));
    }
}

#[test]
fn multichannel_spans_concatenate() {
    let a = random_set(10, 30, 18);
    let b = random_set(10, 30, 19);
    let x = InstanceSet::stack_channels(&[a, b]).unwrap();
    let sys = fit_basis(&x, Method::Fpc, &[3, 2], &FastIcaParams::default()).unwrap();
    let t = embed(&x, &sys).unwrap();
    assert_eq!(t.width(), 5);
    assert_eq!(t.channel_spans[1].range(), 3..5);
}

#[test]
fn mismatched_shapes_rejected() {
    let x = random_set(10, 30, 20);
    let sys = fit_basis(&x, Method::Fpc, &[3], &FastIcaParams::default()).unwrap();
    let y = random_set(10, 31, 20);
    assert!(matches!(embed(&y, &sys), Err(Error::ShapeMismatch(_))));
    let t = EmbeddingTable::new(
        vec![vec![0.0; 2]],
        vec![ChannelSpan {
            name: "y".into(),
            start: 0,
            k: 2,
        }],
    )
    .unwrap();
    assert!(reconstruct(&t, &sys).is_err());
}

#[test]
fn zero_variance_channel_rejected() {
    let x = InstanceSet::univariate("y", vec![vec![1.0; 5]; 4]).unwrap();
    let sys = fit_basis(&x, Method::Fpc, &[1], &FastIcaParams::default()).unwrap();
    assert!(matches!(
        variance_retained(&x, &sys),
        Err(Error::ZeroVariance(_))
    ));
}

#[test]
fn persistence_round_trip() {
    let x = random_set(10, 30, 21);
    let sys = fit_basis(&x, Method::Fica, &[3], &FastIcaParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    sys.save(dir.path().join("basis.json")).unwrap();
    assert_eq!(
        BasisSystem::load(dir.path().join("basis.json")).unwrap(),
        sys
    );
    let t = embed(&x, &sys)
        .unwrap()
        .with_labels(vec!["y".into(); 10])
        .unwrap();
    t.save(dir.path().join("table.csv")).unwrap();
    let back = EmbeddingTable::load(dir.path().join("table.csv")).unwrap();
    assert_eq!(back, t);
}

#[test]
fn fpc_coefficient_norm_matches_curve_norm() {
    let x = random_set(9, 40, 22);
    let k = k_cap(&x);
    let sys = fit_basis(&x, Method::Fpc, &[k], &FastIcaParams::default()).unwrap();
    let t = embed(&x, &sys).unwrap();
    for (i, row) in t.rows.iter().enumerate() {
        let coef: f64 = row.iter().map(|v| v * v).sum();
        let curve: f64 = x
            .series(i, 0)
            .iter()
            .zip(&sys.channels[0].mean_curve)
            .map(|(v, m)| (v - m).powi(2))
            .sum();
        assert!((coef - curve).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fpc_basis_invariants(n in 3usize..15, len in 3usize..40, seed in 0u64..1000) {
        let x = random_set(n, len, seed);
        let k = k_cap(&x);
        let cb = fit_fpc(&x, 0, k).unwrap();
        let g = cb.gram();
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((v - e).abs() < 1e-8);
            }
        }
        let ev = cb.eigenvalues.clone().unwrap();
        prop_assert!(ev.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        for row in &cb.basis {
            let big = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            prop_assert!(big > 0.0);
        }
        let mut prev = 0.0;
        for kk in 1..=k {
            let r = variance_retained(&x, &BasisSystem::new(Method::Fpc, vec![cb.truncated(kk)])).unwrap()[0];
            prop_assert!(r >= prev - 1e-12);
            prev = r;
        }
    }
}
