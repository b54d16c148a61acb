//! Dense symmetric linear algebra used by the variational posterior:
//! Cholesky factorization with jitter escalation, triangular solves, and the
//! reverse-mode rule for the Cholesky factor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numerical(format!(
                        "cholesky pivot {i} is {sum:.3e}, matrix not positive definite"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Cholesky with escalating diagonal jitter: `base`, then x10 per retry.
/// Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(
    a: ArrayView2<f64>,
    base_jitter: f64,
    retries: usize,
) -> Result<(Array2<f64>, f64)> {
    let n = a.nrows();
    let mut jitter = base_jitter;
    let mut last_err = None;
    for _ in 0..=retries {
        let mut padded = a.to_owned();
        for i in 0..n {
            padded[[i, i]] += jitter;
        }
        match cholesky(padded.view()) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last_err = Some(e),
        }
        jitter *= 10.0;
    }
    Err(last_err.unwrap_or_else(|| Error::Numerical("cholesky failed".into())))
}

/// Solves `L x = b` for lower-triangular `L`, one right-hand side.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut sum = x[i];
        for k in 0..i {
            sum -= l[[i, k]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut sum = x[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Column-wise `L^{-1} B`.
pub fn solve_lower_multi(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&solve_lower(l, col));
    }
    out
}

/// Column-wise `L^{-T} B`.
pub fn solve_lower_transpose_multi(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&solve_lower_transpose(l, col));
    }
    out
}

/// Reverse-mode rule for `L = chol(S)`: maps the adjoint of `L` to the
/// adjoint of `S` (Murray 2016). `l_bar` may have garbage above the
/// diagonal; only the lower triangle is read.
pub fn cholesky_rev(l: ArrayView2<f64>, l_bar: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // P = Phi(L^T Lbar): lower triangle with halved diagonal.
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.0;
            // (L^T Lbar)[i,j] = sum_k L[k,i] * Lbar[k,j]; Lbar lower => k >= j.
            for k in i.max(j)..n {
                sum += l[[k, i]] * l_bar[[k, j]];
            }
            p[[i, j]] = if i == j { 0.5 * sum } else { sum };
        }
    }
    // S_bar = 0.5 * L^{-T} (P + P^T) L^{-1}, computed as two triangular solves.
    let mut b = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            b[[i, j]] = p[[i, j]] + p[[j, i]];
        }
    }
    let x = solve_lower_transpose_multi(l, b.view()); // X = L^{-T} B
    // Y = X L^{-1}  <=>  Y L = X  <=>  L^T Y^T = X^T.
    let y_t = solve_lower_transpose_multi(l, x.t().to_owned().view());
    let mut s_bar = y_t.t().to_owned();
    s_bar.mapv_inplace(|v| 0.5 * v);
    // Symmetrize: S is constrained symmetric.
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = 0.5 * (s_bar[[i, j]] + s_bar[[j, i]]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use rand::Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut a = Array2::<f64>::zeros((n, n));
        a.mapv_inplace(|_| 0.0);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut s = b.dot(&b.t());
        for i in 0..n {
            s[[i, i]] += n as f64;
        }
        s
    }

    #[test]
    fn factor_matches_nalgebra() {
        let mut rng = crate::rng::subsystem_rng(11, "linalg-test");
        for n in [1usize, 2, 5, 9] {
            let s = random_spd(n, &mut rng);
            let l = cholesky(s.view()).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| s[[i, j]]);
            let reference = na.cholesky().expect("spd").l();
            for i in 0..n {
                for j in 0..n {
                    assert_relative_eq!(l[[i, j]], reference[(i, j)], max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn non_pd_is_an_error() {
        let a = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(cholesky(a.view()), Err(Error::Numerical(_))));
    }

    #[test]
    fn jitter_rescues_rank_deficiency() {
        // Duplicate rows: singular without jitter.
        let a = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let (_, used) = cholesky_with_jitter(a.view(), 1e-6, 3).unwrap();
        assert!(used >= 1e-6);
    }

    #[test]
    fn triangular_solves_invert_factor() {
        let mut rng = crate::rng::subsystem_rng(12, "linalg-test");
        let s = random_spd(6, &mut rng);
        let l = cholesky(s.view()).unwrap();
        let b = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let x = solve_lower(l.view(), b.view());
        let back = l.dot(&x);
        for i in 0..6 {
            assert_relative_eq!(back[i], b[i], max_relative = 1e-12);
        }
        let y = solve_lower_transpose(l.view(), b.view());
        let back = l.t().dot(&y);
        for i in 0..6 {
            assert_relative_eq!(back[i], b[i], max_relative = 1e-12);
        }
    }

    /// Finite-difference check of the Cholesky pullback: for
    /// loss = sum(W .* chol(S)), the gradient wrt symmetric S must match
    /// central differences applied to the factorization.
    #[test]
    fn cholesky_rev_matches_finite_differences() {
        let mut rng = crate::rng::subsystem_rng(13, "linalg-test");
        for n in [2usize, 4, 6] {
            let s = random_spd(n, &mut rng);
            let w = Array2::from_shape_fn((n, n), |(i, j)| {
                if i >= j {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let l = cholesky(s.view()).unwrap();
            let s_bar = cholesky_rev(l.view(), w.view());
            let h = 1e-6;
            for i in 0..n {
                for j in 0..=i {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    // Symmetric perturbation of entry (i,j).
                    sp[[i, j]] += h;
                    sm[[i, j]] -= h;
                    if i != j {
                        sp[[j, i]] += h;
                        sm[[j, i]] -= h;
                    }
                    let f = |m: &Array2<f64>| -> f64 {
                        let lc = cholesky(m.view()).unwrap();
                        (&lc * &w).sum()
                    };
                    let fd = (f(&sp) - f(&sm)) / (2.0 * h);
                    // Our s_bar is the gradient wrt the full (symmetric) matrix;
                    // perturbing both (i,j) and (j,i) doubles the off-diagonal.
                    let analytic = if i == j {
                        s_bar[[i, j]]
                    } else {
                        2.0 * s_bar[[i, j]]
                    };
                    assert_relative_eq!(analytic, fd, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }
}
