//! Small dense symmetric eigen-solvers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const POWER_MAX_ITERATIONS: usize = 100_000;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Full eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching eigenvector columns.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);

    let off = |a: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > 1e-15 * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual: off(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = v.column(i).into_owned();
        canonical_sign(&mut col);
        vectors.set_column(c, &col);
    }
    Ok((values, vectors))
}

/// Flip `u` so its largest-magnitude entry is positive.
pub fn canonical_sign(u: &mut DVector<f64>) {
    if let Some((_, &x)) = u
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    {
        if x < 0.0 {
            u.neg_mut();
        }
    }
}

fn residual(m: &DMatrix<f64>, u: &DVector<f64>, lambda: f64) -> f64 {
    (m * u - u * lambda).norm()
}

/// Algebraically largest eigenpair of a symmetric matrix.
///
/// Power iteration on `M + σI` (σ = ‖M‖_F, so the shifted spectrum is
/// non-negative) followed by Rayleigh-quotient refinement. Converged when
/// `‖Mu − λu‖ ≤ 1e-8·‖M‖_F`.
pub fn leading_eigvec(m: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let norm = m.norm();
    let start = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i + 1) as f64).sin()).normalize();
    if norm == 0.0 {
        return Ok((start, 0.0));
    }
    // A start orthogonal to the top eigenspace converges to the wrong pair
    // (e.g. a multiple of I minus the start's own projector), so a second
    // start, pseudo-random but seeded by the matrix bits, is run as well and
    // the larger Rayleigh quotient kept.
    let seed = m.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, x| {
        (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alt = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)).normalize();
    let a = power_rayleigh(m, start, norm)?;
    let b = power_rayleigh(m, alt, norm)?;
    Ok(if b.1 > a.1 + 1e-12 * norm { b } else { a })
}

fn power_rayleigh(m: &DMatrix<f64>, start: DVector<f64>, norm: f64) -> Result<(DVector<f64>, f64)> {
    let n = m.nrows();
    let mut u = start;
    let tol = 1e-8 * norm;
    let polish = 1e-13 * norm;
    let shift = norm;

    let mut lambda = u.dot(&(m * &u));
    let mut it = 0;
    while residual(m, &u, lambda) > tol.max(polish) {
        if it == POWER_MAX_ITERATIONS {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: residual(m, &u, lambda),
            });
        }
        let w = m * &u + &u * shift;
        u = w.normalize();
        lambda = u.dot(&(m * &u));
        it += 1;
        // once close, hand over to Rayleigh-quotient iteration
        if residual(m, &u, lambda) < 1e-4 * norm {
            break;
        }
    }

    for _ in 0..8 {
        let r = residual(m, &u, lambda);
        if r <= polish {
            break;
        }
        let shifted = m - DMatrix::identity(n, n) * lambda;
        let Some(y) = shifted.lu().solve(&u) else {
            break;
        };
        let yn = y.norm();
        if !yn.is_finite() || yn == 0.0 {
            break;
        }
        let cand = y / yn;
        let cl = cand.dot(&(m * &cand));
        // stay on the same eigenpair
        if cl < lambda - 10.0 * r || residual(m, &cand, cl) >= r {
            break;
        }
        u = cand;
        lambda = cl;
    }

    // finish with plain power steps if refinement stalled above tolerance
    while residual(m, &u, lambda) > tol {
        if it == POWER_MAX_ITERATIONS {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: residual(m, &u, lambda),
            });
        }
        let w = m * &u + &u * shift;
        u = w.normalize();
        lambda = u.dot(&(m * &u));
        it += 1;
    }
    canonical_sign(&mut u);
    Ok((u, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn jacobi_reconstructs() {
        for seed in 0..5 {
            let m = random_symmetric(12, seed);
            let (vals, vecs) = jacobi_eigen(&m).unwrap();
            let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
            assert!((rec - &m).norm() < 1e-12);
            assert!((vecs.transpose() * &vecs - DMatrix::identity(12, 12)).norm() < 1e-12);
            assert!(vals.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let m = random_symmetric(9, 42);
        let (vals, _) = jacobi_eigen(&m).unwrap();
        let mut reference: Vec<f64> = m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in vals.iter().zip(reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_spectrum_orthogonal_to_start() {
        let n = 20;
        let mut m = DMatrix::<f64>::identity(n, n);
        for _ in 0..n - 1 {
            let (u, l) = leading_eigvec(&m).unwrap();
            assert!((l - 1.0).abs() < 1e-8, "eigenvalue {l}");
            m.ger(-1.0, &u, &u, 1.0);
        }
    }

    #[test]
    fn diagonal_leading_pair() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let (u, l) = leading_eigvec(&m).unwrap();
        assert!((l - 3.0).abs() < 1e-10);
        assert!((u[0].abs() - 1.0).abs() < 1e-8 && u[1].abs() < 1e-8);
    }

    #[test]
    fn rank_one_leading_pair() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let (u, l) = leading_eigvec(&(&v * v.transpose())).unwrap();
        assert!((l - v.norm_squared()).abs() < 1e-10);
        assert!(1.0 - u.dot(&v).abs() / v.norm() < 1e-12);
    }

    #[test]
    fn leading_matches_jacobi_on_random_matrices() {
        for seed in 0..20 {
            let m = random_symmetric(20, 100 + seed);
            let (vals, vecs) = jacobi_eigen(&m).unwrap();
            let (u, l) = leading_eigvec(&m).unwrap();
            assert!((l - vals[0]).abs() < 1e-7, "seed {seed}");
            let v0 = vecs.column(0).into_owned();
            assert!((&u - &v0).norm() < 1e-7, "seed {seed}");
            assert!((&m * &u - &u * l).norm() <= 1e-8 * m.norm());
        }
    }

    #[test]
    fn zero_matrix_is_handled() {
        let (u, l) = leading_eigvec(&DMatrix::zeros(5, 5)).unwrap();
        assert_eq!(l, 0.0);
        assert!((u.norm() - 1.0).abs() < 1e-15);
    }
}
