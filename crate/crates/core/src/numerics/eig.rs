use crate::error::{contract, Result};

use super::Matrix;

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
///
/// Column `i` of `vectors` is the unit eigenvector for `values[i]`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition.
///
/// Each rotation annihilates one off-diagonal pair; sweeps repeat until the
/// off-diagonal mass is negligible relative to the matrix norm.
pub fn symmetric_eig(m: &Matrix) -> Result<SymmetricEigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(contract(format!("eigendecomposition of a non-square {:?} matrix", m.shape())));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(contract("eigendecomposition input is not symmetric"));
    }
    if !m.is_finite() {
        return Err(crate::Error::NonFinite("eigendecomposition input".into()));
    }

    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_col(dst, &v.col(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Applies the rotation `Jᵀ A J` in the (p, q) plane and accumulates `V J`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x = rng.next_gaussian();
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    fn check_pairs(m: &Matrix, e: &SymmetricEigen) {
        let n = m.rows();
        for i in 0..n {
            let vi = e.vectors.col(i);
            let mv = m.matvec(&vi);
            for k in 0..n {
                assert!((mv[k] - e.values[i] * vi[k]).abs() < 1e-8);
            }
            for j in 0..n {
                let d = crate::numerics::dot(&vi, &e.vectors.col(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-8);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = symmetric_eig(&Matrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
    }

    #[test]
    fn all_ones_two_by_two() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let e = symmetric_eig(&m).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-12);
        assert!(e.values[1].abs() < 1e-12);
        let top = e.vectors.col(0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((top[0].abs() - h).abs() < 1e-12 && (top[1].abs() - h).abs() < 1e-12);
        assert!(top[0] * top[1] > 0.0);
    }

    #[test]
    fn random_reconstruction_and_trace() {
        for seed in 0..5 {
            let m = random_symmetric(5, seed);
            let e = symmetric_eig(&m).unwrap();
            check_pairs(&m, &e);
            // R Λ Rᵀ
            let mut recon = Matrix::zeros(5, 5);
            for i in 0..5 {
                let vi = e.vectors.col(i);
                recon.add_outer(e.values[i], &vi, &vi);
            }
            assert!(recon.max_abs_diff(&m) < 1e-8);
            let trace: f64 = (0..5).map(|i| m[(i, i)]).sum();
            assert!((e.values.iter().sum::<f64>() - trace).abs() < 1e-8);
        }
    }

    #[test]
    fn larger_matrix() {
        let m = random_symmetric(40, 11);
        check_pairs(&m, &symmetric_eig(&m).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(symmetric_eig(&Matrix::zeros(2, 3)).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(symmetric_eig(&m).is_err());
    }
}
