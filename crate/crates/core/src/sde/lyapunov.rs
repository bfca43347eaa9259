use nalgebra::{DMatrix, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![m.nrows(), m.ncols()], data)
}

/// Smallest eigenvalue of the symmetric part `(Λ + Λᵀ)/2`.
pub fn min_symmetric_eigenvalue(lambda: &Tensor) -> Result<f64> {
    if lambda.shape().len() != 2 || lambda.rows() != lambda.cols() {
        return Err(shape_err("positive-definiteness check", "a square matrix", lambda.shape()));
    }
    let m = to_dmatrix(lambda);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

pub fn check_positive_definite(lambda: &Tensor) -> Result<()> {
    let min = min_symmetric_eigenvalue(lambda)?;
    if !(min > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "drift matrix is not positive definite (smallest symmetric-part eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Stationary covariance of `dX = −ΛX dt + Σ dW`: the solution `C` of
/// `ΛC + CΛᵀ = ΣΣᵀ`.
///
/// Bartels–Stewart over the complex Schur form `Λ = U T U*`: the transformed
/// system `T Ỹ + Ỹ T* = U* ΣΣᵀ U` is triangular and is solved entry by entry
/// from the bottom-right corner.
pub fn ou_stationary_covariance(lambda: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    check_positive_definite(lambda)?;
    let d = lambda.rows();
    if sigma.shape().len() != 2 || sigma.rows() != d {
        return Err(shape_err("ou_stationary_covariance (Σ)", format!("[{d}, d_W]"), sigma.shape()));
    }
    let s = to_dmatrix(sigma);
    let q = &s * s.transpose();

    let lc = to_dmatrix(lambda).map(|v| Complex64::new(v, 0.0));
    let (u, t) = Schur::new(lc).unpack();
    let uh = u.adjoint();
    let qt = &uh * q.map(|v| Complex64::new(v, 0.0)) * &u;

    let mut y = DMatrix::<Complex64>::zeros(d, d);
    for i in (0..d).rev() {
        for j in (0..d).rev() {
            let mut rhs = qt[(i, j)];
            for k in i + 1..d {
                rhs -= t[(i, k)] * y[(k, j)];
            }
            for k in j + 1..d {
                rhs -= y[(i, k)] * t[(j, k)].conj();
            }
            let denom = t[(i, i)] + t[(j, j)].conj();
            y[(i, j)] = rhs / denom;
        }
    }
    let c = &u * y * &uh;
    let mut real = c.map(|z| z.re);
    // Symmetrize away rounding asymmetry.
    real = (&real + real.transpose()) * 0.5;
    Ok(from_dmatrix(&real))
}

/// Max-abs entry of `ΛC + CΛᵀ − ΣΣᵀ`.
pub fn lyapunov_residual(lambda: &Tensor, sigma: &Tensor, c: &Tensor) -> f64 {
    let l = to_dmatrix(lambda);
    let s = to_dmatrix(sigma);
    let c = to_dmatrix(c);
    let r = &l * &c + &c * l.transpose() - &s * s.transpose();
    r.amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn diag(v: &[f64]) -> Tensor {
        let n = v.len();
        let mut d = vec![0.0; n * n];
        for (i, x) in v.iter().enumerate() {
            d[i * n + i] = *x;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    #[test]
    fn unit_drift_root_two_noise_gives_identity() {
        let d = 32;
        let lambda = Tensor::identity(d);
        let sigma = Tensor::identity(d).map(|v| v * 2f64.sqrt());
        let c = ou_stationary_covariance(&lambda, &sigma).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c.row(i)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_drift() {
        let lambdas = [0.5, 1.0, 3.0];
        let sigma = Tensor::identity(3).map(|v| 0.7 * v);
        let c = ou_stationary_covariance(&diag(&lambdas), &sigma).unwrap();
        for (i, l) in lambdas.iter().enumerate() {
            assert!((c.row(i)[i] - 0.49 / (2.0 * l)).abs() < 1e-12);
        }
        assert!(c.row(0)[1].abs() < 1e-12);
    }

    #[test]
    fn zero_noise_gives_zero_covariance() {
        let c = ou_stationary_covariance(&diag(&[1.0, 2.0]), &Tensor::zeros(vec![2, 3])).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_indefinite_drift() {
        assert!(ou_stationary_covariance(&diag(&[1.0, -0.5]), &Tensor::identity(2)).is_err());
    }

    #[test]
    fn non_symmetric_drift_residual() {
        let mut rng = Rng::seed(17);
        for &d in &[2usize, 5, 16] {
            // Λ = 2I + small non-normal perturbation keeps the symmetric part positive definite.
            let mut l: Vec<f64> = (0..d * d).map(|_| 0.3 * rng.normal() / (d as f64).sqrt()).collect();
            for i in 0..d {
                l[i * d + i] += 2.0;
            }
            let lambda = Tensor::matrix(d, d, l).unwrap();
            let sigma = Tensor::matrix(d, d + 1, rng.normals(d * (d + 1))).unwrap();
            let c = ou_stationary_covariance(&lambda, &sigma).unwrap();
            assert!(lyapunov_residual(&lambda, &sigma, &c) <= 1e-10);
        }
    }
}
