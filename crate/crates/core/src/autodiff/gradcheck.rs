use crate::error::{Error, Result};

use super::Tensor;

/// Central-difference gradient `(f(x+h·e_i) − f(x−h·e_i)) / 2h`, one coordinate at a time.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let base = x.data().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_parts(x.shape().to_vec(), plus));
        let fm = f(&Tensor::from_parts(x.shape().to_vec(), minus));
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on unequal lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::{gelu, gelu_derivative};

    #[test]
    fn quadratic() {
        let x = Tensor::scalar(3.0).unwrap();
        let g = finite_diff_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn gelu_slope_at_one() {
        let x = Tensor::scalar(1.0).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().map(|&v| gelu(v)).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.083_315_470_587_686).abs() < 1e-6, "{}", g.data()[0]);
        assert!((g.data()[0] - gelu_derivative(1.0)).abs() < 1e-9);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|_| 4.2, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(0.0).unwrap();
        assert!(finite_diff_gradient(|_| 0.0, &x, 0.0).is_err());
    }
}
