//! Gaussian kernels, the unbiased MMD² two-sample estimator and the training
//! loss built on it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Multiscale,
}

/// A Gaussian kernel, or a uniform mixture of Gaussians over several bandwidths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        let k = Self {
            family: KernelFamily::Rbf,
            bandwidths: vec![sigma],
        };
        k.validate()?;
        Ok(k)
    }

    pub fn multiscale(bandwidths: Vec<f64>) -> Result<Self> {
        let k = Self {
            family: KernelFamily::Multiscale,
            bandwidths,
        };
        k.validate()?;
        Ok(k)
    }

    /// Ladder `{1, 2, 4, 8}·√d/2` for data of dimension `d`.
    pub fn default_multiscale(d: usize) -> Self {
        let base = (d as f64).sqrt() / 2.0;
        Self {
            family: KernelFamily::Multiscale,
            bandwidths: [1.0, 2.0, 4.0, 8.0].iter().map(|s| s * base).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::InvalidArgument("kernel needs at least one bandwidth".into()));
        }
        if self.family == KernelFamily::Rbf && self.bandwidths.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "rbf kernel takes exactly one bandwidth, got {}",
                self.bandwidths.len()
            )));
        }
        if let Some(s) = self.bandwidths.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {s}")));
        }
        Ok(())
    }

    fn weight(&self) -> f64 {
        1.0 / self.bandwidths.len() as f64
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    if x.len() != y.len() {
        return Err(shape_err("kernel_eval", x.len(), y.len()));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(spec.weight() * spec.bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>())
}

/// Mixture kernel matrix sums: `(Σ_{i≠j} K(a_i,a_j)` when `off_diag`,
/// otherwise `Σ_{i,j} K(a_i,b_j))`.
fn kernel_sum(tape: &mut Tape, spec: &KernelSpec, d2: Var, off_diag: bool) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in &spec.bandwidths {
        let scaled = tape.scale(d2, -1.0 / (2.0 * s * s));
        let k = tape.exp(scaled);
        let part = if off_diag { tape.off_diag_sum(k)? } else { tape.sum(k) };
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    Ok(tape.scale(total.expect("validated non-empty"), spec.weight()))
}

/// Unbiased MMD² between the rows of `x: [m×d]` and `y: [n×d]`:
/// `Σ_{i≠j}K(x_i,x_j)/(m(m−1)) + Σ_{i≠j}K(y_i,y_j)/(n(n−1)) − 2Σ_{i,j}K(x_i,y_j)/(mn)`.
///
/// The value depends only on the two sample sets, not on row order.
pub fn mmd2_unbiased(tape: &mut Tape, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    spec.validate()?;
    let (xs, ys) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 {
        return Err(shape_err("mmd2_unbiased", "two [m×d] batches", (xs, ys)));
    }
    let (m, n) = (xs[0], ys[0]);
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "unbiased MMD² needs at least 2 samples per batch, got {m} and {n}"
        )));
    }
    if xs[1] != ys[1] {
        return Err(shape_err("mmd2_unbiased (sample dim)", xs[1], ys[1]));
    }
    let (mf, nf) = (m as f64, n as f64);
    let dxx = tape.sq_dist_gram(x, x)?;
    let dyy = tape.sq_dist_gram(y, y)?;
    let dxy = tape.sq_dist_gram(x, y)?;
    let kxx = kernel_sum(tape, spec, dxx, true)?;
    let kyy = kernel_sum(tape, spec, dyy, true)?;
    let kxy = kernel_sum(tape, spec, dxy, false)?;
    let kxx = tape.scale(kxx, 1.0 / (mf * (mf - 1.0)));
    let kyy = tape.scale(kyy, 1.0 / (nf * (nf - 1.0)));
    let kxy = tape.scale(kxy, -2.0 / (mf * nf));
    let self_terms = tape.add(kxx, kyy)?;
    tape.add(self_terms, kxy)
}

/// [`mmd2_unbiased`] on plain tensors.
pub fn mmd2(x: &Tensor, y: &Tensor, spec: &KernelSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = mmd2_unbiased(&mut tape, xv, yv, spec)?;
    Ok(tape.value(out).data()[0])
}

/// `MMD²(generated, target) + β·MSE`, where the MSE averages over every entry
/// of the pairs `(generated_i, target_{pairing[i]})`. `β = 0` is the plain MMD².
pub fn training_loss(
    tape: &mut Tape,
    generated: Var,
    target: &Tensor,
    spec: &KernelSpec,
    beta: f64,
    pairing: Option<&[usize]>,
) -> Result<Var> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("β must be non-negative, got {beta}")));
    }
    let t = tape.constant(target.clone());
    let mmd = mmd2_unbiased(tape, generated, t, spec)?;
    if beta == 0.0 {
        return Ok(mmd);
    }
    let pairing =
        pairing.ok_or_else(|| Error::InvalidArgument("β > 0 requires a generated-to-target pairing".into()))?;
    let (m, d) = (tape.shape(generated)[0], tape.shape(generated)[1]);
    if pairing.len() != m {
        return Err(shape_err("training_loss (pairing)", m, pairing.len()));
    }
    let mut rows = Vec::with_capacity(m * d);
    for &j in pairing {
        if j >= target.rows() {
            return Err(Error::InvalidArgument(format!(
                "pairing index {j} out of range for {} targets",
                target.rows()
            )));
        }
        rows.extend_from_slice(target.row(j));
    }
    let paired = tape.constant(Tensor::from_parts(vec![m, d], rows));
    let diff = tape.sub(generated, paired)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    let mse = tape.scale(mse, beta);
    tape.add(mmd, mse)
}
