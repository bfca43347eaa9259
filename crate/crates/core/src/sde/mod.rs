//! Forward process: seeded Gaussian sampling, Brownian increments, the Euler
//! scheme for `X`, and exact Ornstein–Uhlenbeck facts used as oracles.

mod lyapunov;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

pub use lyapunov::{check_positive_definite, lyapunov_residual, min_symmetric_eigenvalue, ou_stationary_covariance};

/// Uniform grid `t_n = nT/N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.horizon / self.steps as f64
    }
}

/// Drift and diffusion of the forward process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ForwardSpec {
    /// `X = ζ + W`, requires `d_W = d_X`.
    Brownian,
    /// `dX = −ΛX dt + Σ dW`.
    Ou { lambda: Tensor, sigma: Tensor },
}

impl ForwardSpec {
    /// `Λ = I`, `Σ = √2·I`: standard normal is the stationary law.
    pub fn standard_ou(d: usize) -> Self {
        ForwardSpec::Ou {
            lambda: Tensor::identity(d),
            sigma: Tensor::identity(d).map(|v| v * std::f64::consts::SQRT_2),
        }
    }

    /// Checks shapes against `(d_X, d_W)` and positive definiteness of `Λ`.
    pub fn validate(&self, d_x: usize, d_w: usize) -> Result<()> {
        match self {
            ForwardSpec::Brownian => {
                if d_x != d_w {
                    return Err(shape_err("brownian forward process (d_W)", d_x, d_w));
                }
            }
            ForwardSpec::Ou { lambda, sigma } => {
                if lambda.shape() != [d_x, d_x] {
                    return Err(shape_err("ou drift Λ", [d_x, d_x], lambda.shape()));
                }
                if sigma.shape() != [d_x, d_w] {
                    return Err(shape_err("ou diffusion Σ", [d_x, d_w], sigma.shape()));
                }
                check_positive_definite(lambda)?;
            }
        }
        Ok(())
    }
}

/// `N × d_W` matrix of increments `W_{t_{n+1}} − W_{t_n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianIncrements(pub Tensor);

impl BrownianIncrements {
    pub fn steps(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.0.row(n)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `W_T`, the column sums.
    pub fn terminal(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        for n in 0..self.steps() {
            for (wi, &d) in w.iter_mut().zip(self.row(n)) {
                *wi += d;
            }
        }
        w
    }
}

/// `ζ ~ N(0, I_d)`.
pub fn sample_initial(d_x: usize, rng: &mut Rng) -> Result<Tensor> {
    if d_x == 0 {
        return Err(Error::InvalidArgument("d_X must be positive".into()));
    }
    Ok(Tensor::from_parts(vec![d_x], rng.normals(d_x)))
}

pub fn brownian_increments(grid: &TimeGrid, d_w: usize, rng: &mut Rng) -> Result<BrownianIncrements> {
    if d_w == 0 {
        return Err(Error::InvalidArgument("d_W must be positive".into()));
    }
    let sd = grid.dt().sqrt();
    let data = (0..grid.steps() * d_w).map(|_| sd * rng.normal()).collect();
    Ok(BrownianIncrements(Tensor::from_parts(vec![grid.steps(), d_w], data)))
}

/// One Euler step `x + b(x)Δt + σΔW`.
fn euler_step(spec: &ForwardSpec, x: &[f64], dw: &[f64], dt: f64) -> Vec<f64> {
    match spec {
        ForwardSpec::Brownian => x.iter().zip(dw).map(|(a, b)| a + b).collect(),
        ForwardSpec::Ou { lambda, sigma } => (0..x.len())
            .map(|i| {
                let drift: f64 = lambda.row(i).iter().zip(x).map(|(l, v)| l * v).sum();
                let noise: f64 = sigma.row(i).iter().zip(dw).map(|(s, w)| s * w).sum();
                x[i] - drift * dt + noise
            })
            .collect(),
    }
}

/// Full Euler path `[N+1 × d_X]` with `X_{t_0} = ζ`.
pub fn euler_forward_x(spec: &ForwardSpec, zeta: &Tensor, dw: &BrownianIncrements, grid: &TimeGrid) -> Result<Tensor> {
    if zeta.shape().len() != 1 {
        return Err(shape_err("euler_forward_x (ζ)", "[d_X]", zeta.shape()));
    }
    let d_x = zeta.len();
    if dw.steps() != grid.steps() {
        return Err(shape_err("euler_forward_x (increment rows)", grid.steps(), dw.steps()));
    }
    spec.validate(d_x, dw.dim())?;
    let dt = grid.dt();
    let mut path = Vec::with_capacity((grid.steps() + 1) * d_x);
    path.extend_from_slice(zeta.data());
    let mut x = zeta.data().to_vec();
    for n in 0..grid.steps() {
        x = euler_step(spec, &x, dw.row(n), dt);
        path.extend_from_slice(&x);
    }
    Ok(Tensor::from_parts(vec![grid.steps() + 1, d_x], path))
}

/// The differentiable twin of one [`euler_forward_x`] step, for when `X` depends
/// on parameters (an encoder upstream of `ζ`). The noise term is constant.
pub fn record_euler_step(tape: &mut Tape, spec: &ForwardSpec, x: Var, dw: &[f64], dt: f64) -> Result<Var> {
    let d_x = tape.shape(x).iter().product::<usize>();
    match spec {
        ForwardSpec::Brownian => {
            if dw.len() != d_x {
                return Err(shape_err("record_euler_step (ΔW)", d_x, dw.len()));
            }
            let noise = tape.constant(Tensor::from_parts(vec![d_x], dw.to_vec()));
            tape.add(x, noise)
        }
        ForwardSpec::Ou { lambda, sigma } => {
            if sigma.cols() != dw.len() {
                return Err(shape_err("record_euler_step (ΔW)", sigma.cols(), dw.len()));
            }
            let noise: Vec<f64> = (0..d_x)
                .map(|i| sigma.row(i).iter().zip(dw).map(|(s, w)| s * w).sum())
                .collect();
            let l = tape.constant(lambda.clone());
            let drift = tape.matvec(l, x)?;
            let drift = tape.scale(drift, -dt);
            let noise = tape.constant(Tensor::from_parts(vec![d_x], noise));
            let moved = tape.add(x, drift)?;
            tape.add(moved, noise)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ou() -> ForwardSpec {
        ForwardSpec::standard_ou(1)
    }

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        assert!((g.dt() - 0.005).abs() < 1e-15);
        assert_eq!(g.t(200), 1.0);
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn initial_and_increment_shapes() {
        let mut rng = Rng::seed(5);
        assert_eq!(sample_initial(32, &mut rng).unwrap().len(), 32);
        let g = TimeGrid::new(1.0, 200).unwrap();
        let dw = brownian_increments(&g, 32, &mut rng).unwrap();
        assert_eq!(dw.tensor().shape(), &[200, 32]);
        assert_eq!(
            sample_initial(8, &mut Rng::seed(9)).unwrap(),
            sample_initial(8, &mut Rng::seed(9)).unwrap()
        );
    }

    #[test]
    fn initial_moments() {
        let mut rng = Rng::seed(11);
        let d = 4;
        let n = 100_000;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..n {
            let z = sample_initial(d, &mut rng).unwrap();
            for (i, v) in z.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..d {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn increment_variance() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let mut rng = Rng::seed(12);
        let mut sq = 0.0;
        let mut count = 0usize;
        for _ in 0..50 {
            let dw = brownian_increments(&g, 100, &mut rng).unwrap();
            sq += dw.tensor().data().iter().map(|v| v * v).sum::<f64>();
            count += dw.tensor().len();
        }
        assert_eq!(count, 1_000_000);
        let var = sq / count as f64;
        assert!((var / 0.005 - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn deterministic_decay() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let dw = BrownianIncrements(Tensor::zeros(vec![200, 1]));
        let path = euler_forward_x(&scalar_ou(), &Tensor::vector(vec![1.0]).unwrap(), &dw, &g).unwrap();
        for n in 0..=200 {
            assert!((path.row(n)[0] - 0.995f64.powi(n as i32)).abs() < 1e-13);
        }
    }

    #[test]
    fn one_ou_step() {
        let g = TimeGrid::new(0.005, 1).unwrap();
        let dw = BrownianIncrements(Tensor::matrix(1, 1, vec![0.1]).unwrap());
        let path = euler_forward_x(&scalar_ou(), &Tensor::vector(vec![2.0]).unwrap(), &dw, &g).unwrap();
        assert!((path.row(1)[0] - 2.131_421_356_237_309_5).abs() < 1e-12);
    }

    #[test]
    fn brownian_path_is_prefix_sum() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let dw = brownian_increments(&g, 3, &mut Rng::seed(2)).unwrap();
        let path = euler_forward_x(&ForwardSpec::Brownian, &Tensor::zeros(vec![3]), &dw, &g).unwrap();
        let mut acc = [0.0; 3];
        for n in 0..10 {
            for j in 0..3 {
                acc[j] += dw.row(n)[j];
            }
            assert_eq!(path.row(n + 1), &acc);
        }
        assert_eq!(dw.terminal(), acc.to_vec());
    }

    #[test]
    fn shape_mismatches_rejected() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let dw = brownian_increments(&g, 2, &mut Rng::seed(1)).unwrap();
        assert!(euler_forward_x(&ForwardSpec::standard_ou(3), &Tensor::zeros(vec![3]), &dw, &g).is_err());
        let short = TimeGrid::new(1.0, 5).unwrap();
        assert!(euler_forward_x(&ForwardSpec::standard_ou(2), &Tensor::zeros(vec![2]), &dw, &short).is_err());
        assert!(ForwardSpec::Brownian.validate(2, 3).is_err());
    }

    #[test]
    fn recorded_step_matches_plain_path() {
        let mut rng = Rng::seed(21);
        let d = 3;
        let mut l = rng.normals(d * d).iter().map(|v| 0.1 * v).collect::<Vec<_>>();
        for i in 0..d {
            l[i * d + i] += 1.0;
        }
        let spec = ForwardSpec::Ou {
            lambda: Tensor::matrix(d, d, l).unwrap(),
            sigma: Tensor::matrix(d, 2, rng.normals(2 * d)).unwrap(),
        };
        let g = TimeGrid::new(1.0, 6).unwrap();
        let dw = brownian_increments(&g, 2, &mut rng).unwrap();
        let zeta = sample_initial(d, &mut rng).unwrap();
        let path = euler_forward_x(&spec, &zeta, &dw, &g).unwrap();

        let mut tape = Tape::new();
        let mut x = tape.param(zeta.clone());
        for n in 0..g.steps() {
            x = record_euler_step(&mut tape, &spec, x, dw.row(n), g.dt()).unwrap();
            for j in 0..d {
                assert!((tape.value(x).data()[j] - path.row(n + 1)[j]).abs() < 1e-14);
            }
        }
    }
}
