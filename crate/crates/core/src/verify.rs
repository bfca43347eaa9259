//! Built-in oracle suite: quick analytic checks of every numerical layer.

use crate::autodiff::{finite_diff_gradient, gelu, relative_error, Tape, Tensor};
use crate::bsde::{rollout_y, Dims, GenModel, GeneratorSpec, ModelConfig, Start};
use crate::error::Result;
use crate::mmd::{kernel_eval, mmd2, KernelSpec};
use crate::nn::{init_mlp, mlp_apply, rmsprop_step, MlpConfig, MlpParams, Mode, RmsProp, RmsPropState};
use crate::rng::Rng;
use crate::sde::{
    brownian_increments, euler_forward_x, lyapunov_residual, ou_stationary_covariance, sample_initial,
    BrownianIncrements, ForwardSpec, TimeGrid,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match run() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check; takes a few seconds.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check("autodiff/mlp-gradients", || mlp_gradients(seed)),
        check("bsde/rollout-gradients", || rollout_gradients(seed)),
        check("sde/lyapunov-residual", || lyapunov(seed)),
        check("sde/ou-stationarity", || ou_stationarity(seed)),
        check("sde/euler-strong-order", || euler_order(seed)),
        check("bsde/linear-oracle", linear_oracle),
        check("mmd/fixtures", mmd_fixtures),
        check("nn/rmsprop-gelu-fixtures", optimizer_fixtures),
    ]
}

fn mlp_gradients(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let widths: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(16)).collect();
        let cfg = MlpConfig::new(1 + rng.below(8), 1 + rng.below(8), widths, 0.0)?;
        let params = init_mlp(&cfg, &mut rng)?;
        let x = Tensor::vector(rng.normals(cfg.input_dim))?;
        let loss = |p: &MlpParams| -> Result<(f64, Vec<Tensor>)> {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let (y, bound) = mlp_apply(p, &cfg, xv, Mode::Eval, &mut Rng::seed(0), &mut t)?;
            let sq = t.mul(y, y)?;
            let l = t.sum(sq);
            Ok((t.value(l).data()[0], bound.grads(&t.backward(l)?)?))
        };
        let (_, grads) = loss(&params)?;
        let tensors = params.tensors();
        for (k, g) in grads.iter().enumerate() {
            let fd = finite_diff_gradient(
                |p| {
                    let mut ts = tensors.clone();
                    ts[k] = p.clone();
                    loss(&MlpParams::from_tensors(&cfg, ts).expect("same shapes")).expect("finite").0
                },
                &tensors[k],
                1e-6,
            )?;
            worst = worst.max(relative_error(g.data(), fd.data()));
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} (≤ 1e-4)")))
}

fn rollout_gradients(seed: u64) -> Result<(bool, String)> {
    let dims = Dims { d_x: 2, d_y: 2, d_w: 2 };
    let cfg = ModelConfig::new(dims, TimeGrid::new(1.0, 3)?, &[4], 0.0, false)?;
    let model = GenModel::init(cfg, ForwardSpec::standard_ou(2), GeneratorSpec::default_for(2, 2), &mut Rng::seed(seed))?;
    let mut rng = Rng::seed(seed ^ 1);
    let zeta = sample_initial(2, &mut rng)?;
    let dw = brownian_increments(&model.grid(), 2, &mut rng)?;
    let loss = |m: &GenModel| -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let bound = m.bind(&mut t);
        let y = m.record_sample(&mut t, &bound, Start::Fixed(&zeta), &dw, Mode::Eval, &mut Rng::seed(0))?;
        let sq = t.mul(y, y)?;
        let l = t.sum(sq);
        Ok((t.value(l).data()[0], bound.grads(&t.backward(l)?)?))
    };
    let (_, grads) = loss(&model)?;
    let params = model.params();
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let fd = finite_diff_gradient(
            |p| {
                let mut m = model.clone();
                let mut ps = params.clone();
                ps[k] = p.clone();
                m.set_params(ps).expect("same shapes");
                loss(&m).expect("finite").0
            },
            &params[k],
            1e-6,
        )?;
        worst = worst.max(relative_error(g.data(), fd.data()));
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} (≤ 1e-4)")))
}

fn lyapunov(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::seed(seed);
    let d = 8;
    let mut l: Vec<f64> = rng.normals(d * d).iter().map(|v| 0.2 * v).collect();
    for i in 0..d {
        l[i * d + i] += 1.5;
    }
    let lambda = Tensor::matrix(d, d, l)?;
    let sigma = Tensor::matrix(d, d, rng.normals(d * d))?;
    let c = ou_stationary_covariance(&lambda, &sigma)?;
    let r = lyapunov_residual(&lambda, &sigma, &c);
    Ok((r <= 1e-10, format!("residual {r:.2e} (≤ 1e-10)")))
}

/// Paths from the stationary start keep the stationary covariance.
fn ou_stationarity(seed: u64) -> Result<(bool, String)> {
    let d = 4;
    let spec = ForwardSpec::standard_ou(d);
    let ForwardSpec::Ou { lambda, sigma } = &spec else {
        unreachable!("standard_ou builds an OU spec")
    };
    let c = ou_stationary_covariance(lambda, sigma)?;
    let grid = TimeGrid::new(1.0, 50)?;
    let paths = 20_000;
    let mut rng = Rng::seed(seed);
    let mut acc = vec![0.0; d * d];
    for _ in 0..paths {
        let zeta = sample_initial(d, &mut rng)?;
        let dw = brownian_increments(&grid, d, &mut rng)?;
        let path = euler_forward_x(&spec, &zeta, &dw, &grid)?;
        let x = path.row(grid.steps());
        for i in 0..d {
            for j in 0..d {
                acc[i * d + j] += x[i] * x[j];
            }
        }
    }
    let diff: f64 = acc
        .iter()
        .zip(c.data())
        .map(|(a, b)| (a / paths as f64 - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = c.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / norm;
    Ok((rel <= 0.05, format!("Frobenius relative error {rel:.4} (≤ 0.05)")))
}

/// Strong error of the scalar OU Euler scheme against the exact solution
/// driven by the same Brownian path.
fn euler_order(seed: u64) -> Result<(bool, String)> {
    let levels = [25usize, 50, 100, 200];
    let fine = 200;
    let h = 1.0 / fine as f64;
    let e = (-h).exp();
    // Joint law of (ΔW, ∫ e^{−(h−s)} dW) over one fine step.
    let var_i = (1.0 - e * e) / 2.0;
    let cov = 1.0 - e;
    let a = cov / h.sqrt();
    let b = (var_i - a * a).max(0.0).sqrt();
    let mut rng = Rng::seed(seed);
    let paths = 2_000;
    let mut sq = [0.0; 4];
    for _ in 0..paths {
        let x0 = rng.normal();
        let mut exact = x0;
        let mut dws = Vec::with_capacity(fine);
        for _ in 0..fine {
            let (u, v) = (rng.normal(), rng.normal());
            let dw = h.sqrt() * u;
            exact = e * exact + std::f64::consts::SQRT_2 * (a * u + b * v);
            dws.push(dw);
        }
        for (k, &n) in levels.iter().enumerate() {
            let m = fine / n;
            let coarse: Vec<f64> = dws.chunks(m).map(|c| c.iter().sum()).collect();
            let dw = BrownianIncrements(Tensor::matrix(n, 1, coarse)?);
            let grid = TimeGrid::new(1.0, n)?;
            let path = euler_forward_x(&ForwardSpec::standard_ou(1), &Tensor::vector(vec![x0])?, &dw, &grid)?;
            sq[k] += (path.row(n)[0] - exact).powi(2);
        }
    }
    let rms: Vec<f64> = sq.iter().map(|s| (s / paths as f64).sqrt()).collect();
    let ratios: Vec<f64> = rms.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (1.5..=2.5).contains(r));
    Ok((ok, format!("error ratios per doubling {ratios:.3?} (in [1.5, 2.5])")))
}

fn linear_oracle() -> Result<(bool, String)> {
    let d = 2;
    let mut errs = Vec::new();
    for n in [50usize, 100, 200] {
        let grid = TimeGrid::new(1.0, n)?;
        let spec = GeneratorSpec {
            a: Tensor::zeros(vec![d, d]),
            b: Tensor::identity(d).map(|v| -0.5 * v),
            kappa: 0.0,
        };
        let dw = BrownianIncrements(Tensor::zeros(vec![n, d]));
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::full(vec![d], (-0.5f64).exp()));
        let path: Vec<_> = (0..n).map(|_| t.constant(Tensor::zeros(vec![d]))).collect();
        let y = rollout_y(&mut t, &spec, &grid, y0, &path, &dw, |tape, _, _| {
            Ok(tape.constant(Tensor::zeros(vec![d, d])))
        })?;
        let err = t.value(y).data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        errs.push((n, err));
    }
    let bound_ok = errs.iter().all(|&(n, e)| e <= 5.0 / n as f64);
    let halving_ok = errs.windows(2).all(|w| (1.5..=2.5).contains(&(w[0].1 / w[1].1)));
    let shown: Vec<String> = errs.iter().map(|(n, e)| format!("N={n}: {e:.2e}")).collect();
    Ok((bound_ok && halving_ok, format!("sup errors {} (≤ 5/N, halving)", shown.join(", "))))
}

fn mmd_fixtures() -> Result<(bool, String)> {
    let rbf = KernelSpec::rbf(1.0)?;
    let zero = Tensor::matrix(2, 1, vec![0.0, 0.0])?;
    let two = Tensor::matrix(2, 1, vec![2.0, 2.0])?;
    let same = mmd2(&zero, &zero, &rbf)?;
    let apart = mmd2(&zero, &two, &rbf)?;
    let k = kernel_eval(&rbf, &[0.0], &[2.0])?;
    let ok = same.abs() <= 1e-12
        && (apart - (2.0 - 2.0 * (-2.0f64).exp())).abs() <= 1e-12
        && (k - (-2.0f64).exp()).abs() <= 1e-15;
    Ok((ok, format!("MMD²(same) = {same:.1e}, MMD²(0 vs 2) = {apart:.6}")))
}

fn optimizer_fixtures() -> Result<(bool, String)> {
    let opt = RmsProp {
        lr: 0.1,
        decay: 0.9,
        eps: 0.0,
    };
    let mut p = vec![Tensor::scalar(0.0)?];
    let mut state = RmsPropState::new(&p);
    let g = [Tensor::scalar(1.0)?];
    rmsprop_step(&mut p, &g, &mut state, &opt)?;
    let first = p[0].data()[0];
    rmsprop_step(&mut p, &g, &mut state, &opt)?;
    let second = p[0].data()[0];
    let ok = (first + 0.1 / 0.1f64.sqrt()).abs() <= 1e-12
        && (second - (first - 0.1 / 0.19f64.sqrt())).abs() <= 1e-12
        && (gelu(1.0) - 0.841_345).abs() <= 1e-6;
    Ok((ok, format!("trajectory ({first:.6}, {second:.6}), GELU(1) = {:.6}", gelu(1.0))))
}
