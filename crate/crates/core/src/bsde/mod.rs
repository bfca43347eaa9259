//! Backward process: generator evaluation, the differentiable Euler rollout of
//! `Y`, and sample generation from a model.

mod model;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::sde::{BrownianIncrements, TimeGrid};

pub use model::{generate_batch, BoundModel, Dims, Encoder, GenModel, ModelConfig, Start};

/// Largest `|Y|` entry tolerated mid-rollout.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Coefficients of `f(t, x, y, z) = Ax + By + κ·rowL1(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub a: Tensor,
    pub b: Tensor,
    pub kappa: f64,
}

impl GeneratorSpec {
    /// `A = 0`, `B = −0.5·I`, `κ = 0.1`.
    pub fn default_for(d_x: usize, d_y: usize) -> Self {
        Self {
            a: Tensor::zeros(vec![d_y, d_x]),
            b: Tensor::identity(d_y).map(|v| -0.5 * v),
            kappa: 0.1,
        }
    }

    pub fn zero(d_x: usize, d_y: usize) -> Self {
        Self {
            a: Tensor::zeros(vec![d_y, d_x]),
            b: Tensor::zeros(vec![d_y, d_y]),
            kappa: 0.0,
        }
    }

    pub fn validate(&self, d_x: usize, d_y: usize) -> Result<()> {
        if self.a.shape() != [d_y, d_x] {
            return Err(shape_err("generator A", [d_y, d_x], self.a.shape()));
        }
        if self.b.shape() != [d_y, d_y] {
            return Err(shape_err("generator B", [d_y, d_y], self.b.shape()));
        }
        if !self.kappa.is_finite() {
            return Err(Error::NonFinite("generator κ"));
        }
        Ok(())
    }
}

/// Records `f(x, y, z)` on `tape`; `z` is `[d_Y × d_W]`. Zero terms are skipped.
pub fn generator_f(tape: &mut Tape, spec: &GeneratorSpec, x: Var, y: Var, z: Var) -> Result<Var> {
    let d_y = spec.b.rows();
    if tape.shape(x) != [spec.a.cols()] {
        return Err(shape_err("generator_f (x)", [spec.a.cols()], tape.shape(x)));
    }
    if tape.shape(y) != [d_y] {
        return Err(shape_err("generator_f (y)", [d_y], tape.shape(y)));
    }
    if tape.shape(z).len() != 2 || tape.shape(z)[0] != d_y {
        return Err(shape_err("generator_f (z)", format!("[{d_y}, d_W]"), tape.shape(z)));
    }
    let mut terms = Vec::with_capacity(3);
    if spec.a.data().iter().any(|&v| v != 0.0) {
        let a = tape.constant(spec.a.clone());
        terms.push(tape.matvec(a, x)?);
    }
    if spec.b.data().iter().any(|&v| v != 0.0) {
        let b = tape.constant(spec.b.clone());
        terms.push(tape.matvec(b, y)?);
    }
    if spec.kappa != 0.0 {
        let abs = tape.abs(z);
        let l1 = tape.row_sum(abs)?;
        terms.push(tape.scale(l1, spec.kappa));
    }
    let mut out = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::zeros(vec![d_y]))),
    };
    for &t in &terms[1..] {
        out = tape.add(out, t)?;
    }
    Ok(out)
}

/// Evaluates `f` on plain tensors.
pub fn eval_generator(spec: &GeneratorSpec, x: &Tensor, y: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, y, z) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(z.clone()));
    let f = generator_f(&mut tape, spec, x, y, z)?;
    Ok(tape.value(f).clone())
}

/// `Y_{n+1} = Y_n − f(t_n, X_n, Y_n, Z_n)Δt + Z_n ΔW_n` for `n = 0..N`, with
/// `Z_n = z_provider(tape, n, X_n)`. Returns `Y_T`.
///
/// `x_path` holds at least `X_{t_0} … X_{t_{N−1}}`, produced by the same `dw`.
pub fn rollout_y<F>(
    tape: &mut Tape,
    spec: &GeneratorSpec,
    grid: &TimeGrid,
    y0: Var,
    x_path: &[Var],
    dw: &BrownianIncrements,
    mut z_provider: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let steps = grid.steps();
    if dw.steps() != steps {
        return Err(shape_err("rollout_y (increment rows)", steps, dw.steps()));
    }
    if x_path.len() < steps {
        return Err(shape_err("rollout_y (path length)", steps, x_path.len()));
    }
    let d_y = spec.b.rows();
    let d_w = dw.dim();
    if tape.shape(y0) != [d_y] {
        return Err(shape_err("rollout_y (y0)", [d_y], tape.shape(y0)));
    }
    let dt = grid.dt();
    let mut y = y0;
    for n in 0..steps {
        let x = x_path[n];
        let z = z_provider(tape, n, x)?;
        if tape.shape(z) != [d_y, d_w] {
            return Err(shape_err("rollout_y (Z)", [d_y, d_w], tape.shape(z)));
        }
        let f = generator_f(tape, spec, x, y, z)?;
        let f = tape.scale(f, -dt);
        let dwn = tape.constant(Tensor::from_parts(vec![d_w], dw.row(n).to_vec()));
        let noise = tape.matvec(z, dwn)?;
        let moved = tape.add(y, f)?;
        y = tape.add(moved, noise)?;
        check_bounded(tape.value(y), n + 1)?;
    }
    Ok(y)
}

fn check_bounded(y: &Tensor, step: usize) -> Result<()> {
    for &v in y.data() {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite Y entry {v}"),
            });
        }
        if v.abs() > DIVERGENCE_BOUND {
            return Err(Error::Diverged {
                step,
                detail: format!("|Y| entry {v:e} exceeds {DIVERGENCE_BOUND:e}"),
            });
        }
    }
    Ok(())
}
