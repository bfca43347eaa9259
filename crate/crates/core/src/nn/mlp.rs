use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// Shape of a GELU multilayer perceptron with a linear output map.
///
/// Dropout, when enabled, follows every hidden activation and never the
/// output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_p: f64,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

impl MlpConfig {
    pub fn new(input_dim: usize, output_dim: usize, hidden_widths: Vec<usize>, dropout_p: f64) -> Result<Self> {
        let c = Self {
            input_dim,
            output_dim,
            hidden_widths,
            dropout_p,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument("at least one hidden layer is required".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// `(out, in)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_widths);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Glorot-normal weights `N(0, 2/(fan_in+fan_out))`, zero biases.
pub fn init_mlp(config: &MlpConfig, rng: &mut Rng) -> Result<MlpParams> {
    config.validate()?;
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(out, inp)| {
            let std = (2.0 / (inp + out) as f64).sqrt();
            let w = (0..out * inp).map(|_| std * rng.normal()).collect();
            Dense {
                weight: Tensor::from_parts(vec![out, inp], w),
                bias: Tensor::zeros(vec![out]),
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

impl MlpParams {
    pub fn zeros(config: &MlpConfig) -> Self {
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| Dense {
                weight: Tensor::zeros(vec![out, inp]),
                bias: Tensor::zeros(vec![out]),
            })
            .collect();
        Self { layers }
    }

    /// Flattened `[w₀, b₀, w₁, b₁, …]`.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    /// Inverse of [`MlpParams::tensors`], validated against `config`.
    pub fn from_tensors(config: &MlpConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let dims = config.layer_dims();
        if tensors.len() != 2 * dims.len() {
            return Err(shape_err("MlpParams::from_tensors", 2 * dims.len(), tensors.len()));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(dims.len());
        for (out, inp) in dims {
            let weight = it.next().expect("length checked");
            let bias = it.next().expect("length checked");
            if weight.shape() != [out, inp] {
                return Err(shape_err("layer weight", [out, inp], weight.shape()));
            }
            if bias.shape() != [out] {
                return Err(shape_err("layer bias", [out], bias.shape()));
            }
            layers.push(Dense { weight, bias });
        }
        Ok(Self { layers })
    }

    /// Records every weight and bias as a parameter leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundMlp { layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An [`MlpParams`] whose tensors are leaves on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Gradients in [`MlpParams::tensors`] order.
    pub fn grads(&self, grads: &GradMap) -> Result<Vec<Tensor>> {
        self.leaves()
            .into_iter()
            .map(|v| grads.get(v).cloned().ok_or(Error::MissingGradient(v.index())))
            .collect()
    }

    /// Forward pass recorded on `tape`. Train mode draws a fresh inverted-dropout
    /// mask after each hidden activation; eval mode never touches `rng`.
    pub fn apply(&self, tape: &mut Tape, config: &MlpConfig, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if tape.shape(x) != [config.input_dim] {
            return Err(shape_err("mlp input", [config.input_dim], tape.shape(x)));
        }
        let p = config.dropout_p;
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(w, b, h)?;
            if i == last {
                break;
            }
            h = tape.gelu(h)?;
            if mode == Mode::Train && p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let n = tape.shape(h)[0];
                let mask = (0..n)
                    .map(|_| if rng.uniform() < p { 0.0 } else { keep })
                    .collect();
                h = tape.mask_mul(h, Tensor::from_parts(vec![n], mask))?;
            }
        }
        Ok(h)
    }
}

/// Binds `params` to `tape` and applies the network to `x`.
pub fn mlp_apply(
    params: &MlpParams,
    config: &MlpConfig,
    x: Var,
    mode: Mode,
    rng: &mut Rng,
    tape: &mut Tape,
) -> Result<(Var, BoundMlp)> {
    let bound = params.bind(tape);
    let y = bound.apply(tape, config, x, mode, rng)?;
    Ok((y, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MlpConfig {
        MlpConfig::new(3, 2, vec![4, 5], 0.0).unwrap()
    }

    #[test]
    fn default_width_shapes() {
        let c = MlpConfig::new(32, 784, DEFAULT_HIDDEN.to_vec(), 0.2).unwrap();
        let p = init_mlp(&c, &mut Rng::seed(7)).unwrap();
        let shapes: Vec<Vec<usize>> = p.layers.iter().map(|l| l.weight.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![256, 32], vec![256, 256], vec![256, 256], vec![784, 256]]);
        let biases: Vec<usize> = p.layers.iter().map(|l| l.bias.len()).collect();
        assert_eq!(biases, vec![256, 256, 256, 784]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_mlp(&tiny(), &mut Rng::seed(1)).unwrap();
        let b = init_mlp(&tiny(), &mut Rng::seed(1)).unwrap();
        assert_eq!(a, b);
        let c = init_mlp(&tiny(), &mut Rng::seed(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_hidden_rejected() {
        assert!(MlpConfig::new(2, 2, vec![], 0.0).is_err());
        assert!(MlpConfig::new(2, 2, vec![3], 1.0).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let c = tiny();
        let p = MlpParams::zeros(&c);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, -3.0, 2.0]).unwrap());
        let (y, _) = mlp_apply(&p, &c, x, Mode::Eval, &mut Rng::seed(0), &mut t).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let c = MlpConfig::new(3, 2, vec![4], 0.5).unwrap();
        let p = init_mlp(&c, &mut Rng::seed(3)).unwrap();
        let run = |seed| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(vec![0.2, 0.4, -1.0]).unwrap());
            let (y, _) = mlp_apply(&p, &c, x, Mode::Eval, &mut Rng::seed(seed), &mut t).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(1), run(1));
        assert_eq!(run(1), run(99));
    }

    #[test]
    fn input_dimension_checked() {
        let c = tiny();
        let p = MlpParams::zeros(&c);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(mlp_apply(&p, &c, x, Mode::Eval, &mut Rng::seed(0), &mut t).is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let c = tiny();
        let p = init_mlp(&c, &mut Rng::seed(4)).unwrap();
        let q = MlpParams::from_tensors(&c, p.tensors()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.names("z")[3], "z.layer1.bias");
        let mut short = p.tensors();
        short.pop();
        assert!(MlpParams::from_tensors(&c, short).is_err());
    }
}
