use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{rollout_y, GeneratorSpec};
use crate::autodiff::{GradMap, Tape, Tensor, Var};
use crate::error::{shape_err, CheckpointError, Error, Result};
use crate::nn::{init_mlp, BoundMlp, Checkpoint, MlpConfig, MlpParams, Mode, NamedTensor};
use crate::rng::Rng;
use crate::sde::{brownian_increments, euler_forward_x, record_euler_step, sample_initial, BrownianIncrements, ForwardSpec, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub d_y: usize,
    pub d_w: usize,
}

/// Everything about a model except its tensors. This is the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub y0_net: MlpConfig,
    pub z_net: MlpConfig,
    pub encoder: bool,
    /// `(rows, cols)` when `d_Y` is a flattened image.
    pub image_shape: Option<(usize, usize)>,
}

impl ModelConfig {
    pub fn new(dims: Dims, grid: TimeGrid, hidden: &[usize], dropout_p: f64, encoder: bool) -> Result<Self> {
        let Dims { d_x, d_y, d_w } = dims;
        let c = Self {
            dims,
            grid,
            y0_net: MlpConfig::new(d_x, d_y, hidden.to_vec(), dropout_p)?,
            z_net: MlpConfig::new(1 + d_x, d_y * d_w, hidden.to_vec(), dropout_p)?,
            encoder,
            image_shape: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { d_x, d_y, d_w } = self.dims;
        if d_x == 0 || d_y == 0 || d_w == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        self.y0_net.validate()?;
        self.z_net.validate()?;
        if (self.y0_net.input_dim, self.y0_net.output_dim) != (d_x, d_y) {
            return Err(shape_err(
                "y0 network",
                (d_x, d_y),
                (self.y0_net.input_dim, self.y0_net.output_dim),
            ));
        }
        if (self.z_net.input_dim, self.z_net.output_dim) != (1 + d_x, d_y * d_w) {
            return Err(shape_err(
                "z network",
                (1 + d_x, d_y * d_w),
                (self.z_net.input_dim, self.z_net.output_dim),
            ));
        }
        if let Some((r, c)) = self.image_shape {
            if r * c != d_y {
                return Err(shape_err("image shape", d_y, r * c));
            }
        }
        Ok(())
    }
}

/// Affine map from a noisy image to the forward process start, `ζ = Wξ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenModel {
    pub config: ModelConfig,
    pub forward: ForwardSpec,
    pub generator: GeneratorSpec,
    pub y0: MlpParams,
    pub z: MlpParams,
    pub encoder: Option<Encoder>,
}

/// How the forward process starts for one sample.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// `ζ` given directly.
    Fixed(&'a Tensor),
    /// `ζ = encoder(ξ_noisy)`; the forward path is recorded on the tape.
    Encoded(&'a Tensor),
}

/// A model's trainable tensors bound as leaves on one tape.
pub struct BoundModel {
    y0: BoundMlp,
    z: BoundMlp,
    encoder: Option<(Var, Var)>,
}

impl BoundModel {
    /// Gradients in [`GenModel::params`] order.
    pub fn grads(&self, grads: &GradMap) -> Result<Vec<Tensor>> {
        let mut out = self.y0.grads(grads)?;
        out.extend(self.z.grads(grads)?);
        if let Some((w, b)) = self.encoder {
            for v in [w, b] {
                out.push(grads.get(v).cloned().ok_or(Error::MissingGradient(v.index()))?);
            }
        }
        Ok(out)
    }
}

impl GenModel {
    pub fn init(config: ModelConfig, forward: ForwardSpec, generator: GeneratorSpec, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let y0 = init_mlp(&config.y0_net, rng)?;
        let z = init_mlp(&config.z_net, rng)?;
        let encoder = config.encoder.then(|| {
            let Dims { d_x, d_y, .. } = config.dims;
            let std = (2.0 / (d_x + d_y) as f64).sqrt();
            Encoder {
                weight: Tensor::from_parts(vec![d_x, d_y], rng.normals(d_x * d_y).iter().map(|v| std * v).collect()),
                bias: Tensor::zeros(vec![d_x]),
            }
        });
        let m = Self {
            config,
            forward,
            generator,
            y0,
            z,
            encoder,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let Dims { d_x, d_y, d_w } = self.config.dims;
        self.forward.validate(d_x, d_w)?;
        self.generator.validate(d_x, d_y)?;
        MlpParams::from_tensors(&self.config.y0_net, self.y0.tensors())?;
        MlpParams::from_tensors(&self.config.z_net, self.z.tensors())?;
        match (&self.encoder, self.config.encoder) {
            (None, false) => {}
            (Some(e), true) => {
                if e.weight.shape() != [d_x, d_y] || e.bias.shape() != [d_x] {
                    return Err(shape_err("encoder", [d_x, d_y], e.weight.shape()));
                }
            }
            _ => return Err(Error::InvalidArgument("encoder presence disagrees with config".into())),
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.config.dims
    }

    pub fn grid(&self) -> TimeGrid {
        self.config.grid
    }

    /// `[y0 layers…, z layers…, encoder weight, encoder bias]`.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.y0.tensors();
        out.extend(self.z.tensors());
        if let Some(e) = &self.encoder {
            out.push(e.weight.clone());
            out.push(e.bias.clone());
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.y0.names("y0");
        out.extend(self.z.names("z"));
        if self.encoder.is_some() {
            out.push("encoder.weight".into());
            out.push("encoder.bias".into());
        }
        out
    }

    /// Inverse of [`GenModel::params`].
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let ny = self.y0.num_tensors();
        let nz = self.z.num_tensors();
        let ne = if self.encoder.is_some() { 2 } else { 0 };
        if params.len() != ny + nz + ne {
            return Err(shape_err("GenModel::set_params", ny + nz + ne, params.len()));
        }
        let mut it = params.into_iter();
        let y0 = MlpParams::from_tensors(&self.config.y0_net, it.by_ref().take(ny).collect())?;
        let z = MlpParams::from_tensors(&self.config.z_net, it.by_ref().take(nz).collect())?;
        let encoder = match &self.encoder {
            Some(old) => {
                let weight = it.next().expect("length checked");
                let bias = it.next().expect("length checked");
                if weight.shape() != old.weight.shape() || bias.shape() != old.bias.shape() {
                    return Err(shape_err("encoder", old.weight.shape(), weight.shape()));
                }
                Some(Encoder { weight, bias })
            }
            None => None,
        };
        self.y0 = y0;
        self.z = z;
        self.encoder = encoder;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            y0: self.y0.bind(tape),
            z: self.z.bind(tape),
            encoder: self
                .encoder
                .as_ref()
                .map(|e| (tape.param(e.weight.clone()), tape.param(e.bias.clone()))),
        }
    }

    /// Records one full sample: forward path, `Y₀ = y0_net(ζ)`, then the
    /// rollout with `Z_n = z_net(t_n, X_n)`. Returns `Y_T`.
    pub fn record_sample(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        start: Start<'_>,
        dw: &BrownianIncrements,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let Dims { d_x, d_y, d_w } = self.config.dims;
        let grid = self.grid();
        let steps = grid.steps();
        if dw.dim() != d_w {
            return Err(shape_err("record_sample (d_W)", d_w, dw.dim()));
        }
        let path: Vec<Var> = match start {
            Start::Fixed(zeta) => {
                let p = euler_forward_x(&self.forward, zeta, dw, &grid)?;
                (0..steps)
                    .map(|n| tape.constant(Tensor::from_parts(vec![d_x], p.row(n).to_vec())))
                    .collect()
            }
            Start::Encoded(xi) => {
                let (w, b) = bound
                    .encoder
                    .ok_or_else(|| Error::InvalidArgument("model has no encoder".into()))?;
                if xi.shape() != [d_y] {
                    return Err(shape_err("record_sample (ξ)", [d_y], xi.shape()));
                }
                let xi = tape.constant(xi.clone());
                let mut x = tape.affine(w, b, xi)?;
                let mut path = Vec::with_capacity(steps);
                path.push(x);
                for n in 0..steps - 1 {
                    x = record_euler_step(tape, &self.forward, x, dw.row(n), grid.dt())?;
                    path.push(x);
                }
                path
            }
        };
        let y0 = bound.y0.apply(tape, &self.config.y0_net, path[0], mode, rng)?;
        rollout_y(tape, &self.generator, &grid, y0, &path, dw, |tape, n, x| {
            let t = tape.constant(Tensor::from_parts(vec![1], vec![grid.t(n)]));
            let input = tape.concat(&[t, x])?;
            let out = bound.z.apply(tape, &self.config.z_net, input, mode, rng)?;
            tape.reshape(out, vec![d_y, d_w])
        })
    }

    /// Draws `ζ` and `ΔW` from `rng` and records an eval-mode sample.
    pub fn sample_one(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let zeta = sample_initial(self.config.dims.d_x, rng)?;
        let dw = brownian_increments(&self.grid(), self.config.dims.d_w, rng)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let y = self.record_sample(&mut tape, &bound, Start::Fixed(&zeta), &dw, Mode::Eval, rng)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self, meta: Value) -> Checkpoint {
        let mut params: Vec<NamedTensor> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, tensor)| NamedTensor { name, tensor })
            .collect();
        let mut push = |name: &str, tensor: &Tensor| {
            params.push(NamedTensor {
                name: name.into(),
                tensor: tensor.clone(),
            })
        };
        push("generator.a", &self.generator.a);
        push("generator.b", &self.generator.b);
        if let ForwardSpec::Ou { lambda, sigma } = &self.forward {
            push("forward.lambda", lambda);
            push("forward.sigma", sigma);
        }
        let forward_kind = match self.forward {
            ForwardSpec::Brownian => "brownian",
            ForwardSpec::Ou { .. } => "ou",
        };
        Checkpoint {
            configs: serde_json::json!({
                "model": self.config,
                "forward": forward_kind,
                "kappa": self.generator.kappa,
            }),
            meta,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(CheckpointError::Inconsistent(msg));
        let config: ModelConfig = serde_json::from_value(ck.configs["model"].clone())
            .map_err(|e| Error::Checkpoint(CheckpointError::Header(format!("model config: {e}"))))?;
        config.validate()?;
        let kappa = ck.configs["kappa"]
            .as_f64()
            .ok_or_else(|| bad("missing generator κ".into()))?;
        let get = |name: &str| {
            ck.param(name)
                .cloned()
                .ok_or_else(|| bad(format!("missing parameter {name}")))
        };
        let forward = match ck.configs["forward"].as_str() {
            Some("brownian") => ForwardSpec::Brownian,
            Some("ou") => ForwardSpec::Ou {
                lambda: get("forward.lambda")?,
                sigma: get("forward.sigma")?,
            },
            other => return Err(bad(format!("unknown forward kind {other:?}"))),
        };
        let generator = GeneratorSpec {
            a: get("generator.a")?,
            b: get("generator.b")?,
            kappa,
        };
        let mut model = Self {
            y0: MlpParams::zeros(&config.y0_net),
            z: MlpParams::zeros(&config.z_net),
            encoder: config.encoder.then(|| Encoder {
                weight: Tensor::zeros(vec![config.dims.d_x, config.dims.d_y]),
                bias: Tensor::zeros(vec![config.dims.d_x]),
            }),
            config,
            forward,
            generator,
        };
        let params = model
            .param_names()
            .iter()
            .map(|n| get(n))
            .collect::<Result<Vec<_>>>()?;
        model.set_params(params)?;
        model.validate()?;
        Ok(model)
    }
}

/// `n` eval-mode samples as rows of an `[n × d_Y]` tensor (zero rows when
/// `n = 0`). Sample `i` uses its own substream, so the batch does not depend
/// on the number of worker threads.
pub fn generate_batch(model: &GenModel, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let base = rng.next_u64();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| model.sample_one(&mut Rng::substream(base, 0, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let d_y = model.config.dims.d_y;
    Ok(Tensor::from_parts(vec![n, d_y], rows.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, relative_error};
    use crate::nn::{load_checkpoint, save_checkpoint};

    fn micro(encoder: bool) -> GenModel {
        let dims = Dims { d_x: 2, d_y: 2, d_w: 2 };
        let cfg = ModelConfig::new(dims, TimeGrid::new(1.0, 3).unwrap(), &[4], 0.0, encoder).unwrap();
        GenModel::init(cfg, ForwardSpec::standard_ou(2), GeneratorSpec::default_for(2, 2), &mut Rng::seed(42)).unwrap()
    }

    /// `L = sum(Y_T²)` for fixed noise.
    fn loss(model: &GenModel, start: &Tensor, encoded: bool, dw: &BrownianIncrements) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s = if encoded { Start::Encoded(start) } else { Start::Fixed(start) };
        let y = model
            .record_sample(&mut tape, &bound, s, dw, Mode::Train, &mut Rng::seed(0))
            .unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        (tape.value(l).data()[0], bound.grads(&g).unwrap())
    }

    fn check_gradients(encoded: bool) {
        let model = micro(encoded);
        let mut rng = Rng::seed(5);
        let start = sample_initial(2, &mut rng).unwrap();
        let dw = brownian_increments(&model.grid(), 2, &mut rng).unwrap();
        let (_, grads) = loss(&model, &start, encoded, &dw);
        let params = model.params();
        assert_eq!(grads.len(), params.len());
        for k in 0..params.len() {
            let fd = finite_diff_gradient(
                |p| {
                    let mut m = model.clone();
                    let mut ps = params.clone();
                    ps[k] = p.clone();
                    m.set_params(ps).unwrap();
                    loss(&m, &start, encoded, &dw).0
                },
                &params[k],
                1e-6,
            )
            .unwrap();
            let err = relative_error(grads[k].data(), fd.data());
            assert!(err <= 1e-4, "param {k}: relative error {err}");
        }
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        check_gradients(false);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        check_gradients(true);
    }

    #[test]
    fn generation_is_deterministic_and_finite() {
        let model = micro(false);
        let a = generate_batch(&model, 5, &mut Rng::seed(3)).unwrap();
        let b = generate_batch(&model, 5, &mut Rng::seed(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 2]);
        assert!(a.is_finite());
        let empty = generate_batch(&model, 0, &mut Rng::seed(3)).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
    }

    #[test]
    fn full_size_untrained_model_is_finite() {
        let dims = Dims { d_x: 32, d_y: 784, d_w: 32 };
        let cfg = ModelConfig::new(dims, TimeGrid::new(1.0, 200).unwrap(), &[16], 0.2, false).unwrap();
        let model = GenModel::init(
            cfg,
            ForwardSpec::standard_ou(32),
            GeneratorSpec::default_for(32, 784),
            &mut Rng::seed(1),
        )
        .unwrap();
        let out = generate_batch(&model, 2, &mut Rng::seed(2)).unwrap();
        assert_eq!(out.shape(), &[2, 784]);
        assert!(out.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_preserves_samples() {
        for encoder in [false, true] {
            let mut model = micro(encoder);
            model.config.image_shape = Some((1, 2));
            let bytes = save_checkpoint(&model.to_checkpoint(serde_json::json!({"iterations": 7})));
            let ck = load_checkpoint(&bytes).unwrap();
            assert_eq!(ck.meta["iterations"], 7);
            let back = GenModel::from_checkpoint(&ck).unwrap();
            assert_eq!(back, model);
            assert_eq!(
                generate_batch(&back, 3, &mut Rng::seed(9)).unwrap(),
                generate_batch(&model, 3, &mut Rng::seed(9)).unwrap()
            );
        }
    }

    #[test]
    fn missing_checkpoint_tensor_is_reported() {
        let model = micro(false);
        let mut ck = model.to_checkpoint(Value::Null);
        ck.params.retain(|p| p.name != "z.layer1.bias");
        let err = GenModel::from_checkpoint(&ck).unwrap_err();
        assert!(err.to_string().contains("z.layer1.bias"), "{err}");
    }

    #[test]
    fn mismatched_network_config_rejected() {
        let dims = Dims { d_x: 2, d_y: 3, d_w: 2 };
        let mut cfg = ModelConfig::new(dims, TimeGrid::new(1.0, 3).unwrap(), &[4], 0.0, false).unwrap();
        cfg.z_net.output_dim = 5;
        assert!(cfg.validate().is_err());
    }
}
