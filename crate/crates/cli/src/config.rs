//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Matrices of the forward
//! process and the generator are set as multiples of the identity; the library
//! itself accepts arbitrary matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use bsdegen::autodiff::Tensor;
use bsdegen::bsde::{Dims, GeneratorSpec};
use bsdegen::mmd::{KernelFamily, KernelSpec};
use bsdegen::nn::RmsProp;
use bsdegen::sde::{ForwardSpec, TimeGrid};
use bsdegen::trainer::{Strategy, TrainConfig};

/// A problem with a key, value or file: reported as a usage error.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardKind {
    Ou,
    Brownian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub data: Option<PathBuf>,
    pub subset: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub d_x: usize,
    pub d_w: usize,
    pub horizon: f64,
    pub steps: usize,
    pub forward: ForwardKind,
    pub ou_lambda: f64,
    pub ou_sigma: f64,
    pub gen_a: f64,
    pub gen_b: f64,
    pub kappa: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub kernel: KernelFamily,
    /// Empty means the default ladder for the image dimension.
    pub bandwidths: Vec<f64>,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub timing: bool,
}

pub const KEYS: &[&str] = &[
    "data",
    "subset",
    "image_rows",
    "image_cols",
    "d_x",
    "d_w",
    "horizon",
    "steps",
    "forward",
    "ou_lambda",
    "ou_sigma",
    "gen_a",
    "gen_b",
    "kappa",
    "hidden",
    "dropout",
    "kernel",
    "bandwidths",
    "strategy",
    "alpha",
    "beta",
    "lr",
    "rho",
    "eps",
    "batch_size",
    "iterations",
    "seed",
    "workers",
    "timing",
];

impl Default for CliConfig {
    /// The desk-scale run: 2,000 images at 8×8.
    fn default() -> Self {
        let t = TrainConfig::desk(0);
        Self {
            data: None,
            subset: 2000,
            image_rows: 8,
            image_cols: 8,
            d_x: t.dims.d_x,
            d_w: t.dims.d_w,
            horizon: t.grid.horizon(),
            steps: t.grid.steps(),
            forward: ForwardKind::Ou,
            ou_lambda: 1.0,
            ou_sigma: std::f64::consts::SQRT_2,
            gen_a: 0.0,
            gen_b: -0.5,
            kappa: t.generator.kappa,
            hidden: t.hidden,
            dropout: t.dropout_p,
            kernel: KernelFamily::Multiscale,
            bandwidths: Vec::new(),
            strategy: t.strategy,
            alpha: t.alpha,
            beta: t.beta,
            lr: t.optimizer.lr,
            rho: t.optimizer.decay,
            eps: t.optimizer.eps,
            batch_size: t.batch_size,
            iterations: t.iterations,
            seed: 0,
            workers: None,
            timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("invalid value {value:?} for key {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "subset" => self.subset = parse(key, v)?,
            "image_rows" => self.image_rows = parse(key, v)?,
            "image_cols" => self.image_cols = parse(key, v)?,
            "d_x" => self.d_x = parse(key, v)?,
            "d_w" => self.d_w = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "forward" => {
                self.forward = match v {
                    "ou" => ForwardKind::Ou,
                    "brownian" => ForwardKind::Brownian,
                    _ => return Err(ConfigError(format!("forward must be ou or brownian, got {v:?}"))),
                }
            }
            "ou_lambda" => self.ou_lambda = parse(key, v)?,
            "ou_sigma" => self.ou_sigma = parse(key, v)?,
            "gen_a" => self.gen_a = parse(key, v)?,
            "gen_b" => self.gen_b = parse(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "kernel" => {
                self.kernel = match v {
                    "rbf" => KernelFamily::Rbf,
                    "multiscale" => KernelFamily::Multiscale,
                    _ => return Err(ConfigError(format!("kernel must be rbf or multiscale, got {v:?}"))),
                }
            }
            "bandwidths" => self.bandwidths = parse_list(key, v)?,
            "strategy" => {
                self.strategy = match v {
                    "decoder_only" => Strategy::DecoderOnly,
                    "encoder_decoder" => Strategy::EncoderDecoder,
                    _ => {
                        return Err(ConfigError(format!(
                            "strategy must be decoder_only or encoder_decoder, got {v:?}"
                        )))
                    }
                }
            }
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = Some(parse(key, v)?),
            "timing" => self.timing = parse(key, v)?,
            _ => {
                return Err(ConfigError(format!(
                    "unknown config key {key:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// `key=value` pair from a `--set` argument.
    pub fn apply_assignment(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got {arg:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn d_y(&self) -> usize {
        self.image_rows * self.image_cols
    }

    pub fn forward_spec(&self) -> ForwardSpec {
        match self.forward {
            ForwardKind::Brownian => ForwardSpec::Brownian,
            ForwardKind::Ou => {
                let (dx, dw) = (self.d_x, self.d_w);
                let mut sigma = vec![0.0; dx * dw];
                for i in 0..dx.min(dw) {
                    sigma[i * dw + i] = self.ou_sigma;
                }
                ForwardSpec::Ou {
                    lambda: Tensor::identity(dx).map(|v| v * self.ou_lambda),
                    sigma: Tensor::new(vec![dx, dw], sigma).expect("finite"),
                }
            }
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let (dy, dx) = (self.d_y(), self.d_x);
        let mut a = vec![0.0; dy * dx];
        for i in 0..dy.min(dx) {
            a[i * dx + i] = self.gen_a;
        }
        GeneratorSpec {
            a: Tensor::new(vec![dy, dx], a).expect("finite"),
            b: Tensor::identity(dy).map(|v| v * self.gen_b),
            kappa: self.kappa,
        }
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec, ConfigError> {
        let k = match (self.kernel, self.bandwidths.is_empty()) {
            (KernelFamily::Multiscale, true) => Ok(KernelSpec::default_multiscale(self.d_y())),
            (KernelFamily::Multiscale, false) => KernelSpec::multiscale(self.bandwidths.clone()),
            (KernelFamily::Rbf, true) => KernelSpec::rbf((self.d_y() as f64).sqrt()),
            (KernelFamily::Rbf, false) => {
                let k = KernelSpec {
                    family: KernelFamily::Rbf,
                    bandwidths: self.bandwidths.clone(),
                };
                k.validate().map(|_| k)
            }
        };
        k.map_err(|e| ConfigError(e.to_string()))
    }

    /// The library training configuration, fully validated.
    pub fn train_config(&self, workers: usize) -> Result<TrainConfig, ConfigError> {
        let grid = TimeGrid::new(self.horizon, self.steps).map_err(|e| ConfigError(e.to_string()))?;
        if self.image_rows == 0 || self.image_cols == 0 {
            return Err(ConfigError("image_rows and image_cols must be positive".into()));
        }
        let tc = TrainConfig {
            dims: Dims {
                d_x: self.d_x,
                d_y: self.d_y(),
                d_w: self.d_w,
            },
            grid,
            forward: self.forward_spec(),
            generator: self.generator_spec(),
            hidden: self.hidden.clone(),
            dropout_p: self.dropout,
            kernel: self.kernel_spec()?,
            strategy: self.strategy,
            alpha: self.alpha,
            beta: self.beta,
            optimizer: RmsProp {
                lr: self.lr,
                decay: self.rho,
                eps: self.eps,
            },
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            workers,
            log_timing: self.timing,
        };
        tc.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.subset < self.batch_size {
            return Err(ConfigError(format!(
                "subset ({}) must hold at least one batch ({})",
                self.subset, self.batch_size
            )));
        }
        Ok(tc)
    }

    /// The effective configuration as `key=value` text, parseable by
    /// [`CliConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        if let Some(d) = &self.data {
            m.insert("data", d.display().to_string());
        }
        m.insert("subset", self.subset.to_string());
        m.insert("image_rows", self.image_rows.to_string());
        m.insert("image_cols", self.image_cols.to_string());
        m.insert("d_x", self.d_x.to_string());
        m.insert("d_w", self.d_w.to_string());
        m.insert("horizon", self.horizon.to_string());
        m.insert("steps", self.steps.to_string());
        m.insert(
            "forward",
            match self.forward {
                ForwardKind::Ou => "ou",
                ForwardKind::Brownian => "brownian",
            }
            .into(),
        );
        m.insert("ou_lambda", self.ou_lambda.to_string());
        m.insert("ou_sigma", self.ou_sigma.to_string());
        m.insert("gen_a", self.gen_a.to_string());
        m.insert("gen_b", self.gen_b.to_string());
        m.insert("kappa", self.kappa.to_string());
        m.insert("hidden", join(&self.hidden));
        m.insert("dropout", self.dropout.to_string());
        m.insert(
            "kernel",
            match self.kernel {
                KernelFamily::Rbf => "rbf",
                KernelFamily::Multiscale => "multiscale",
            }
            .into(),
        );
        m.insert("bandwidths", join(&self.bandwidths));
        m.insert(
            "strategy",
            match self.strategy {
                Strategy::DecoderOnly => "decoder_only",
                Strategy::EncoderDecoder => "encoder_decoder",
            }
            .into(),
        );
        m.insert("alpha", self.alpha.to_string());
        m.insert("beta", self.beta.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("rho", self.rho.to_string());
        m.insert("eps", self.eps.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("iterations", self.iterations.to_string());
        m.insert("seed", self.seed.to_string());
        if let Some(w) = self.workers {
            m.insert("workers", w.to_string());
        }
        m.insert("timing", self.timing.to_string());
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_run() {
        let c = CliConfig::default();
        let t = c.train_config(1).unwrap();
        assert_eq!(t, TrainConfig::desk(0));
    }

    #[test]
    fn text_round_trip() {
        let mut c = CliConfig::default();
        c.apply_text("# comment\n\nseed = 7\nhidden=8,8\nstrategy=encoder_decoder\nbandwidths=1,2\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.hidden, vec![8, 8]);
        let mut d = CliConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        for k in KEYS {
            assert!(c.to_text().contains(&format!("{k}=")) || *k == "data" || *k == "workers", "{k}");
        }
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut c = CliConfig::default();
        assert!(c.apply_text("sead=7").unwrap_err().0.contains("unknown config key"));
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("seed=abc").is_err());
        assert!(c.apply_assignment("kernel=laplace").is_err());
        assert!(c.apply_assignment("forward").is_err());
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut c = CliConfig::default();
        c.set("batch_size", "1").unwrap();
        assert!(c.train_config(1).is_err());
        let mut c = CliConfig::default();
        c.set("subset", "100").unwrap();
        assert!(c.train_config(1).is_err());
        let mut c = CliConfig::default();
        c.set("forward", "brownian").unwrap();
        c.set("d_w", "3").unwrap();
        assert!(c.train_config(1).is_err());
        let mut c = CliConfig::default();
        c.set("kernel", "rbf").unwrap();
        c.set("bandwidths", "1,2").unwrap();
        assert!(c.train_config(1).is_err());
    }
}
