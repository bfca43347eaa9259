//! Training loop for both strategies, loss logging and evaluation.
//!
//! Every iteration runs in two phases. Each batch member is first rolled out
//! on its own tape. The MMD loss is then taken on a separate batch tape over
//! the stacked terminal values, and its gradient row `∂L/∂Y_T^i` seeds a reverse
//! sweep of sample tape `i`. The per-sample parameter gradients are summed in
//! index order, so the update does not depend on how many workers ran the
//! phases.

mod log;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Tensor, Var};
use crate::bsde::{generate_batch, BoundModel, Dims, GenModel, GeneratorSpec, ModelConfig, Start};
use crate::data::{noisy_mix, BatchIter, ImageDataset};
use crate::error::{shape_err, Error, Result};
use crate::mmd::{mmd2, training_loss, KernelSpec};
use crate::nn::{rmsprop_step, save_checkpoint, Mode, RmsProp, RmsPropState};
use crate::rng::Rng;
use crate::sde::{brownian_increments, sample_initial, ForwardSpec, TimeGrid};

pub use log::{LogRecord, RunLog, CSV_HEADER};

/// Hidden widths of the desk-scale preset.
pub const DESK_HIDDEN: [usize; 3] = [64, 64, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `ζ ~ N(0, I)`, loss is the MMD² alone.
    DecoderOnly,
    /// `ζ = encoder(αξ + (1−α)ε)`, loss is MMD² + β·MSE against the clean `ξ`.
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub forward: ForwardSpec,
    pub generator: GeneratorSpec,
    pub hidden: Vec<usize>,
    pub dropout_p: f64,
    pub kernel: KernelSpec,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub optimizer: RmsProp,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Threads for the per-sample phases; results do not depend on it.
    pub workers: usize,
    /// Record wall-clock seconds in the CSV; off keeps the CSV reproducible.
    pub log_timing: bool,
}

impl TrainConfig {
    /// 8×8 images, `d_X = d_W = 16`, `N = 20`, `T = 1`, batch 128, multiscale
    /// kernel, RMSprop at `1e−4`, 500 decoder-only iterations.
    pub fn desk(seed: u64) -> Self {
        let dims = Dims { d_x: 16, d_y: 64, d_w: 16 };
        Self {
            dims,
            grid: TimeGrid::new(1.0, 20).expect("valid grid"),
            forward: ForwardSpec::standard_ou(16),
            generator: GeneratorSpec::default_for(16, 64),
            hidden: DESK_HIDDEN.to_vec(),
            dropout_p: 0.2,
            kernel: KernelSpec::default_multiscale(64),
            strategy: Strategy::DecoderOnly,
            alpha: 0.5,
            beta: 1.0,
            optimizer: RmsProp::default(),
            batch_size: 128,
            iterations: 500,
            seed,
            workers: 1,
            log_timing: false,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(
            self.dims,
            self.grid,
            &self.hidden,
            self.dropout_p,
            self.strategy == Strategy::EncoderDecoder,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        let Dims { d_x, d_y, d_w } = self.dims;
        self.forward.validate(d_x, d_w)?;
        self.generator.validate(d_x, d_y)?;
        self.kernel.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        let RmsProp { lr, decay, eps } = self.optimizer;
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&decay) || !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid optimizer settings lr={lr}, decay={decay}, eps={eps}"
            )));
        }
        if self.strategy == Strategy::EncoderDecoder {
            if !(self.alpha > 0.0 && self.alpha <= 1.0) {
                return Err(Error::InvalidArgument(format!("α must lie in (0, 1], got {}", self.alpha)));
            }
            if !(self.beta >= 0.0 && self.beta.is_finite()) {
                return Err(Error::InvalidArgument(format!("β must be non-negative, got {}", self.beta)));
            }
        }
        Ok(())
    }

    fn effective_beta(&self) -> f64 {
        match self.strategy {
            Strategy::DecoderOnly => 0.0,
            Strategy::EncoderDecoder => self.beta,
        }
    }
}

/// Substream roles that are not per-sample.
const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

pub struct TrainOutput {
    pub model: GenModel,
    pub checkpoint: Vec<u8>,
    pub log: RunLog,
}

/// Trains from a fresh initialization. When `csv` is given, the loss log is
/// written there and flushed after every iteration.
pub fn train(config: &TrainConfig, dataset: &ImageDataset, mut csv: Option<&mut dyn Write>) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.dim() != config.dims.d_y {
        return Err(shape_err("train (image size vs d_Y)", config.dims.d_y, dataset.dim()));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut model_config = config.model_config()?;
    model_config.image_shape = Some((dataset.rows(), dataset.cols()));
    let mut model = GenModel::init(
        model_config,
        config.forward.clone(),
        config.generator.clone(),
        &mut Rng::substream(config.seed, 0, INIT_STREAM),
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut batches = BatchIter::new(dataset.len(), config.batch_size, Rng::substream(config.seed, 0, BATCH_STREAM))?;
    let mut state = RmsPropState::new(&model.params());
    let mut log = RunLog::default();
    if let Some(w) = csv.as_deref_mut() {
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
    }
    let start = Instant::now();
    for iteration in 1..=config.iterations {
        let indices = batches.next().expect("endless iterator");
        let target = dataset.gather(&indices)?;
        let (loss, grads) = pool
            .install(|| iteration_gradient(&model, config, &target, iteration as u64))
            .map_err(|e| match e {
                Error::Diverged { .. } | Error::NonFinite(_) => Error::TrainingDiverged {
                    iteration,
                    detail: e.to_string(),
                },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration,
                detail: format!("loss is {loss}"),
            });
        }
        let mut params = model.params();
        rmsprop_step(&mut params, &grads, &mut state, &config.optimizer)?;
        model.set_params(params)?;

        let record = LogRecord {
            iteration,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{}", record.csv_row(config.log_timing))?;
            w.flush()?;
        }
        log.records.push(record);
    }

    let meta = json!({
        "iterations": config.iterations,
        "seed": config.seed,
        "strategy": config.strategy,
        "kernel": config.kernel,
        "final_loss": log.records.last().map(|r| r.loss),
    });
    let checkpoint = save_checkpoint(&model.to_checkpoint(meta));
    Ok(TrainOutput { model, checkpoint, log })
}

struct SampleTape {
    tape: Tape,
    bound: BoundModel,
    y: Var,
}

fn record_member(model: &GenModel, config: &TrainConfig, target: &Tensor, iteration: u64, i: usize) -> Result<SampleTape> {
    let Dims { d_x, d_w, .. } = config.dims;
    let mut rng = Rng::substream(config.seed, iteration, i as u64);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let y = match config.strategy {
        Strategy::DecoderOnly => {
            let zeta = sample_initial(d_x, &mut rng)?;
            let dw = brownian_increments(&config.grid, d_w, &mut rng)?;
            model.record_sample(&mut tape, &bound, Start::Fixed(&zeta), &dw, Mode::Train, &mut rng)?
        }
        Strategy::EncoderDecoder => {
            let xi = Tensor::from_parts(vec![target.cols()], target.row(i).to_vec());
            let noisy = noisy_mix(&xi, config.alpha, &mut rng)?;
            let dw = brownian_increments(&config.grid, d_w, &mut rng)?;
            model.record_sample(&mut tape, &bound, Start::Encoded(&noisy), &dw, Mode::Train, &mut rng)?
        }
    };
    Ok(SampleTape { tape, bound, y })
}

/// Loss and summed parameter gradient for one batch.
fn iteration_gradient(model: &GenModel, config: &TrainConfig, target: &Tensor, iteration: u64) -> Result<(f64, Vec<Tensor>)> {
    let b = target.rows();
    let samples = (0..b)
        .into_par_iter()
        .map(|i| record_member(model, config, target, iteration, i))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<&[f64]> = samples.iter().map(|s| s.tape.value(s.y).data()).collect();
    let generated = Tensor::stack_rows(&rows)?;
    let mut batch_tape = Tape::new();
    let g = batch_tape.param(generated);
    let pairing: Vec<usize> = (0..b).collect();
    let loss = training_loss(
        &mut batch_tape,
        g,
        target,
        &config.kernel,
        config.effective_beta(),
        Some(&pairing),
    )?;
    let loss_value = batch_tape.value(loss).data()[0];
    let seeds = batch_tape.backward(loss)?;
    let seeds = seeds.get(g).ok_or(Error::MissingGradient(g.index()))?;

    let per_sample = samples
        .into_par_iter()
        .enumerate()
        .map(|(i, mut s)| {
            let seed = s.tape.constant(Tensor::from_parts(vec![seeds.cols()], seeds.row(i).to_vec()));
            let l = s.tape.dot(s.y, seed)?;
            let grads = s.tape.backward(l)?;
            s.bound.grads(&grads)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = per_sample.into_iter();
    let mut total: Vec<Vec<f64>> = it.next().expect("batch ≥ 2").into_iter().map(Tensor::into_vec).collect();
    for grads in it {
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let shapes = model.params();
    let total = total
        .into_iter()
        .zip(shapes)
        .map(|(data, p)| Tensor::new(p.shape().to_vec(), data))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, total))
}

/// Unbiased MMD² between `n` generated samples and `n` real images drawn without
/// replacement.
pub fn evaluate(model: &GenModel, dataset: &ImageDataset, n: usize, kernel: &KernelSpec, rng: &mut Rng) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("evaluation needs at least 2 samples, got {n}")));
    }
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluation asks for {n} images from a dataset of {}",
            dataset.len()
        )));
    }
    if dataset.dim() != model.dims().d_y {
        return Err(shape_err("evaluate (image size vs d_Y)", model.dims().d_y, dataset.dim()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let real = dataset.gather(&order[..n])?;
    evaluate_against(model, &real, kernel, rng)
}

/// Unbiased MMD² between `real.rows()` generated samples and the rows of `real`.
pub fn evaluate_against(model: &GenModel, real: &Tensor, kernel: &KernelSpec, rng: &mut Rng) -> Result<f64> {
    let n = real.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("evaluation needs at least 2 samples, got {n}")));
    }
    let generated = generate_batch(model, n, rng)?;
    mmd2(&generated, real, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::load_checkpoint;

    fn micro_config(strategy: Strategy) -> TrainConfig {
        let dims = Dims { d_x: 2, d_y: 4, d_w: 2 };
        TrainConfig {
            dims,
            grid: TimeGrid::new(1.0, 3).unwrap(),
            forward: ForwardSpec::standard_ou(2),
            generator: GeneratorSpec::default_for(2, 4),
            hidden: vec![4],
            dropout_p: 0.2,
            kernel: KernelSpec::default_multiscale(4),
            strategy,
            alpha: 0.5,
            beta: 1.0,
            optimizer: RmsProp::default(),
            batch_size: 4,
            iterations: 1,
            seed: 3,
            workers: 1,
            log_timing: false,
        }
    }

    fn micro_data() -> ImageDataset {
        let mut rng = Rng::seed(10);
        ImageDataset::new(2, 2, (0..40).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let mut cfg = micro_config(Strategy::DecoderOnly);
        cfg.iterations = 0;
        let out = train(&cfg, &micro_data(), None).unwrap();
        assert!(out.log.records.is_empty());
        let back = GenModel::from_checkpoint(&load_checkpoint(&out.checkpoint).unwrap()).unwrap();
        assert_eq!(back, out.model);
        let fresh = GenModel::init(
            out.model.config.clone(),
            cfg.forward.clone(),
            cfg.generator.clone(),
            &mut Rng::substream(cfg.seed, 0, INIT_STREAM),
        )
        .unwrap();
        assert_eq!(fresh, out.model);
    }

    #[test]
    fn one_iteration_moves_every_parameter() {
        for strategy in [Strategy::DecoderOnly, Strategy::EncoderDecoder] {
            let mut cfg = micro_config(strategy);
            cfg.iterations = 0;
            let before = train(&cfg, &micro_data(), None).unwrap().model.params();
            cfg.iterations = 1;
            let after = train(&cfg, &micro_data(), None).unwrap().model.params();
            assert_eq!(before.len(), after.len());
            for (k, (a, b)) in before.iter().zip(&after).enumerate() {
                assert_ne!(a, b, "{strategy:?}: parameter tensor {k} did not move");
            }
        }
    }

    #[test]
    fn runs_are_reproducible_across_worker_counts() {
        let mut cfg = micro_config(Strategy::EncoderDecoder);
        cfg.iterations = 4;
        let mut a = Vec::new();
        let out_a = train(&cfg, &micro_data(), Some(&mut a)).unwrap();
        cfg.workers = 3;
        let mut b = Vec::new();
        let out_b = train(&cfg, &micro_data(), Some(&mut b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(out_a.checkpoint, out_b.checkpoint);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("iteration,loss,seconds\n1,"));
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let cfg = micro_config(Strategy::DecoderOnly);
        let ds = ImageDataset::new(3, 3, vec![0.5; 90]).unwrap();
        assert!(train(&cfg, &ds, None).is_err());
    }

    #[test]
    fn evaluate_preconditions() {
        let cfg = micro_config(Strategy::DecoderOnly);
        let out = train(&cfg, &micro_data(), None).unwrap();
        let k = KernelSpec::default_multiscale(4);
        assert!(evaluate(&out.model, &micro_data(), 1, &k, &mut Rng::seed(0)).is_err());
        assert!(evaluate(&out.model, &micro_data(), 11, &k, &mut Rng::seed(0)).is_err());
        let s = evaluate(&out.model, &micro_data(), 5, &k, &mut Rng::seed(0)).unwrap();
        assert!(s.is_finite());
    }
}
