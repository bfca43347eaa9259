//! `bsdegen`: train, sample, score and check BSDE generative models.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsdegen::bsde::{generate_batch, GenModel};
use bsdegen::data::{export_pgm, ImageDataset};
use bsdegen::mmd::KernelSpec;
use bsdegen::nn::load_checkpoint;
use bsdegen::rng::Rng;
use bsdegen::sde::{brownian_increments, euler_forward_x, sample_initial, TimeGrid};
use bsdegen::trainer::{evaluate, train};

use config::{CliConfig, ConfigError};

pub const WORKERS_ENV: &str = "BSDEGEN_WORKERS";

#[derive(Parser)]
#[command(name = "bsdegen", version, about = "Generative modeling with forward-backward SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on an IDX image file; writes model.bsdg, loss.csv and config.txt.
    Train(TrainArgs),
    /// Sample images from a checkpoint as img_000.pgm, img_001.pgm, ...
    Generate(GenerateArgs),
    /// Print the MMD² between generated samples and real images.
    Eval(EvalArgs),
    /// Dump simulated forward-process paths as CSV.
    Simulate(SimulateArgs),
    /// Run the built-in analytic oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// IDX image file (overrides the `data` key).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Worker threads; falls back to BSDEGEN_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX image file; images are resampled to the model's size.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 4)]
    paths: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<bsdegen::Error> for Failure {
    fn from(e: bsdegen::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<CliConfig, Failure> {
    let mut cfg = CliConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    for s in &args.set {
        cfg.apply_assignment(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// `--workers`, then the config key, then `BSDEGEN_WORKERS`, then 1.
fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize, Failure> {
    let w = match flag.or(config) {
        Some(w) => w,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => 1,
        },
    };
    if w == 0 {
        return Err(Failure::Usage("workers must be at least 1".into()));
    }
    Ok(w)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn load_images(path: &Path, rows: usize, cols: usize, subset: Option<usize>) -> Result<ImageDataset, Failure> {
    let mut ds = ImageDataset::load(path)?;
    if let Some(n) = subset {
        if n > ds.len() {
            return Err(Failure::Usage(format!(
                "subset of {n} images requested but {} holds {}",
                path.display(),
                ds.len()
            )));
        }
        ds = ds.subset(n)?;
    }
    if (ds.rows(), ds.cols()) != (rows, cols) {
        ds = ds.downsample(rows, cols)?;
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<GenModel, Failure> {
    let bytes = fs::read(path)?;
    let ck = load_checkpoint(&bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(GenModel::from_checkpoint(&ck)?)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset given (use --data or the data key)".into()))?;
    let workers = resolve_workers(a.workers, cfg.workers)?;
    let tc = cfg.train_config(workers)?;
    require_file(&data, "dataset")?;
    prepare_out(&a.out)?;

    let ds = load_images(&data, cfg.image_rows, cfg.image_cols, Some(cfg.subset))?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let mut csv = BufWriter::new(fs::File::create(a.out.join("loss.csv"))?);
    let out = train(&tc, &ds, Some(&mut csv))?;
    csv.flush()?;
    fs::write(a.out.join("model.bsdg"), &out.checkpoint)?;
    let first = out.log.mean_loss(1, 50.min(tc.iterations));
    let last = out.log.mean_loss(tc.iterations.saturating_sub(49).max(1), tc.iterations);
    if let (Some(f), Some(l)) = (first, last) {
        eprintln!("trained {} iterations: mean loss {f:.6} (first 50) → {l:.6} (last 50)", tc.iterations);
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    let workers = resolve_workers(a.workers, None)?;
    prepare_out(&a.out)?;
    let model = load_model(&a.checkpoint)?;
    let (rows, cols) = model.config.image_shape.unwrap_or((1, model.dims().d_y));
    let samples = pool(workers)?.install(|| generate_batch(&model, a.count, &mut Rng::seed(a.seed)))?;
    let width = a.count.saturating_sub(1).to_string().len().max(3);
    for i in 0..a.count {
        let bytes = export_pgm(samples.row(i), rows, cols)?;
        fs::write(a.out.join(format!("img_{i:0width$}.pgm")), bytes)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.data, "dataset")?;
    if a.count < 2 {
        return Err(Failure::Usage("--count must be at least 2".into()));
    }
    let workers = resolve_workers(a.workers, None)?;
    let bytes = fs::read(&a.checkpoint)?;
    let ck = load_checkpoint(&bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let model = GenModel::from_checkpoint(&ck)?;
    let d_y = model.dims().d_y;
    let (rows, cols) = model.config.image_shape.unwrap_or((1, d_y));
    let kernel = serde_json::from_value::<KernelSpec>(ck.meta["kernel"].clone())
        .unwrap_or_else(|_| KernelSpec::default_multiscale(d_y));
    let ds = load_images(&a.data, rows, cols, None)?;
    let score = pool(workers)?.install(|| evaluate(&model, &ds, a.count, &kernel, &mut Rng::seed(a.seed)))?;
    println!("{score}");
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.cfg)?;
    if a.paths == 0 {
        return Err(Failure::Usage("--paths must be at least 1".into()));
    }
    let spec = cfg.forward_spec();
    spec.validate(cfg.d_x, cfg.d_w)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let grid = TimeGrid::new(cfg.horizon, cfg.steps).map_err(|e| Failure::Usage(e.to_string()))?;
    prepare_out(&a.out)?;
    let mut w = BufWriter::new(fs::File::create(a.out.join("paths.csv"))?);
    let cols: Vec<String> = (0..cfg.d_x).map(|j| format!("x{j}")).collect();
    writeln!(w, "path,step,t,{}", cols.join(","))?;
    for p in 0..a.paths {
        let mut rng = Rng::substream(cfg.seed, 0, p as u64);
        let zeta = sample_initial(cfg.d_x, &mut rng)?;
        let dw = brownian_increments(&grid, cfg.d_w, &mut rng)?;
        let path = euler_forward_x(&spec, &zeta, &dw, &grid)?;
        for n in 0..=grid.steps() {
            let xs: Vec<String> = path.row(n).iter().map(f64::to_string).collect();
            writeln!(w, "{p},{n},{},{}", grid.t(n), xs.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let results = bsdegen::verify::run_all(a.seed);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
