use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdce::checkpoint::{Checkpoint, CheckpointError};
use fdce::fourier::{self, Component, FourierError};
use fdce::imageio::{load_image, save_image, Image, ImageError, PairedDataset};
use fdce::infer::{enhance, query_maps};
use fdce::metrics::MetricReport;
use fdce::tensor::TensorError;
use fdce::train::{epoch_log_csv, model_from_checkpoint, ConfigError, TrainConfig, TrainError, Trainer};

/// Underwater image enhancement: spectrum experiments, training, inference
/// and evaluation.
#[derive(Parser, Debug)]
#[command(name = "fdce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Swap Fourier amplitude and phase between two images.
    Swap(SwapArgs),
    /// Reconstruct an image from its amplitude or phase alone.
    Component(ComponentArgs),
    /// Train a model on a paired dataset.
    Train(TrainArgs),
    /// Enhance images with a trained model.
    Enhance(EnhanceArgs),
    /// Score a paired dataset and write a CSV report.
    Eval(EvalArgs),
    /// Write the activation map of every color query for one image.
    Queries(QueriesArgs),
}

#[derive(Args, Debug)]
struct SwapArgs {
    /// First image.
    a: PathBuf,
    /// Second image.
    b: PathBuf,
    /// Output directory for `amp_a_phase_b` and `amp_b_phase_a`.
    outdir: PathBuf,
}

#[derive(Args, Debug)]
struct ComponentArgs {
    /// Input image.
    image: PathBuf,
    /// Spectrum component to keep: amplitude or phase.
    #[arg(long)]
    keep: Component,
    /// Output image path (.ppm or .png).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root containing `input/` and `target/`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the end of training.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Validation dataset; the best epoch is saved next to `--out` with a `.best` suffix.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Epoch log CSV (defaults to `--out` with a `.csv` suffix).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Images to enhance.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse stage output as `<name>_coarse`.
    #[arg(long)]
    coarse: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint; without it the inputs themselves are scored.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset root containing `input/` and `target/`.
    #[arg(long)]
    data: PathBuf,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct QueriesArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image.
    image: PathBuf,
    /// Output directory for `query_<i>` maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Tensor(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<FourierError> for CliError {
    fn from(e: FourierError) -> Self {
        match e {
            FourierError::Tensor(t) => t.into(),
            FourierError::Image(i) => i.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Image(i) => i.into(),
            TrainError::Checkpoint(c) => c.into(),
            e @ TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// `.ppm` stays `.ppm`; anything else is written as PNG.
fn output_extension(input: &Path) -> &'static str {
    match input.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => "ppm",
        _ => "png",
    }
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Usage(format!("{}: no file name", path.display())))
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(n) => fdce::par::with_threads(n, f).map_err(|e| CliError::Usage(format!("--jobs: {e}"))),
    }
}

fn swap(a: SwapArgs) -> Result<()> {
    let x = load_image(&a.a)?;
    let y = load_image(&a.b)?;
    let (ab, ba) = fourier::swap_experiment(&x, &y)?;
    create_dir(&a.outdir)?;
    let ext = output_extension(&a.a);
    save_image(&ab, a.outdir.join(format!("amp_a_phase_b.{ext}")))?;
    save_image(&ba, a.outdir.join(format!("amp_b_phase_a.{ext}")))?;
    Ok(())
}

fn component(a: ComponentArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let out = fourier::component_only(&img, a.keep)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&out, &a.out)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = PairedDataset::open(&a.data)?.load_all()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || !a.set.is_empty() || a.epochs.is_some() || a.seed.is_some() {
                return Err(CliError::Usage(
                    "--resume takes its configuration from the checkpoint; drop --config/--set/--epochs/--seed".into(),
                ));
            }
            Trainer::resume(&Checkpoint::load(path)?, data)?
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &a.config {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                cfg.apply_text(&text)?;
            }
            for kv in &a.set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            Trainer::new(cfg, data)?
        }
    };
    let val = match &a.val {
        Some(dir) => Some(PairedDataset::open(dir)?.load_all()?),
        None => None,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let best_path = {
        let mut p = a.out.clone().into_os_string();
        p.push(".best");
        PathBuf::from(p)
    };
    let mut best = f64::NEG_INFINITY;
    let mut logs = Vec::new();
    while let Some(log) = trainer.train_epoch()? {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  total {:.5}  ssim {:.5}  rec {:.5}  hist {:.5}  per {:.5}",
            log.epoch, log.lr, log.total, log.terms.ssim, log.terms.rec, log.terms.hist, log.terms.per
        );
        logs.push(log);
        fs::write(&log_path, epoch_log_csv(&logs)).map_err(|e| io_err(&log_path, e))?;
        if let Some(val) = &val {
            let score = trainer.evaluate_psnr(val)?;
            eprintln!("           validation psnr {score:.3} dB");
            if score > best {
                best = score;
                trainer.checkpoint().save(&best_path)?;
            }
        }
    }
    trainer.checkpoint().save(&a.out)?;
    Ok(())
}

fn enhance_cmd(a: EnhanceArgs) -> Result<()> {
    let (model, params, _) = model_from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    create_dir(&a.out)?;
    let results = with_pool(a.jobs, || {
        fdce::par::map_collect(a.images.len(), |i| -> Result<()> {
            let path = &a.images[i];
            let img = load_image(path)?;
            let (coarse, refined) = enhance(&model, &params, &img)?;
            let (name, ext) = (stem(path)?, output_extension(path));
            save_image(&refined, a.out.join(format!("{name}.{ext}")))?;
            if a.coarse {
                save_image(&coarse, a.out.join(format!("{name}_coarse.{ext}")))?;
            }
            Ok(())
        })
    })?;
    results.into_iter().collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = PairedDataset::open(&a.data)?;
    let pairs = ds.load_all()?;
    let model = match &a.ckpt {
        Some(p) => Some(model_from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let report = with_pool(a.jobs, || -> Result<MetricReport> {
        let predictions = fdce::par::map_collect(pairs.len(), |i| -> Result<Image> {
            let (x, _) = &pairs[i];
            match &model {
                Some((m, p, _)) => Ok(enhance(m, p, x)?.1),
                None => Ok(x.clone()),
            }
        });
        let items = ds
            .pairs()
            .iter()
            .zip(predictions)
            .zip(&pairs)
            .map(|(((path, _), pred), (_, y))| Ok((stem(path)?, pred?, y.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport::evaluate(&items)?)
    })??;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, report.to_csv()).map_err(|e| io_err(&a.out, e))?;
    println!("{}", report.summary());
    Ok(())
}

fn queries(a: QueriesArgs) -> Result<()> {
    let (model, params, _) = model_from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let img = load_image(&a.image)?;
    let maps = query_maps(&model, &params, &img)?;
    create_dir(&a.out)?;
    for (i, m) in maps.iter().enumerate() {
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let vals: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        save_image(&Image::gray(h, w, &vals), a.out.join(format!("query_{i}.png")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Swap(a) => swap(a),
        Command::Component(a) => component(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Queries(a) => queries(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
