//! `sinr` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sinr::checkpoint::Checkpoint;
use sinr::gradcheck;
use sinr::hsb;
use sinr::metrics::Quality;
use sinr::model::ModelKind;
use sinr::optics::{init_input, Mask, Measurement};
use sinr::scene::{read_dataset_dir, write_dataset_dir, Dataset, DatasetConfig};
use sinr::sinr::FceInit;
use sinr::training::{default_threads, evaluate, EvalRow, TrainConfig, Trainer};

const MANIFEST: &str = "manifest.json";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "sinr", version, about = "Spectral implicit reconstruction for snapshot spectral imaging")]
struct Cli {
    /// Base seed for data generation, initialisation and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a directory of synthetic scenes.
    GenData(GenDataArgs),
    /// Simulate a snapshot measurement from a cube.
    Simulate(SimulateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate checkpoints at several magnifications.
    Eval(EvalArgs),
    /// Reconstruct a cube from a measurement.
    Reconstruct(ReconstructArgs),
    /// Compare two cubes: prints psnr,ssim,sam,uqi.
    Metrics(MetricsArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    /// Spatial size (square).
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    bands: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dispersion step in pixels per band.
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "sinr")]
    model: ModelKind,
    #[arg(long)]
    no_swa: bool,
    #[arg(long)]
    no_fce: bool,
    #[arg(long)]
    no_sf: bool,
    /// Number of Fourier frequencies L.
    #[arg(long, default_value_t = 12)]
    fce_dim: usize,
    /// Initial frequencies: `literal` (2 e^i) or `pow2` (2^i pi).
    #[arg(long, default_value = "literal", value_parser = parse_fce_init)]
    fce_init: FceInit,
    /// Latent channels C.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Residual blocks in the encoder.
    #[arg(long, default_value_t = 2)]
    blocks: usize,
}

fn parse_fce_init(s: &str) -> std::result::Result<FceInit, String> {
    match s {
        "literal" => Ok(FceInit::Literal),
        "pow2" => Ok(FceInit::Pow2),
        other => Err(format!("unknown init {other:?}, expected literal or pow2")),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory for checkpoints, loss log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Scene directory from `gen-data`; the default synthetic set otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    /// Fraction of bands supervised per sample.
    #[arg(long, default_value_t = 1.0)]
    band_fraction: f64,
    /// Train on random square crops of this size.
    #[arg(long)]
    patch: Option<usize>,
    /// Magnification of the training target (1 for SINR).
    #[arg(long, default_value_t = 1)]
    train_scale: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Write an intermediate checkpoint every K steps.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    single_thread: bool,
    #[arg(long)]
    emit_gnuplot: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// One or more checkpoints; one row per checkpoint and scale.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    scales: Vec<usize>,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    emit_gnuplot: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Measurement HSB (`H x W' x 1`) as written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random draws per operation.
    #[arg(long, default_value_t = 20)]
    trials: u64,
    /// Entries probed per parameter tensor in the end-to-end checks.
    #[arg(long, default_value_t = 32)]
    max_entries: usize,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Written beside every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    argv: Vec<String>,
    seed: u64,
    details: serde_json::Value,
}

/// Failure categories mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => 1,
            Failure::Check(_) => 3,
        };
    }
    match err.downcast_ref::<sinr::Error>() {
        Some(sinr::Error::Contract(_)) => 1,
        _ => 2,
    }
}

fn write_manifest(path: &Path, argv: &[String], seed: u64, details: serde_json::Value) -> Result<()> {
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        argv: argv.to_vec(),
        seed,
        details,
    };
    fs::write(path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: &GenDataArgs, seed: u64, argv: &[String]) -> Result<()> {
    let cfg = DatasetConfig {
        seed,
        train: a.train,
        test: a.test,
        height: a.size,
        width: a.size,
        bands: a.bands,
        ..DatasetConfig::default()
    };
    if a.size == 0 || a.bands == 0 || a.train + a.test == 0 {
        return Err(Failure::Usage("size, bands and scene count must be positive".into()).into());
    }
    create_dir(&a.out)?;
    write_dataset_dir(&a.out, &cfg)?;
    write_manifest(&a.out.join(MANIFEST), argv, seed, json!({ "dataset": cfg }))?;
    println!("wrote {} train and {} test scenes to {}", a.train, a.test, a.out.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, seed: u64, argv: &[String]) -> Result<()> {
    let cube = hsb::read(&a.input)?;
    let mask = Mask::random(cube.height(), cube.width(), a.mask_seed);
    let y = sinr::optics::forward_cassi(&cube, &mask, a.d)?;
    let out = y.to_cube().with_range(cube.range())?;
    hsb::write(&a.out, &out)?;
    write_manifest(
        &sidecar(&a.out),
        argv,
        seed,
        json!({ "d": a.d, "mask_seed": a.mask_seed, "bands": cube.bands() }),
    )?;
    Ok(())
}

fn load_data(dir: Option<&Path>, fallback: &DatasetConfig) -> Result<(Dataset, DatasetConfig)> {
    match dir {
        Some(d) => {
            let (ds, cfg) = read_dataset_dir(d)?;
            let cfg = cfg.unwrap_or(DatasetConfig {
                train: ds.train.len(),
                test: ds.test.len(),
                height: ds.height,
                width: ds.width,
                bands: ds.bands,
                ..*fallback
            });
            Ok((ds, cfg))
        }
        None => Ok((Dataset::synthetic(fallback), *fallback)),
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.kind = a.model.model;
    cfg.model.init_seed = seed;
    cfg.model.sinr.toggles.swa = !a.model.no_swa;
    cfg.model.sinr.toggles.fce = !a.model.no_fce;
    cfg.model.sinr.toggles.sf = !a.model.no_sf;
    cfg.model.sinr.fce_dim = a.model.fce_dim;
    cfg.model.sinr.fce_init = a.model.fce_init;
    cfg.model.sinr.encoder.channels = a.model.channels;
    cfg.model.sinr.encoder.blocks = a.model.blocks;
    cfg.dataset.seed = seed;
    cfg.adam.lr = a.lr;
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    cfg.band_fraction = a.band_fraction;
    cfg.patch = a.patch;
    cfg.train_scale = a.train_scale;
    cfg.shift = a.d;
    cfg.mask_seed = a.mask_seed;
    cfg.seed = seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg
}

fn train(a: &TrainArgs, seed: u64, argv: &[String]) -> Result<()> {
    let threads = if a.single_thread { 1 } else { default_threads() };
    let (mut cfg, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config.clone();
            cfg.steps = a.steps;
            (cfg, Some(ck))
        }
        None => (train_config(a, seed), None),
    };
    let (data, dcfg) = load_data(a.data.as_deref(), &cfg.dataset)?;
    cfg.dataset = dcfg;
    create_dir(&a.out)?;
    write_manifest(
        &a.out.join(MANIFEST),
        argv,
        seed,
        json!({ "config": cfg, "threads": threads, "data": a.data }),
    )?;

    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg.clone(), &data, threads, ck.model, ck.adam, ck.step)?,
        None => Trainer::new(cfg.clone(), &data, threads)?,
    };
    let log_path = a.out.join("loss.csv");
    let mut log = String::from("step,loss\n");
    let start = Instant::now();
    let save = |t: &Trainer, path: &Path| -> Result<()> {
        Checkpoint {
            config: t.config().clone(),
            step: t.steps_done(),
            model: t.model().clone(),
            adam: t.adam().clone(),
        }
        .save(path)?;
        Ok(())
    };
    while trainer.steps_done() < cfg.steps {
        let loss = trainer.step()?;
        let step = trainer.steps_done();
        log.push_str(&format!("{step},{loss:?}\n"));
        if step % 100 == 0 || step == cfg.steps {
            eprintln!("step {step:>6}  loss {loss:.6}  {:.1}s", start.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(&trainer, &a.out.join(format!("step-{step:06}.sck")))?;
        }
    }
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    if a.emit_gnuplot {
        let tsv = log.replacen("step,loss", "# step\tloss", 1).replace(',', "\t");
        fs::write(a.out.join("loss.tsv"), tsv)?;
    }
    save(&trainer, &a.out.join("model.sck"))?;
    println!("trained {} steps, checkpoint {}", cfg.steps, a.out.join("model.sck").display());
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64, argv: &[String]) -> Result<()> {
    if a.scales.is_empty() || a.scales.contains(&0) {
        return Err(Failure::Usage("scales must be positive".into()).into());
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    for path in &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let (data, _) = load_data(a.data.as_deref(), &ck.config.dataset)?;
        let mask = Mask::random(data.height, data.width, ck.config.mask_seed);
        let scenes = if a.train_split { &data.train } else { &data.test };
        rows.extend(evaluate(&ck.model, scenes, &data, &mask, ck.config.shift, &a.scales)?);
    }
    let mut csv = format!("{}\n", EvalRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    match &a.out {
        Some(out) => {
            fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
            if a.emit_gnuplot {
                let mut tsv = String::from("# scale\tmodel\tpsnr\tssim\tsam\tuqi\n");
                tsv.push_str(&csv.lines().skip(1).map(|l| l.replace(',', "\t") + "\n").collect::<String>());
                fs::write(out.with_extension("tsv"), tsv)?;
            }
            write_manifest(&sidecar(out), argv, seed, json!({ "checkpoints": a.checkpoint, "scales": a.scales }))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn reconstruct(a: &ReconstructArgs, seed: u64, argv: &[String]) -> Result<()> {
    if a.scale == 0 {
        return Err(Failure::Usage("scale must be positive".into()).into());
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cube = hsb::read(&a.input)?;
    if cube.bands() != 1 {
        return Err(sinr::Error::dim(format!("measurement must have one band, got {}", cube.bands())).into());
    }
    let bands = ck.config.dataset.bands;
    let shift = ck.config.shift;
    let y = Measurement::from_cube(&cube, shift)?;
    let spread = shift * (bands - 1);
    if y.width() <= spread {
        return Err(sinr::Error::dim(format!("measurement width {} too small for {bands} bands", y.width())).into());
    }
    let mask = Mask::random(y.height(), y.width() - spread, ck.config.mask_seed);
    let x = init_input(&y, &mask, shift, bands)?.with_range(cube.range())?;
    let out = ck.model.reconstruct(&x, bands * a.scale)?;
    hsb::write(&a.out, &out)?;
    write_manifest(
        &sidecar(&a.out),
        argv,
        seed,
        json!({ "checkpoint": a.checkpoint, "scale": a.scale, "bands": out.bands() }),
    )?;
    Ok(())
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    let (x, y) = (hsb::read(&a.a)?, hsb::read(&a.b)?);
    println!("{}", Quality::measure(&x, &y)?.csv_row());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let reports = gradcheck::suite(a.trials, Some(a.max_entries))?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{:<24} {:.3e}  ({} entries)", r.name, r.max_rel_error, r.entries_checked);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} ({:.1}s)", start.elapsed().as_secs_f64());
    if !(worst < GRAD_TOLERANCE) {
        return Err(Failure::Check(format!("gradient check failed: {worst:e} >= {GRAD_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.manifest.display()))?;
    if m.argv.get(1).map(String::as_str) == Some("replay") {
        bail!(Failure::Usage("refusing to replay a replay".into()));
    }
    dispatch(&m.argv)
}

fn dispatch(argv: &[String]) -> Result<()> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string()).into());
        }
    };
    let seed = cli.seed;
    match &cli.command {
        Command::GenData(a) => gen_data(a, seed, argv),
        Command::Simulate(a) => simulate(a, seed, argv),
        Command::Train(a) => train(a, seed, argv),
        Command::Eval(a) => eval(a, seed, argv),
        Command::Reconstruct(a) => reconstruct(a, seed, argv),
        Command::Metrics(a) => metrics(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Replay(a) => replay(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match dispatch(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(code)
        }
    }
}
