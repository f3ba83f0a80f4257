mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use apnt::evaluation::{default_palette, evaluate, format_report, format_summary, render_map};
use apnt::hsi_data::{load_cube, save_cube, synth_dataset, HsiCube, LabelMap, SynthSpec};
use apnt::model::{load_checkpoint, save_checkpoint, Checkpoint, Domain};
use apnt::numeric::Tensor;
use apnt::pipeline::{
    episode_sources, predict_scene, prepare_source, prepare_target, run_experiment,
    ExperimentConfig, TargetSplit,
};
use apnt::training::{init_params, LogEntry, Trainer};
use apnt::Error;

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const META_SHOTS: &str = "meta.split.shots";
const META_AUGMENT: &str = "meta.split.augment_to";
const PROGRESS_EVERY: usize = 50;

#[derive(Parser)]
#[command(
    name = "apnt",
    version,
    about = "Few-shot hyperspectral classification"
)]
struct Cli {
    /// Only print warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic rectangular-region scene.
    Synth(SynthArgs),
    /// Pack an H×W×B cube and H×W label grid (.npy) into a scene file.
    Convert(ConvertArgs),
    /// Train on a target scene, optionally after a source phase.
    Train(TrainArgs),
    /// Score a checkpoint, or run split/train/eval for a list of seeds.
    Eval(EvalArgs),
    /// Render a classification map for every labelled pixel.
    Map(MapArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    bands: usize,
    /// Region grid as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// Side of a square scene.
    #[arg(long, default_value_t = 40)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// float32 or float64 array of shape (H, W, B).
    #[arg(long)]
    cube: PathBuf,
    /// Integer array of shape (H, W); 0 marks unlabelled pixels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by the commands that run the model.
#[derive(Args)]
struct RunArgs {
    /// key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// apnt or apnt*.
    #[arg(long)]
    mode: Option<String>,
    /// transmix, cutmix or none.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Any configuration key, e.g. `--set d_model=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// One tab-separated line per iteration.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint; the log is appended to.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, conflicts_with = "seeds")]
    checkpoint: Option<PathBuf>,
    /// Full runs for each seed: `0..9` or `1,4,7`.
    #[arg(long)]
    seeds: Option<String>,
    /// Neighbours for the KNN classifier.
    #[arg(long)]
    k: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Render a PPM classification map (checkpoint mode only).
    #[arg(long, requires = "checkpoint")]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r = r.trim().parse().map_err(|e| format!("grid rows: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("grid cols: {e}"))?;
    Ok((r, c))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Argument(_)) => 1,
        Some(
            Error::NonFiniteLoss { .. } | Error::GradCheck(_) | Error::Loss(_) | Error::Mixing(_),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Map(a) => cmd_map(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        bands: a.bands,
        region_grid: a.grid,
        height: a.height.unwrap_or(a.size),
        width: a.width.unwrap_or(a.size),
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let (cube, labels) = synth_dataset(&spec)?;
    save_cube(&a.out, &cube, &labels)?;
    println!("wrote: {}", a.out.display());
    print_scene(&cube, &labels);
    println!("sha256: {}", sha256_hex(&a.out)?);
    Ok(())
}

fn print_scene(cube: &HsiCube, labels: &LabelMap) {
    let labelled = labels.labels().iter().filter(|&&l| l != 0).count();
    println!("size: {}x{}", cube.height(), cube.width());
    println!("bands: {}", cube.bands());
    println!("classes: {}", labels.present_classes().len());
    println!("labelled_pixels: {labelled}");
}

fn read_npy<T: ndarray_npy::ReadableElement, D: ndarray::Dimension>(
    path: &Path,
) -> std::result::Result<ndarray::Array<T, D>, ndarray_npy::ReadNpyError> {
    ndarray_npy::read_npy(path)
}

fn load_npy_cube(path: &Path) -> Result<Array3<f32>> {
    if let Ok(a) = read_npy::<f32, _>(path) {
        return Ok(a);
    }
    let a: Array3<f64> = read_npy(path)
        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
        .context("cube must be a float32 or float64 array of shape (H, W, B)")?;
    Ok(a.mapv(|v| v as f32))
}

fn load_npy_labels(path: &Path) -> Result<Array2<u16>> {
    macro_rules! attempt {
        ($($t:ty),*) => {$(
            if let Ok(a) = read_npy::<$t, ndarray::Ix2>(path) {
                return a
                    .iter()
                    .map(|&v| u16::try_from(v).map_err(|_| v as i128))
                    .collect::<std::result::Result<Vec<u16>, i128>>()
                    .map(|v| Array2::from_shape_vec(a.raw_dim(), v).expect("same shape"))
                    .map_err(|v| {
                        Error::Load(apnt::LoadError::InvalidHeader(format!(
                            "label {v} is outside 0..=65535"
                        )))
                        .into()
                    });
            }
        )*};
    }
    attempt!(u16, u8, i32, i64, u32, u64, i16, i8);
    Err(Error::Load(apnt::LoadError::InvalidHeader(format!(
        "{}: labels must be an integer array of shape (H, W)",
        path.display()
    )))
    .into())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let cube = load_npy_cube(&a.cube)?;
    let labels = load_npy_labels(&a.labels)?;
    let (h, w, b) = cube.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Load(apnt::LoadError::DimensionMismatch {
            width: w,
            height: h,
            found: labels.len(),
        })
        .into());
    }
    let cube = HsiCube::new(w, h, b, cube.iter().copied().collect())?;
    let labels = LabelMap::new(w, h, labels.iter().copied().collect())?;
    save_cube(&a.out, &cube, &labels)?;
    println!("wrote: {}", a.out.display());
    print_scene(&cube, &labels);
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let named = [
        ("target", a.target.as_ref().map(|p| p.display().to_string())),
        ("source", a.source.as_ref().map(|p| p.display().to_string())),
        ("seed", a.seed.map(|s| s.to_string())),
        ("mode", a.mode.clone()),
        ("mix", a.mix.clone()),
        ("iterations", a.iterations.map(|n| n.to_string())),
    ];
    overrides.extend(
        named
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    Ok(RunConfig::build(a.config.as_deref(), &overrides)?)
}

fn notice_defaults(rc: &RunConfig, relevant: &[&str]) {
    let keys: Vec<&str> = rc
        .defaulted
        .iter()
        .copied()
        .filter(|k| relevant.contains(k))
        .collect();
    if !keys.is_empty() {
        log::info!("using defaults for: {}", keys.join(", "));
    }
}

fn require_target(rc: &RunConfig) -> Result<(HsiCube, LabelMap)> {
    let path = rc
        .target
        .as_ref()
        .ok_or_else(|| Error::Config("a target scene is required (--target)".into()))?;
    Ok(load_cube(path)?)
}

fn load_source(
    rc: &RunConfig,
    exp: &ExperimentConfig,
) -> Result<Option<Vec<apnt::hsi_data::PatchSample>>> {
    if exp.train.source_phase() == 0 {
        return Ok(None);
    }
    let path = rc.source.as_ref().ok_or_else(|| {
        Error::Config(
            "APNT mode needs a source scene (--source); use --mode apnt* without one".into(),
        )
    })?;
    let (cube, labels) = load_cube(path)?;
    Ok(Some(prepare_source(&cube, &labels, exp)?))
}

fn progress(entry: &LogEntry, total: usize) {
    if entry.iteration.is_multiple_of(PROGRESS_EVERY) || entry.iteration == total {
        log::info!(
            "iteration {}/{} ({}) loss {:.4}",
            entry.iteration,
            total,
            entry.phase.name(),
            entry.loss
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let rc = run_config(&a.run)?;
    let mut exp = rc.experiment.clone();
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resumed {
        exp.model = ck.config;
    }
    notice_defaults(&rc, config::KEYS);
    let (cube, labels) = require_target(&rc)?;
    let split = prepare_target(&cube, &labels, &exp)?;
    let source = load_source(&rc, &exp)?;
    let (src_ep, tgt_ep) = episode_sources(&split.reference, source.as_deref(), &exp)?;

    let mut trainer = match &resumed {
        Some(ck) => Trainer::resume(ck, exp.train)?,
        None => {
            let src_bands = src_ep.as_ref().map(|s| s.samples[0].channels);
            let params = init_params(exp.model, src_bands, Some(cube.bands()), exp.train.seed)?;
            Trainer::new(params, exp.train)?
        }
    };

    let mut log_file = match &a.log {
        Some(p) => {
            let f = if resumed.is_some() {
                OpenOptions::new().append(true).create(true).open(p)
            } else {
                File::create(p)
            }
            .map_err(|e| Error::Argument(format!("cannot open log {}: {e}", p.display())))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let total = exp.train.total_iterations;
    let mut write_err = None;
    let log = trainer.run_until(src_ep.as_ref(), &tgt_ep, total, |entry| {
        progress(entry, total);
        if let Some(w) = log_file.as_mut() {
            if let Err(e) = writeln!(w, "{entry}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(w) = log_file.as_mut() {
        w.flush().context("writing log")?;
    }
    if let Some(e) = write_err {
        return Err(e).context("writing log");
    }

    let mut ck = trainer.checkpoint();
    ck.tensors.push((
        META_SHOTS.into(),
        Tensor::scalar(exp.split.shots_per_class as f64),
    ));
    ck.tensors.push((
        META_AUGMENT.into(),
        Tensor::scalar(exp.split.augment_to as f64),
    ));
    save_checkpoint(&a.out, &ck)?;
    println!("checkpoint: {}", a.out.display());
    println!("iterations: {}", trainer.iteration());
    if let Some(last) = log.last() {
        println!("final_loss: {:.6}", last.loss);
    }
    println!("sha256: {}", sha256_hex(&a.out)?);
    Ok(())
}

/// Config for scoring `ck`: its architecture, and its seed and split unless
/// they were set explicitly.
fn config_for_checkpoint(rc: &RunConfig, ck: &Checkpoint, k: Option<usize>) -> ExperimentConfig {
    let mut exp = rc.experiment.clone();
    exp.model = ck.config;
    if !rc.is_set("seed") {
        let lo = ck.scalar("meta.seed.lo");
        let hi = ck.scalar("meta.seed.hi");
        if let (Some(lo), Some(hi)) = (lo, hi) {
            exp = exp.with_seed(lo as u64 | (hi as u64) << 32);
        }
    }
    if !rc.is_set("shots_per_class") {
        if let Some(v) = ck.scalar(META_SHOTS) {
            exp.split.shots_per_class = v as usize;
        }
    }
    if !rc.is_set("augment_to") {
        if let Some(v) = ck.scalar(META_AUGMENT) {
            exp.split.augment_to = v as usize;
        }
    }
    if let Some(k) = k {
        exp.knn_k = k;
    }
    exp
}

fn check_bands(ck: &Checkpoint, cube: &HsiCube) -> Result<()> {
    let params = ck.model_params()?;
    match params.bands(Domain::Target) {
        Some(b) if b == cube.bands() => Ok(()),
        Some(b) => Err(Error::Evaluation(format!(
            "scene has {} bands but the checkpoint expects {b}",
            cube.bands()
        ))
        .into()),
        None => Err(Error::Evaluation("checkpoint has no target mapping layer".into()).into()),
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = path {
        fs::write(p, text).map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn write_map(
    ck: &Checkpoint,
    cube: &HsiCube,
    labels: &LabelMap,
    split: &TargetSplit,
    exp: &ExperimentConfig,
    out: &Path,
) -> Result<()> {
    let params = ck.model_params()?;
    let predicted = predict_scene(
        &params,
        cube,
        labels,
        &split.reference,
        exp.knn_k,
        exp.chunk,
    )?;
    let n = labels.labels().iter().copied().max().unwrap_or(0) as usize;
    let ppm = render_map(&predicted, labels, &default_palette(n))?;
    fs::write(out, ppm).map_err(|e| Error::Argument(format!("{}: {e}", out.display())))?;
    log::info!("wrote map {}", out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut rc = run_config(&a.run)?;
    if let Some(s) = &a.seeds {
        rc.seeds = Some(config::parse_seeds(s)?);
    }
    let (cube, labels) = require_target(&rc)?;
    if let Some(path) = &a.checkpoint {
        let ck = load_checkpoint(path)?;
        check_bands(&ck, &cube)?;
        let exp = config_for_checkpoint(&rc, &ck, a.k);
        let split = prepare_target(&cube, &labels, &exp)?;
        let report = evaluate(
            &ck.model_params()?,
            &split.reference,
            &split.test,
            exp.knn_k,
            exp.chunk,
        )?;
        emit(&format_report(&report), a.report.as_deref())?;
        if let Some(out) = &a.map {
            write_map(&ck, &cube, &labels, &split, &exp, out)?;
        }
        return Ok(());
    }
    let seeds = rc
        .seeds
        .clone()
        .ok_or_else(|| Error::Config("eval needs --checkpoint or a seed list (--seeds)".into()))?;
    notice_defaults(&rc, config::KEYS);
    let mut reports = Vec::with_capacity(seeds.len());
    let mut text = String::new();
    for &seed in &seeds {
        let mut exp = rc.experiment.with_seed(seed);
        if let Some(k) = a.k {
            exp.knn_k = k;
        }
        let source = load_source(&rc, &exp)?;
        let total = exp.train.total_iterations;
        let result = run_experiment(&cube, &labels, source.as_deref(), &exp, |e| {
            progress(e, total)
        })?;
        let r = &result.report;
        let boundary = r
            .boundary
            .as_ref()
            .map_or("n/a".to_string(), |b| format!("{:.4}", b.oa));
        let line = format!(
            "seed {seed}: OA {:.4} AA {:.4} Kappa {:.4} boundary_OA {boundary}\n",
            r.overall.oa, r.overall.aa, r.overall.kappa
        );
        log::info!("{}", line.trim_end());
        text.push_str(&line);
        reports.push(result.report);
    }
    text.push_str(&format_summary(&seeds, &reports));
    emit(&text, a.report.as_deref())
}

fn cmd_map(a: MapArgs) -> Result<()> {
    let rc = run_config(&a.run)?;
    let (cube, labels) = require_target(&rc)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    check_bands(&ck, &cube)?;
    let exp = config_for_checkpoint(&rc, &ck, a.k);
    notice_defaults(&rc, &["knn_k"]);
    let split = prepare_target(&cube, &labels, &exp)?;
    write_map(&ck, &cube, &labels, &split, &exp, &a.out)?;
    println!("wrote: {}", a.out.display());
    Ok(())
}
