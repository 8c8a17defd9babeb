//! Command-line front end. [`run`] parses arguments, resolves the config and
//! dispatches; the binary only formats errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::blur::run_blur_experiment;
use crate::config::RunConfig;
use crate::data::Split;
use crate::distributions::Rng;
use crate::error::{Error, Result};
use crate::eval::{self, InferenceModel};
use crate::gradcheck::{self, OpCheck};
use crate::image::write_image_grid;
use crate::model::{ModelBundle, Part};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::train;

/// Relative-error ceilings enforced by `gradcheck`.
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "discgen", version, about = "VAEs with classifier feature-space regularization")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `outputs.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Regularizer weights, comma-separated. One value applies to every
    /// layer; all zeros trains the plain ELBO.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambda: Option<Vec<f64>>,
    /// Block regularizer gradients from reaching the encoder.
    #[arg(long, global = true)]
    pub stop_encoder_grad: bool,
    /// Importance samples for `eval-nll`.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Blur strength for `blur-experiment`.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Training epochs of the current subcommand.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Classifier checkpoint.
    #[arg(long, global = true)]
    pub classifier: Option<PathBuf>,
    /// VAE checkpoint to load (and, for `train-vae`, resume from).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Train the label classifier whose features regularize the VAE.
    TrainClassifier,
    /// Train a VAE, regularized unless `--lambda 0`.
    TrainVae,
    /// Decode prior samples into an image grid.
    Sample,
    /// Reconstruct held-out images; with `--classifier`, also report feature distances.
    Reconstruct,
    /// Decode straight lines between posterior means.
    Interpolate,
    /// Importance-sampled negative log-likelihood on every split.
    EvalNll,
    /// Train autoencoders on sharp and blurred targets and compare them.
    BlurExperiment,
    /// Finite-difference check of every differentiable op and of the model losses.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 64)]
        coordinates: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainClassifier => "train-classifier",
            Command::TrainVae => "train-vae",
            Command::Sample => "sample",
            Command::Reconstruct => "reconstruct",
            Command::Interpolate => "interpolate",
            Command::EvalNll => "eval-nll",
            Command::BlurExperiment => "blur-experiment",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// `error: kind=<kind> msg=<message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error: kind={} msg={msg}", e.kind())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, A>(args: I) -> Result<()>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Usage(e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string())),
    };
    let cfg = resolve_config(&cli.common, &cli.command)?;
    match Precision::from_env()? {
        Precision::F32 => execute::<f32>(&cli, &cfg),
        Precision::F64 => execute::<f64>(&cli, &cfg),
    }
}

/// Config file (or defaults) with command-line overrides applied and resolved.
pub fn resolve_config(args: &CommonArgs, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.outputs.dir = o.clone();
    }
    if let Some(l) = &args.lambda {
        cfg.train.lambda = Some(expand_lambda(l, cfg.arch.regularized_layers().len()));
    }
    if args.stop_encoder_grad {
        cfg.train.stop_encoder_grad = true;
    }
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    if let Some(s) = args.sigma {
        cfg.blur.sigma = s;
    }
    if let Some(e) = args.epochs {
        match command {
            Command::TrainClassifier => cfg.classifier.epochs = e,
            _ => cfg.train.epochs = e,
        }
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// All zeros collapse to no regularizer; a single value is repeated per layer.
pub fn expand_lambda(values: &[f64], layers: usize) -> Vec<f64> {
    if values.iter().all(|&v| v == 0.0) {
        Vec::new()
    } else if values.len() == 1 {
        vec![values[0]; layers]
    } else {
        values.to_vec()
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
    precision: &'a str,
    seed: u64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Creates the output directory and records the resolved config and run info.
fn prepare_outputs(cfg: &RunConfig, command: &Command, precision: Precision) -> Result<PathBuf> {
    let dir = cfg.outputs.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let info = RunInfo {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        precision: precision.name(),
        seed: cfg.seed,
    };
    write_file(&dir.join("run_info.toml"), toml::to_string(&info).expect("run info").as_bytes())?;
    Ok(dir)
}

fn precision_of<T: Scalar>() -> Precision {
    if T::DTYPE == 1 {
        Precision::F64
    } else {
        Precision::F32
    }
}

fn fresh_bundle<T: Scalar>(cfg: &RunConfig) -> Result<ModelBundle<T>> {
    ModelBundle::init(&cfg.arch, &mut Rng::stream(cfg.seed, 10))
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, command: &Command) -> Result<&'a PathBuf> {
    path.as_ref()
        .ok_or_else(|| Error::Config(format!("{} requires --{flag}", command.name())))
}

fn load_vae<T: Scalar>(cfg: &RunConfig, args: &CommonArgs, command: &Command) -> Result<ModelBundle<T>> {
    let mut b = fresh_bundle::<T>(cfg)?;
    b.load(require(&args.checkpoint, "checkpoint", command)?, Part::Vae)?;
    Ok(b)
}

fn write_rows<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for i in 0..t.batch() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{:e}", v.f64())).collect();
        writeln!(w, "{}", row.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Smallest near-square `(rows, cols)` holding `n` tiles.
fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (1..=n).find(|c| c * c >= n).unwrap_or(1);
    (n.div_ceil(cols), cols)
}

/// Pads `images` with blank (-1) tiles up to `total` rows.
fn pad_tiles<T: Scalar>(images: &Tensor<T>, total: usize) -> Result<Tensor<T>> {
    if images.batch() >= total {
        return Ok(images.clone());
    }
    let mut shape = images.shape().to_vec();
    shape[0] = total - images.batch();
    let blank = Tensor::full(shape, T::of(-1.0));
    Tensor::stack_rows(&[images, &blank])
}

fn execute<T: Scalar>(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let args = &cli.common;
    let command = &cli.command;
    let dir = prepare_outputs(cfg, command, precision_of::<T>())?;
    match command {
        Command::TrainClassifier => {
            let train_set = cfg.dataset.load(Split::Train)?;
            let valid = cfg.dataset.load(Split::Valid)?;
            let mut b = fresh_bundle::<T>(cfg)?;
            let path = dir.join("classifier_metrics.tsv");
            let mut log = create(&path)?;
            train::train_classifier(&mut b, &train_set, &cfg.classifier, Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&path, e))?;
            b.save(dir.join("classifier.ckpt"), Part::Classifier)?;
            let per_label = train::per_label_accuracy(&b, &valid)?;
            let exact = train::exact_match_accuracy(&b, &valid)?;
            let mut s = String::from("# label\tvalid_accuracy\n");
            for (j, a) in per_label.iter().enumerate() {
                s.push_str(&format!("{j}\t{a:.6}\n"));
            }
            s.push_str(&format!("exact_match\t{exact:.6}\n"));
            write_file(&dir.join("classifier_eval.tsv"), s.as_bytes())?;
            println!("valid exact-match accuracy {exact:.4}");
        }
        Command::TrainVae => {
            let train_set = cfg.dataset.load(Split::Train)?;
            let mut b = fresh_bundle::<T>(cfg)?;
            if let Some(c) = &args.classifier {
                b.load(c, Part::Classifier)?;
            }
            if let Some(c) = &args.checkpoint {
                b.load(c, Part::Vae)?;
            }
            let path = dir.join("metrics.tsv");
            let mut log = create(&path)?;
            let m = train::train_vae(&mut b, &train_set, &cfg.train, args.classifier.is_some(), Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&path, e))?;
            b.save(dir.join("vae.ckpt"), Part::Vae)?;
            if let Some(last) = m.last() {
                println!("epoch {} total {:.6}", last.epoch, last.loss.total);
            }
        }
        Command::Sample => {
            let b = load_vae::<T>(cfg, args, command)?;
            let n = cfg.eval.samples;
            let (z, x) = eval::sample_prior(&b, n, &mut Rng::stream(cfg.seed, 20))?;
            let (rows, cols) = grid_dims(n);
            write_image_grid(&pad_tiles(&x, rows * cols)?, rows, cols, dir.join("samples.ppm"))?;
            write_rows(&dir.join("samples_latents.tsv"), &z)?;
            println!("wrote {n} samples as a {rows}x{cols} grid");
        }
        Command::Reconstruct => {
            let b = load_vae::<T>(cfg, args, command)?;
            let test = cfg.dataset.load(Split::Test)?;
            let n = cfg.eval.examples.min(test.len());
            let idx: Vec<usize> = (0..n).collect();
            let x: Tensor<T> = test.images_as(&idx);
            let mut rng = Rng::stream(cfg.seed, 21);
            let (mu, _) = eval::posterior(&b, &x)?;
            let r = eval::reconstruct(&b, &x, &mut rng, cfg.eval.use_mean)?;
            // Rows of originals alternate with rows of their reconstructions.
            let cols = 8.min(n.max(1));
            let rows = n.div_ceil(cols);
            let (xp, rp) = (pad_tiles(&x, rows * cols)?, pad_tiles(&r, rows * cols)?);
            let mut parts = Vec::with_capacity(2 * rows);
            for row in 0..rows {
                let idx: Vec<usize> = (row * cols..(row + 1) * cols).collect();
                parts.push(xp.select_rows(&idx));
                parts.push(rp.select_rows(&idx));
            }
            let grid = Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())?;
            write_image_grid(&grid, 2 * rows, cols, dir.join("reconstructions.ppm"))?;
            write_rows(&dir.join("reconstruct_latents.tsv"), &mu)?;
            if let Some(c) = &args.classifier {
                let mut b = b;
                b.load(c, Part::Classifier)?;
                let m = eval::reconstruction_metrics(&b, &x, &r)?;
                write_file(&dir.join("reconstruct_metrics.tsv"), m.tsv().as_bytes())?;
                println!("label bit agreement {:.4}", m.bit_agreement);
            }
        }
        Command::Interpolate => {
            let b = load_vae::<T>(cfg, args, command)?;
            let test = cfg.dataset.load(Split::Test)?;
            let (pairs, steps) = (cfg.eval.pairs, cfg.eval.steps);
            if pairs == 0 || 2 * pairs > test.len() {
                return Err(Error::Config(format!("eval.pairs {pairs} needs 1..={} ", test.len() / 2)));
            }
            let mut frames = Vec::with_capacity(pairs);
            let mut latents = Vec::with_capacity(pairs);
            for p in 0..pairs {
                let xa: Tensor<T> = test.images_as(&[2 * p]);
                let xb: Tensor<T> = test.images_as(&[2 * p + 1]);
                frames.push(eval::interpolate(&b, &xa, &xb, steps)?);
                let (ma, _) = eval::posterior(&b, &xa)?;
                let (mb, _) = eval::posterior(&b, &xb)?;
                latents.push(eval::interpolate_latents(ma.data(), mb.data(), steps)?);
            }
            let grid = Tensor::stack_rows(&frames.iter().collect::<Vec<_>>())?;
            write_image_grid(&grid, pairs, steps, dir.join("interpolation.ppm"))?;
            write_rows(
                &dir.join("interpolation_latents.tsv"),
                &Tensor::stack_rows(&latents.iter().collect::<Vec<_>>())?,
            )?;
            println!("wrote {pairs} interpolations of {steps} steps");
        }
        Command::EvalNll => {
            let b = load_vae::<T>(cfg, args, command)?;
            let model = InferenceModel { bundle: &b };
            if cfg.eval.splits.is_empty() {
                return Err(Error::Config("eval.splits is empty".into()));
            }
            for (i, &split) in cfg.eval.splits.iter().enumerate() {
                let mut set = cfg.dataset.load(split)?;
                if cfg.eval.max_examples > 0 && set.len() > cfg.eval.max_examples {
                    set = set.take(cfg.eval.max_examples);
                }
                let x: Tensor<f64> = set.images.cast();
                let r = eval::estimate_nll(&model, &x, cfg.eval.k, &mut Rng::stream(cfg.seed, 30 + i as u64))?;
                let line = r.line(split.name());
                let body = format!("# split\tk\tper_unit\tse\tn\n{line}\n");
                write_file(&dir.join(format!("nll_{}.tsv", split.name())), body.as_bytes())?;
                println!("{line}");
            }
        }
        Command::BlurExperiment => {
            let mut b = fresh_bundle::<T>(cfg)?;
            b.load(require(&args.classifier, "classifier", command)?, Part::Classifier)?;
            let set = cfg.dataset.load(Split::Train)?;
            let x: Tensor<T> = set.images.cast();
            let r = run_blur_experiment(&b, &x, &cfg.blur)?;
            write_file(&dir.join("blur_metrics.tsv"), r.metrics_tsv().as_bytes())?;
            let mut losses = String::from("# step\tcontrol\tblurred\n");
            for (i, (c, z)) in r.control.losses.iter().zip(&r.blurred.losses).enumerate() {
                losses.push_str(&format!("{i}\t{c:.8}\t{z:.8}\n"));
            }
            write_file(&dir.join("blur_losses.tsv"), losses.as_bytes())?;
            let cols = cfg.blur.examples.min(10);
            let idx: Vec<usize> = (0..cols).collect();
            let grid = Tensor::stack_rows(&[
                &x.select_rows(&idx),
                &r.control.reconstructions.select_rows(&idx),
                &r.blurred.reconstructions.select_rows(&idx),
            ])?;
            write_image_grid(&grid, 3, cols, dir.join("blur_grid.ppm"))?;
            println!(
                "pixel mse control {:.6} blurred {:.6}",
                r.control.pixel_mse, r.blurred.pixel_mse
            );
        }
        Command::Gradcheck { instances, coordinates } => {
            let ops = gradcheck::op_suite(*instances, cfg.seed)?;
            let composite = gradcheck::composite_suite(*coordinates, cfg.seed)?;
            let mut s = String::from("# check\tinstances\tmax_rel_error\n");
            for c in ops.iter().chain(&composite) {
                s.push_str(&c.line());
                s.push('\n');
            }
            write_file(&dir.join("gradcheck.tsv"), s.as_bytes())?;
            print!("{s}");
            let over = |cs: &[OpCheck], tol: f64| -> Vec<String> {
                cs.iter()
                    .filter(|c| !(c.max_rel_error <= tol))
                    .map(|c| format!("{} {:.3e}", c.op, c.max_rel_error))
                    .collect()
            };
            let mut bad = over(&ops, OP_TOLERANCE);
            bad.extend(over(&composite, COMPOSITE_TOLERANCE));
            if !bad.is_empty() {
                return Err(Error::Verification(format!("gradient check exceeded tolerance: {}", bad.join(", "))));
            }
        }
    }
    Ok(())
}
