//! Feature-blur experiment: a deterministic autoencoder trained so the
//! frozen classifier's early features of its reconstruction match either the
//! input's features (control) or a Gaussian-blurred copy of them.

use serde::{Deserialize, Serialize};

use crate::distributions::Rng;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ArchConfig, Decoder, Encoder, ModelBundle};
use crate::nn::Mode;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Normalized 1-D Gaussian taps over `[-r, r]`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur of every `[H, W]` plane of an `[N, F, H, W]`
/// tensor with replicated edges. `sigma = 0` returns the input unchanged.
pub fn gaussian_blur<T: Scalar>(maps: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be >= 0")));
    }
    if maps.rank() != 4 {
        return Err(Error::shape("gaussian_blur", &[0, 0, 0, 0], maps.shape()));
    }
    if sigma == 0.0 {
        return Ok(maps.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (maps.shape()[2], maps.shape()[3]);
    let clampi = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut out = Vec::with_capacity(maps.numel());
    let mut tmp = vec![0.0f64; h * w];
    for plane in maps.data().chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + clampi(x as i64 + j as i64 - r, w)].f64())
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[clampi(y as i64 + j as i64 - r, h) * w + x])
                    .sum();
                out.push(T::of(v));
            }
        }
    }
    Tensor::new(maps.shape().to_vec(), out)
}

/// Mean squared response of the 3×3 Laplacian `[0 1 0; 1 -4 1; 0 1 0]` over
/// the valid interior of every plane.
pub fn laplacian_energy<T: Scalar>(images: &Tensor<T>) -> Result<f64> {
    if images.rank() != 4 || images.shape()[2] < 3 || images.shape()[3] < 3 {
        return Err(Error::shape("laplacian_energy", &[0, 0, 3, 3], images.shape()));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in images.data().chunks_exact(h * w) {
        let at = |y: usize, x: usize| plane[y * w + x].f64();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let l = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                total += l * l;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurExperimentConfig {
    pub examples: usize,
    /// Classifier layers the loss looks through.
    pub depth: usize,
    pub sigma: f64,
    pub steps: usize,
    pub seed: u64,
    /// Bottleneck width of the autoencoder; 0 reuses the VAE latent size.
    pub code_dim: usize,
    pub adam: AdamConfig,
}

impl Default for BlurExperimentConfig {
    fn default() -> Self {
        BlurExperimentConfig {
            examples: 100,
            depth: 2,
            sigma: 1.0,
            steps: 500,
            seed: 0,
            code_dim: 64,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl BlurExperimentConfig {
    /// CRC-32 of every setting except `sigma`; both runs of an experiment
    /// share it.
    pub fn paired_hash(&self) -> u32 {
        let shared = BlurExperimentConfig {
            sigma: 0.0,
            ..self.clone()
        };
        crc32fast::hash(format!("{shared:?}").as_bytes())
    }
}

/// Deterministic encoder/decoder pair in its own parameter store.
#[derive(Debug, Clone)]
pub struct AutoEncoder<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Scalar> AutoEncoder<T> {
    pub fn new(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "ae.encoder", arch, false, &mut rng.fork());
        let decoder = Decoder::new(&mut store, "ae.decoder", arch, &mut rng.fork());
        Ok(AutoEncoder { store, encoder, decoder })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let z = self.encoder.code(g, &self.store, x, mode)?;
        self.decoder.forward(g, &self.store, z, mode)
    }
}

/// Classifier features at `depth` (running statistics).
pub fn features<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = bundle.classify_prefix(&mut g, xv, Mode::Eval, depth)?;
    Ok(g.value(*out.features.last().expect("depth >= 1")).clone())
}

/// `Σ‖d(x̂) − target‖² / N`, the reconstruction node and the loss node.
fn feature_loss<T: Scalar>(
    ae: &AutoEncoder<T>,
    bundle: &ModelBundle<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    depth: usize,
) -> Result<(Graph<T>, Var, Var)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let recon = ae.forward(&mut g, xv, Mode::Train)?;
    let out = bundle.classify_prefix(&mut g, recon, Mode::Eval, depth)?;
    let f = *out.features.last().expect("depth >= 1");
    let t = g.input(target.clone());
    let diff = g.sub(f, t)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    let loss = g.mul_scalar(s, 1.0 / x.batch() as f64);
    Ok((g, recon, loss))
}

/// One trained autoencoder and its measurements.
#[derive(Debug, Clone)]
pub struct BlurRun<T> {
    pub losses: Vec<f64>,
    /// Final reconstructions (batch statistics of the training batch).
    pub reconstructions: Tensor<T>,
    /// Own objective after training, at the returned reconstructions.
    pub final_loss: f64,
    pub pixel_mse: f64,
    pub hf_energy: f64,
    pub autoencoder: AutoEncoder<T>,
}

impl<T> BlurRun<T> {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }
}

fn train_one<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &BlurExperimentConfig,
    arch: &ArchConfig,
) -> Result<BlurRun<T>> {
    let mut ae = AutoEncoder::new(arch, &mut Rng::stream(cfg.seed, 7))?;
    let mut adam = AdamState::new(&ae.store);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (g, _, loss) = feature_loss(&ae, bundle, x, target, cfg.depth)?;
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            let (node, op) = g.first_non_finite().map_or((loss.index(), "loss"), |(v, op)| (v.index(), op));
            return Err(Error::NonFinite {
                node,
                op: format!("{op} (blur experiment)"),
            });
        }
        losses.push(lv);
        let grads = g.backward(loss)?;
        ae.store.zero_grad();
        ae.store.accumulate_grads(&g, &grads);
        adam_step(&mut ae.store, &mut adam, &cfg.adam);
        ae.store.apply_buffer_updates(&g);
    }
    let (g, recon, loss) = feature_loss(&ae, bundle, x, target, cfg.depth)?;
    let final_loss = g.value(loss).item().f64();
    losses.push(final_loss);
    let reconstructions = g.value(recon).clone();
    let pixel_mse = reconstructions
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    Ok(BlurRun {
        losses,
        hf_energy: laplacian_energy(&reconstructions)?,
        reconstructions,
        final_loss,
        pixel_mse,
        autoencoder: ae,
    })
}

#[derive(Debug, Clone)]
pub struct BlurReport<T> {
    pub control: BlurRun<T>,
    pub blurred: BlurRun<T>,
    pub input_hf_energy: f64,
    /// Final reconstructions of each run scored on the blurred objective.
    pub control_on_blurred_objective: f64,
    pub blurred_on_blurred_objective: f64,
    pub config_hash: u32,
}

impl<T> BlurReport<T> {
    pub fn control_hf_deviation(&self) -> f64 {
        (self.control.hf_energy - self.input_hf_energy).abs()
    }

    pub fn blurred_hf_deviation(&self) -> f64 {
        (self.blurred.hf_energy - self.input_hf_energy).abs()
    }

    /// Tab-separated `metric, control, blurred` rows with a header.
    pub fn metrics_tsv(&self) -> String {
        let mut s = String::from("# metric\tcontrol\tblurred\n");
        let mut row = |name: &str, a: f64, b: f64| s.push_str(&format!("{name}\t{a:.8}\t{b:.8}\n"));
        row("initial_feature_loss", self.control.initial_loss(), self.blurred.initial_loss());
        row("final_feature_loss", self.control.final_loss, self.blurred.final_loss);
        row("pixel_mse", self.control.pixel_mse, self.blurred.pixel_mse);
        row("hf_energy", self.control.hf_energy, self.blurred.hf_energy);
        row("hf_deviation", self.control_hf_deviation(), self.blurred_hf_deviation());
        row("blurred_objective", self.control_on_blurred_objective, self.blurred_on_blurred_objective);
        s.push_str(&format!("input_hf_energy\t{:.8}\t{:.8}\n", self.input_hf_energy, self.input_hf_energy));
        s.push_str(&format!("config_hash\t{:08x}\t{:08x}\n", self.config_hash, self.config_hash));
        s
    }
}

/// Trains the control and blurred-target autoencoders from the same
/// initialization on the first `cfg.examples` rows of `images`.
pub fn run_blur_experiment<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &Tensor<T>,
    cfg: &BlurExperimentConfig,
) -> Result<BlurReport<T>> {
    if cfg.depth == 0 || cfg.depth > bundle.arch.classifier_layers() {
        return Err(Error::Config(format!(
            "blur depth {} outside 1..={}",
            cfg.depth,
            bundle.arch.classifier_layers()
        )));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(Error::Config(format!("blur sigma {} must be >= 0", cfg.sigma)));
    }
    if cfg.examples < 2 || cfg.examples > images.batch() {
        return Err(Error::Config(format!(
            "blur experiment needs 2..={} examples, got {}",
            images.batch(),
            cfg.examples
        )));
    }
    let mut arch = bundle.arch.clone();
    if cfg.code_dim > 0 {
        arch.latent_dim = cfg.code_dim;
    }
    let idx: Vec<usize> = (0..cfg.examples).collect();
    let x = images.select_rows(&idx);
    let clean = features(bundle, &x, cfg.depth)?;
    let blurred_target = gaussian_blur(&clean, cfg.sigma)?;
    let config_hash = cfg.paired_hash();
    let control = train_one(bundle, &x, &clean, cfg, &arch)?;
    let blurred = train_one(bundle, &x, &blurred_target, cfg, &arch)?;
    let on_blurred_objective = |recon: &Tensor<T>| -> Result<f64> {
        let f = features(bundle, recon, cfg.depth)?;
        Ok(f.data()
            .iter()
            .zip(blurred_target.data())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            / x.batch() as f64)
    };
    let control_on_blurred_objective = on_blurred_objective(&control.reconstructions)?;
    let blurred_on_blurred_objective = on_blurred_objective(&blurred.reconstructions)?;
    Ok(BlurReport {
        control,
        blurred,
        input_hf_energy: laplacian_energy(&x)?,
        control_on_blurred_objective,
        blurred_on_blurred_objective,
        config_hash,
    })
}
