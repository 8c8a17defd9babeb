//! Encoder, decoder and classifier networks and the bundle that holds them.
//!
//! Every encoder/classifier stage is a stride-2 convolution (kernel 4, pad 1)
//! that halves the spatial size and doubles the filter count, followed by
//! batch norm and leaky ReLU. The decoder mirrors this with stride-2
//! transposed convolutions that double the spatial size and halve the filter
//! count, ending in `tanh` so means lie in `(-1, 1)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::distributions::{GaussianVar, Rng, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Conv2d, Dense, Mode};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// `[channels, height, width]`.
    pub image: [usize; 3],
    pub latent_dim: usize,
    pub base_filters: usize,
    pub stages: usize,
    pub num_labels: usize,
    pub classifier_hidden: usize,
    pub kernel: usize,
    /// Classifier feature layers (0-based) used by the regularizer; empty means all.
    pub feature_layers: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image: [1, 32, 32],
            latent_dim: 16,
            base_filters: 8,
            stages: 3,
            num_labels: 5,
            classifier_hidden: 64,
            kernel: 4,
            feature_layers: Vec::new(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        let bad = |msg: String| Err(Error::Config(msg));
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("image shape {:?} must be positive", self.image));
        }
        if self.stages == 0 || self.latent_dim == 0 || self.base_filters == 0 {
            return bad("stages, latent_dim and base_filters must be positive".into());
        }
        let div = 1usize << self.stages;
        if h % div != 0 || w % div != 0 {
            return bad(format!(
                "image {h}x{w} not divisible by 2^stages = {div}"
            ));
        }
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return bad(format!("kernel {} must be even and >= 2", self.kernel));
        }
        if self.num_labels == 0 || self.classifier_hidden == 0 {
            return bad("num_labels and classifier_hidden must be positive".into());
        }
        let n = self.classifier_layers();
        if let Some(&l) = self.feature_layers.iter().find(|&&l| l >= n) {
            return bad(format!("feature layer {l} out of range (classifier has {n})"));
        }
        Ok(())
    }

    /// Padding that makes a stride-2 convolution exactly halve the input.
    pub fn pad(&self) -> usize {
        (self.kernel - 2) / 2
    }

    /// Filters of encoder/classifier stage `c` (0-based): `base * 2^c`.
    pub fn stage_filters(&self, c: usize) -> usize {
        self.base_filters << c
    }

    pub fn units(&self) -> usize {
        self.image.iter().product()
    }

    /// Number of classifier hidden layers: one per conv stage plus the dense layer.
    pub fn classifier_layers(&self) -> usize {
        self.stages + 1
    }

    /// Per-example shape of classifier hidden layer `l`.
    pub fn feature_shape(&self, l: usize) -> Vec<usize> {
        let [_, h, w] = self.image;
        if l < self.stages {
            vec![self.stage_filters(l), h >> (l + 1), w >> (l + 1)]
        } else {
            vec![self.classifier_hidden]
        }
    }

    /// Regularized layers, defaulting to all of them.
    pub fn regularized_layers(&self) -> Vec<usize> {
        if self.feature_layers.is_empty() {
            (0..self.classifier_layers()).collect()
        } else {
            self.feature_layers.clone()
        }
    }

    fn bottom(&self) -> (usize, usize, usize) {
        let [_, h, w] = self.image;
        (self.stage_filters(self.stages - 1), h >> self.stages, w >> self.stages)
    }

    fn check_image<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.image {
            let mut want = vec![s.first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.image);
            return Err(Error::shape("image batch", &want, s));
        }
        Ok(())
    }
}

/// Stride-2 convolution + batch norm + leaky ReLU.
#[derive(Debug, Clone)]
pub struct DownStage {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl DownStage {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        let h = self.bn.forward(g, store, h, mode)?;
        Ok(g.leaky_relu(h))
    }
}

fn down_stages<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, arch: &ArchConfig, rng: &mut Rng) -> Vec<DownStage> {
    let mut inputs = arch.image[0];
    (0..arch.stages)
        .map(|c| {
            let out = arch.stage_filters(c);
            let conv = Conv2d::new(store, &format!("{prefix}.conv{c}"), inputs, out, arch.kernel, 2, arch.pad(), false, false, rng);
            let bn = BatchNorm::new(store, &format!("{prefix}.bn{c}"), out);
            inputs = out;
            DownStage { conv, bn }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<DownStage>,
    pub mean_head: Dense,
    /// Absent for the deterministic autoencoder.
    pub log_var_head: Option<Dense>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, arch: &ArchConfig, variational: bool, rng: &mut Rng) -> Self {
        let stages = down_stages(store, prefix, arch, rng);
        let (c, h, w) = arch.bottom();
        let flat = c * h * w;
        let mean_head = Dense::new(store, &format!("{prefix}.mean"), flat, arch.latent_dim, rng);
        let log_var_head = variational.then(|| Dense::new(store, &format!("{prefix}.log_var"), flat, arch.latent_dim, rng));
        Encoder {
            stages,
            mean_head,
            log_var_head,
        }
    }

    fn trunk<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(g, store, h, mode)?;
        }
        g.flatten(h)
    }

    /// Posterior mean and clamped log-variance.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<GaussianVar> {
        let h = self.trunk(g, store, x, mode)?;
        let mean = self.mean_head.forward(g, store, h)?;
        let head = self
            .log_var_head
            .as_ref()
            .ok_or_else(|| Error::invalid("encoder has no log-variance head"))?;
        let raw = head.forward(g, store, h)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVar::new(g, mean, log_var)
    }

    /// Deterministic code (mean head only).
    pub fn code<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.trunk(g, store, x, mode)?;
        self.mean_head.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dense: Dense,
    pub dense_bn: BatchNorm,
    /// Transposed convolutions; all but the last are followed by batch norm.
    pub stages: Vec<(Conv2d, Option<BatchNorm>)>,
    bottom: (usize, usize, usize),
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, arch: &ArchConfig, rng: &mut Rng) -> Self {
        let bottom = arch.bottom();
        let (c, h, w) = bottom;
        let dense = Dense::new(store, &format!("{prefix}.dense"), arch.latent_dim, c * h * w, rng);
        let dense_bn = BatchNorm::new(store, &format!("{prefix}.dense_bn"), c);
        let mut stages = Vec::with_capacity(arch.stages);
        let mut inputs = c;
        for i in 0..arch.stages {
            let last = i + 1 == arch.stages;
            let out = if last {
                arch.image[0]
            } else {
                arch.stage_filters(arch.stages - 2 - i)
            };
            let conv = Conv2d::new(store, &format!("{prefix}.deconv{i}"), inputs, out, arch.kernel, 2, arch.pad(), true, last, rng);
            let bn = (!last).then(|| BatchNorm::new(store, &format!("{prefix}.bn{i}"), out));
            stages.push((conv, bn));
            inputs = out;
        }
        Decoder {
            dense,
            dense_bn,
            stages,
            bottom,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        let n = g.shape(z)[0];
        let (c, h, w) = self.bottom;
        let d = self.dense.forward(g, store, z)?;
        let d = g.reshape(d, vec![n, c, h, w])?;
        let d = self.dense_bn.forward(g, store, d, mode)?;
        let mut x = g.leaky_relu(d);
        for (conv, bn) in &self.stages {
            x = conv.forward(g, store, x)?;
            x = match bn {
                Some(bn) => {
                    let y = bn.forward(g, store, x, mode)?;
                    g.leaky_relu(y)
                }
                None => g.tanh(x),
            };
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub stages: Vec<DownStage>,
    pub hidden: Dense,
    pub hidden_bn: BatchNorm,
    pub head: Dense,
}

/// Hidden representations `d_1 .. d_L` and output logits.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub features: Vec<Var>,
    pub logits: Option<Var>,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, arch: &ArchConfig, rng: &mut Rng) -> Self {
        let stages = down_stages(store, prefix, arch, rng);
        let (c, h, w) = arch.bottom();
        let hidden = Dense::new(store, &format!("{prefix}.hidden"), c * h * w, arch.classifier_hidden, rng);
        let hidden_bn = BatchNorm::new(store, &format!("{prefix}.hidden_bn"), arch.classifier_hidden);
        let head = Dense::new(store, &format!("{prefix}.head"), arch.classifier_hidden, arch.num_labels, rng);
        Classifier {
            stages,
            hidden,
            hidden_bn,
            head,
        }
    }

    pub fn layers(&self) -> usize {
        self.stages.len() + 1
    }

    /// Runs the first `depth` hidden layers, or the whole network (with
    /// logits) when `depth` is `None`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        depth: Option<usize>,
    ) -> Result<ClassifierOutput> {
        let depth = depth.unwrap_or(self.layers());
        if depth == 0 || depth > self.layers() {
            return Err(Error::invalid(format!(
                "classifier depth {depth} outside 1..={}",
                self.layers()
            )));
        }
        let mut features = Vec::with_capacity(depth);
        let mut h = x;
        for s in self.stages.iter().take(depth) {
            h = s.forward(g, store, h, mode)?;
            features.push(h);
        }
        if depth <= self.stages.len() {
            return Ok(ClassifierOutput { features, logits: None });
        }
        let flat = g.flatten(h)?;
        let d = self.hidden.forward(g, store, flat)?;
        let d = self.hidden_bn.forward(g, store, d, mode)?;
        let d = g.leaky_relu(d);
        features.push(d);
        let logits = self.head.forward(g, store, d)?;
        Ok(ClassifierOutput {
            features,
            logits: Some(logits),
        })
    }
}

/// Which tensors a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    All,
    /// Encoder, decoder and pixel log-variance.
    Vae,
    Classifier,
}

impl Part {
    fn includes(self, name: &str) -> bool {
        let is_classifier = name.starts_with(CLASSIFIER_PREFIX);
        match self {
            Part::All => true,
            Part::Vae => !is_classifier,
            Part::Classifier => is_classifier,
        }
    }
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Encoder `f`, decoder `g`, classifier `d` and the pixel variance, in one store.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub arch: ArchConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Classifier,
    pub pixel_log_var: crate::params::ParamId,
}

impl<T: Scalar> ModelBundle<T> {
    /// Weights `~ N(0, 0.02²)`, biases 0, `γ = 1`, `β = 0`, pixel log-variance 0.
    pub fn init(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", arch, true, &mut rng.fork());
        let decoder = Decoder::new(&mut store, "decoder", arch, &mut rng.fork());
        let pixel_log_var = store.add_weight("pixel_log_var", Tensor::zeros(arch.image.to_vec()));
        let classifier = Classifier::new(&mut store, "classifier", arch, &mut rng.fork());
        Ok(ModelBundle {
            arch: arch.clone(),
            store,
            encoder,
            decoder,
            classifier,
            pixel_log_var,
        })
    }

    pub fn encode(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<GaussianVar> {
        self.arch.check_image(g, x)?;
        self.encoder.forward(g, &self.store, x, mode)
    }

    pub fn decode(&self, g: &mut Graph<T>, z: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.arch.latent_dim {
            return Err(Error::shape("decode", &[s.first().copied().unwrap_or(0), self.arch.latent_dim], s));
        }
        self.decoder.forward(g, &self.store, z, mode)
    }

    pub fn classify(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<ClassifierOutput> {
        self.arch.check_image(g, x)?;
        self.classifier.forward(g, &self.store, x, mode, None)
    }

    pub fn classify_prefix(&self, g: &mut Graph<T>, x: Var, mode: Mode, depth: usize) -> Result<ClassifierOutput> {
        self.arch.check_image(g, x)?;
        self.classifier.forward(g, &self.store, x, mode, Some(depth))
    }

    /// `p(x|z)` for a batch of decoder means: clamped pixel log-variance
    /// tiled over the batch.
    pub fn pixel_likelihood(&self, g: &mut Graph<T>, mean: Var) -> Result<GaussianVar> {
        let n = g.shape(mean)[0];
        let lv = g.param(&self.store, self.pixel_log_var);
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        let lv = g.repeat_rows(lv, n);
        GaussianVar::new(g, mean, lv)
    }

    /// Clamped pixel log-variance values.
    pub fn pixel_log_var_values(&self) -> Vec<f64> {
        self.store
            .value(self.pixel_log_var)
            .data()
            .iter()
            .map(|v| v.f64().clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect()
    }

    pub fn freeze_classifier(&mut self) {
        self.store.set_trainable(CLASSIFIER_PREFIX, false);
    }

    /// Freezes everything except the classifier.
    pub fn classifier_only(&mut self) {
        for p in self.store.params_mut() {
            if p.kind == crate::params::ParamKind::Weight {
                p.trainable = p.name.starts_with(CLASSIFIER_PREFIX);
            }
        }
    }

    /// Freezes the classifier and unfreezes everything else.
    pub fn vae_only(&mut self) {
        for p in self.store.params_mut() {
            if p.kind == crate::params::ParamKind::Weight {
                p.trainable = !p.name.starts_with(CLASSIFIER_PREFIX);
            }
        }
    }

    pub fn set_pixel_variance_fixed(&mut self, fixed: bool) {
        self.store.get_mut(self.pixel_log_var).trainable = !fixed;
    }

    pub fn named_tensors(&self, part: Part) -> Vec<(&str, &Tensor<T>)> {
        self.store
            .iter()
            .filter(|(_, p)| part.includes(&p.name))
            .map(|(_, p)| (p.name.as_str(), &p.value))
            .collect()
    }

    pub fn checkpoint_bytes(&self, part: Part) -> Vec<u8> {
        checkpoint::encode(&self.named_tensors(part))
    }

    pub fn save(&self, path: impl AsRef<Path>, part: Part) -> Result<()> {
        checkpoint::write(path, &self.named_tensors(part))
    }

    /// Loads `part` from a checkpoint, checking every name, shape and dtype
    /// against this bundle's architecture.
    pub fn load(&mut self, path: impl AsRef<Path>, part: Part) -> Result<()> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        self.load_bytes(&bytes, part)
    }

    pub fn load_bytes(&mut self, bytes: &[u8], part: Part) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_tensors(part)
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let tensors = checkpoint::decode::<T>(bytes, Some(&expected))?;
        for (name, t) in tensors {
            self.store.set_value(&name, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            image: [1, 8, 8],
            latent_dim: 3,
            base_filters: 2,
            stages: 2,
            num_labels: 2,
            classifier_hidden: 4,
            kernel: 4,
            feature_layers: vec![],
        }
    }

    #[test]
    fn validate_rejects_indivisible_images() {
        let mut a = tiny();
        a.image = [1, 10, 8];
        assert!(a.validate().is_err());
        a.image = [1, 8, 8];
        a.feature_layers = vec![5];
        assert!(a.validate().is_err());
    }

    #[test]
    fn filter_counts_double_and_halve() {
        let arch = ArchConfig {
            base_filters: 32,
            ..ArchConfig::default()
        };
        let b = ModelBundle::<f32>::init(&arch, &mut Rng::new(0)).unwrap();
        for (c, s) in b.encoder.stages.iter().enumerate() {
            assert_eq!(s.conv.out_channels, 32 << c);
        }
        let outs: Vec<usize> = b.decoder.stages.iter().map(|(c, _)| c.out_channels).collect();
        assert_eq!(outs, vec![64, 32, 1]);
        let ins: Vec<usize> = b.decoder.stages.iter().map(|(c, _)| c.in_channels).collect();
        assert_eq!(ins, vec![128, 64, 32]);
    }

    #[test]
    fn shapes_round_trip() {
        let arch = tiny();
        let b = ModelBundle::<f64>::init(&arch, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 1, 8, 8]));
        let q = b.encode(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(q.mean), &[3, 3]);
        assert_eq!(g.shape(q.log_var), &[3, 3]);
        let y = b.decode(&mut g, q.mean, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[3, 1, 8, 8]);
        let out = b.classify(&mut g, y, Mode::Eval).unwrap();
        assert_eq!(out.features.len(), arch.stages + 1);
        for (l, f) in out.features.iter().enumerate() {
            assert_eq!(g.shape(*f)[1..], arch.feature_shape(l)[..]);
        }
        let bad = g.input(Tensor::zeros(vec![3, 1, 4, 8]));
        assert!(b.encode(&mut g, bad, Mode::Eval).is_err());
    }
}
