//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blur::BlurExperimentConfig;
use crate::data::{generate_shapes, load_binary_records, scale_and_crop, LabeledImageSet, ShapeSpec, Split, SHAPE_LABELS};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Shapes,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Seed of the synthetic generator; independent of the run seed so
    /// ablations share data.
    pub seed: u64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub canvas: usize,
    pub channels: usize,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Stored record geometry `[C, H, W]` of binary files.
    pub record_image: [usize; 3],
    pub label_bytes: usize,
    pub num_classes: usize,
    /// Bilinear resize target `[H, W]` applied before `crop`.
    pub scale: Option<[usize; 2]>,
    pub crop: Option<[usize; 2]>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = ShapeSpec::default();
        DatasetConfig {
            source: DatasetSource::Shapes,
            seed: s.seed,
            train_size: s.train,
            valid_size: s.valid,
            test_size: s.test,
            canvas: s.canvas,
            channels: s.channels,
            train_path: None,
            valid_path: None,
            test_path: None,
            record_image: [3, 32, 32],
            label_bytes: 1,
            num_classes: 10,
            scale: None,
            crop: None,
        }
    }
}

impl DatasetConfig {
    fn shape_spec(&self) -> ShapeSpec {
        ShapeSpec {
            canvas: self.canvas,
            channels: self.channels,
            train: self.train_size,
            valid: self.valid_size,
            test: self.test_size,
            seed: self.seed,
        }
    }

    /// Image shape `[C, H, W]` after any resize and crop.
    pub fn image_shape(&self) -> [usize; 3] {
        match self.source {
            DatasetSource::Shapes => [self.channels, self.canvas, self.canvas],
            DatasetSource::Binary => {
                let [c, h, w] = self.record_image;
                let [h, w] = self.crop.or(self.scale).unwrap_or([h, w]);
                [c, h, w]
            }
        }
    }

    pub fn num_labels(&self) -> usize {
        match self.source {
            DatasetSource::Shapes => SHAPE_LABELS,
            DatasetSource::Binary => self.label_bytes * self.num_classes,
        }
    }

    pub fn load(&self, split: Split) -> Result<LabeledImageSet> {
        match self.source {
            DatasetSource::Shapes => generate_shapes(&self.shape_spec(), split),
            DatasetSource::Binary => {
                let path = match split {
                    Split::Train => &self.train_path,
                    Split::Valid => &self.valid_path,
                    Split::Test => &self.test_path,
                };
                let path = path
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("dataset has no {} split path", split.name())))?;
                let set = load_binary_records(path, self.record_image, self.label_bytes, self.num_classes, split)?;
                if self.scale.is_none() && self.crop.is_none() {
                    return Ok(set);
                }
                let [_, h, w] = self.record_image;
                let scale = self.scale.unwrap_or([h, w]);
                let crop = self.crop.unwrap_or(scale);
                let images = scale_and_crop(&set.images, scale, crop)?;
                LabeledImageSet::new(images, set.labels, split)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Importance samples per example.
    pub k: usize,
    pub splits: Vec<Split>,
    /// Examples per split used by `eval-nll`; 0 means all.
    pub max_examples: usize,
    /// Prior samples drawn by `sample` (a square number fills the grid).
    pub samples: usize,
    pub steps: usize,
    pub pairs: usize,
    /// Test examples shown by `reconstruct`.
    pub examples: usize,
    pub use_mean: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 100,
            splits: vec![Split::Train, Split::Valid, Split::Test],
            max_examples: 500,
            samples: 64,
            steps: 8,
            pairs: 4,
            examples: 32,
            use_mean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

/// Every setting of a run. The top-level `seed` overrides the seeds of the
/// `classifier`, `train` and `blur` sections when resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    /// Classifier training settings (`lambda` is ignored).
    pub classifier: TrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub blur: BlurExperimentConfig,
    pub outputs: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            classifier: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            blur: BlurExperimentConfig::default(),
            outputs: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Propagates the run seed, then checks cross-section consistency.
    pub fn resolve(&mut self) -> Result<()> {
        self.classifier.seed = self.seed;
        self.train.seed = self.seed;
        self.blur.seed = self.seed;
        self.arch.validate()?;
        self.train.validate()?;
        self.classifier.validate()?;
        let image = self.dataset.image_shape();
        if image != self.arch.image {
            return Err(Error::Config(format!(
                "dataset images {image:?} do not match arch.image {:?}",
                self.arch.image
            )));
        }
        if self.dataset.num_labels() != self.arch.num_labels {
            return Err(Error::Config(format!(
                "dataset has {} labels but arch.num_labels is {}",
                self.dataset.num_labels(),
                self.arch.num_labels
            )));
        }
        if let Some(l) = &self.train.lambda {
            let layers = self.arch.regularized_layers().len();
            if !l.is_empty() && l.len() != layers {
                return Err(Error::Config(format!("train.lambda has {} entries for {layers} regularized layers", l.len())));
            }
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[train]\nepochs = 2\nlambda = []\n").unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.lambda, Some(vec![]));
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.eval.k, 100);
    }

    #[test]
    fn resolve_checks_dataset_against_arch() {
        let mut c = RunConfig::default();
        c.dataset.canvas = 16;
        assert_eq!(c.resolve().unwrap_err().kind(), "config");
        let mut c = RunConfig::default();
        c.seed = 9;
        c.resolve().unwrap();
        assert_eq!((c.train.seed, c.classifier.seed, c.blur.seed), (9, 9, 9));
    }

    #[test]
    fn binary_split_path_required() {
        let c = DatasetConfig {
            source: DatasetSource::Binary,
            ..DatasetConfig::default()
        };
        assert_eq!(c.load(Split::Test).unwrap_err().kind(), "config");
        assert_eq!(c.image_shape(), [3, 32, 32]);
        assert_eq!(c.num_labels(), 10);
    }
}
