//! Python module `discgen`. Images cross the boundary as a flat list of
//! floats plus an `[N, C, H, W]` shape; latents as a flat list plus `[N, D]`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use discgen::blur::run_blur_experiment;
use discgen::config::RunConfig;
use discgen::data::Split;
use discgen::distributions::{DiagonalGaussian, Rng};
use discgen::eval::{self, InferenceModel};
use discgen::model::{ModelBundle, Part};
use discgen::objective::{self, LossBreakdown};
use discgen::{train, Error, Tensor};

type Flat = (Vec<f64>, Vec<usize>);

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(discgen::cli::error_line(&e))
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::from_f64(shape, &data).map_err(py_err)
}

fn flat(t: &Tensor<f32>) -> Flat {
    (t.data().iter().map(|&v| v as f64).collect(), t.shape().to_vec())
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

fn part(name: &str) -> PyResult<Part> {
    match name {
        "all" => Ok(Part::All),
        "vae" => Ok(Part::Vae),
        "classifier" => Ok(Part::Classifier),
        _ => Err(PyValueError::new_err(format!("unknown checkpoint part {name:?}"))),
    }
}

fn breakdown<'py>(py: Python<'py>, b: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("l_z", b.l_z)?;
    d.set_item("l_x", b.l_x)?;
    d.set_item("l_d", b.l_d.clone())?;
    d.set_item("l_y", b.l_y)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

/// A run configuration and its model bundle (32-bit).
#[pyclass(name = "Model", module = "discgen")]
struct PyModel {
    cfg: RunConfig,
    bundle: ModelBundle<f32>,
    has_classifier: bool,
}

#[pymethods]
impl PyModel {
    /// Builds the bundle from TOML config text (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None, seed=None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.resolve().map_err(py_err)?;
        let bundle = ModelBundle::init(&cfg.arch, &mut Rng::stream(cfg.seed, 10)).map_err(py_err)?;
        Ok(PyModel {
            cfg,
            bundle,
            has_classifier: false,
        })
    }

    /// The resolved configuration as TOML.
    fn config(&self) -> String {
        self.cfg.to_toml()
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        self.bundle.arch.image.to_vec()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.bundle.arch.latent_dim
    }

    /// `(images, shape, labels, label_shape)` of a dataset split.
    fn dataset(&self, name: &str) -> PyResult<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>)> {
        let set = self.cfg.dataset.load(split(name)?).map_err(py_err)?;
        let (x, xs) = flat(&set.images);
        let (y, ys) = flat(&set.labels);
        Ok((x, xs, y, ys))
    }

    #[pyo3(signature = (path, part="all"))]
    fn save(&self, path: &str, part: &str) -> PyResult<()> {
        self.bundle.save(path, self::part(part)?).map_err(py_err)
    }

    #[pyo3(signature = (path, part="all"))]
    fn load(&mut self, path: &str, part: &str) -> PyResult<()> {
        let p = self::part(part)?;
        self.bundle.load(path, p).map_err(py_err)?;
        self.has_classifier |= p != Part::Vae;
        Ok(())
    }

    /// Trains the classifier on the train split; returns held-out exact-match accuracy.
    #[pyo3(signature = (epochs=None))]
    fn train_classifier(&mut self, epochs: Option<usize>) -> PyResult<f64> {
        let mut cfg = self.cfg.classifier.clone();
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let train_set = self.cfg.dataset.load(Split::Train).map_err(py_err)?;
        let valid = self.cfg.dataset.load(Split::Valid).map_err(py_err)?;
        train::train_classifier(&mut self.bundle, &train_set, &cfg, None).map_err(py_err)?;
        self.has_classifier = true;
        train::exact_match_accuracy(&self.bundle, &valid).map_err(py_err)
    }

    /// Trains the VAE; `lam=[]` gives the plain bound. Returns per-epoch totals.
    #[pyo3(signature = (lam=None, epochs=None))]
    fn train_vae(&mut self, lam: Option<Vec<f64>>, epochs: Option<usize>) -> PyResult<Vec<f64>> {
        let mut cfg = self.cfg.train.clone();
        if lam.is_some() {
            cfg.lambda = lam;
        }
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let train_set = self.cfg.dataset.load(Split::Train).map_err(py_err)?;
        let m = train::train_vae(&mut self.bundle, &train_set, &cfg, self.has_classifier, None).map_err(py_err)?;
        Ok(m.iter().map(|e| e.loss.total).collect())
    }

    /// Posterior means and log-variances.
    fn encode(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Flat, Flat)> {
        let (m, lv) = eval::posterior(&self.bundle, &tensor(images, shape)?).map_err(py_err)?;
        Ok((flat(&m), flat(&lv)))
    }

    fn decode(&self, z: Vec<f64>, shape: Vec<usize>) -> PyResult<Flat> {
        Ok(flat(&eval::decode_mean(&self.bundle, &tensor(z, shape)?).map_err(py_err)?))
    }

    #[pyo3(signature = (images, shape, use_mean=true, seed=0))]
    fn reconstruct(&self, images: Vec<f64>, shape: Vec<usize>, use_mean: bool, seed: u64) -> PyResult<Flat> {
        let x = tensor(images, shape)?;
        Ok(flat(&eval::reconstruct(&self.bundle, &x, &mut Rng::new(seed), use_mean).map_err(py_err)?))
    }

    /// `(latents, images)` of `n` prior draws.
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<(Flat, Flat)> {
        let (z, x) = eval::sample_prior(&self.bundle, n, &mut Rng::new(seed)).map_err(py_err)?;
        Ok((flat(&z), flat(&x)))
    }

    /// Frames between two single images given as flat `[C, H, W]` lists.
    fn interpolate(&self, a: Vec<f64>, b: Vec<f64>, steps: usize) -> PyResult<Flat> {
        let mut shape = vec![1];
        shape.extend(self.bundle.arch.image);
        let (xa, xb) = (tensor(a, shape.clone())?, tensor(b, shape)?);
        Ok(flat(&eval::interpolate(&self.bundle, &xa, &xb, steps).map_err(py_err)?))
    }

    /// Training-mode objective terms on one batch.
    #[pyo3(signature = (images, shape, lam=None, seed=0))]
    fn objective<'py>(
        &self,
        py: Python<'py>,
        images: Vec<f64>,
        shape: Vec<usize>,
        lam: Option<Vec<f64>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x = tensor(images, shape)?;
        let cfg = train::TrainConfig {
            lambda: lam.or_else(|| self.cfg.train.lambda.clone()),
            ..self.cfg.train.clone()
        };
        let obj = cfg.objective(&self.bundle, self.has_classifier).map_err(py_err)?;
        let o = objective::build(&self.bundle, &x, &mut Rng::new(seed), &obj, discgen::nn::Mode::Train).map_err(py_err)?;
        breakdown(py, &o.breakdown)
    }

    /// Importance-sampled log-likelihood: `(per_unit, se, estimates)`.
    #[pyo3(signature = (images, shape, k=100, seed=0))]
    fn estimate_nll(&self, images: Vec<f64>, shape: Vec<usize>, k: usize, seed: u64) -> PyResult<(f64, f64, Vec<f64>)> {
        let x = tensor(images, shape)?.cast::<f64>();
        let r = eval::estimate_nll(&InferenceModel { bundle: &self.bundle }, &x, k, &mut Rng::new(seed)).map_err(py_err)?;
        Ok((r.per_unit, r.se, r.estimates))
    }

    /// Per-layer feature distances and label agreement of reconstructions.
    fn reconstruction_metrics<'py>(
        &self,
        py: Python<'py>,
        images: Vec<f64>,
        recon: Vec<f64>,
        shape: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = eval::reconstruction_metrics(&self.bundle, &tensor(images, shape.clone())?, &tensor(recon, shape)?)
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("feature_distance", m.feature_distance)?;
        d.set_item("bit_agreement", m.bit_agreement)?;
        d.set_item("example_agreement", m.example_agreement)?;
        d.set_item("pixel_mse", m.pixel_mse)?;
        Ok(d)
    }

    /// Runs the feature-blur experiment on the train split; returns its metrics table.
    #[pyo3(signature = (sigma=None, steps=None))]
    fn blur_experiment(&self, sigma: Option<f64>, steps: Option<usize>) -> PyResult<String> {
        let mut cfg = self.cfg.blur.clone();
        cfg.sigma = sigma.unwrap_or(cfg.sigma);
        cfg.steps = steps.unwrap_or(cfg.steps);
        let set = self.cfg.dataset.load(Split::Train).map_err(py_err)?;
        let r = run_blur_experiment(&self.bundle, &set.images, &cfg).map_err(py_err)?;
        Ok(r.metrics_tsv())
    }
}

/// `KL(N(mean, exp(log_var)) || N(0, I))`.
#[pyfunction]
fn kl_to_standard_normal(mean: Vec<f64>, log_var: Vec<f64>) -> PyResult<f64> {
    let (d, e) = (mean.len(), log_var.len());
    let q = DiagonalGaussian::new(Tensor::new(vec![d], mean).map_err(py_err)?, Tensor::new(vec![e], log_var).map_err(py_err)?)
        .map_err(py_err)?;
    Ok(q.kl_to_standard_normal())
}

/// Finite-difference checks: `(name, instances, max_rel_error)` rows.
#[pyfunction]
#[pyo3(signature = (instances=20, coordinates=64, seed=0))]
fn gradcheck(instances: usize, coordinates: usize, seed: u64) -> PyResult<Vec<(String, usize, f64)>> {
    let mut rows = discgen::gradcheck::op_suite(instances, seed).map_err(py_err)?;
    rows.extend(discgen::gradcheck::composite_suite(coordinates, seed).map_err(py_err)?);
    Ok(rows.into_iter().map(|c| (c.op, c.instances, c.max_rel_error)).collect())
}

/// Writes images in `[-1, 1]` as a binary PPM grid.
#[pyfunction]
fn write_image_grid(images: Vec<f64>, shape: Vec<usize>, rows: usize, cols: usize, path: &str) -> PyResult<()> {
    discgen::image::write_image_grid(&tensor(images, shape)?, rows, cols, path).map_err(py_err)
}

/// Runs the command line with `args` (without the program name).
#[pyfunction]
fn cli(args: Vec<String>) -> PyResult<()> {
    discgen::cli::run(std::iter::once("discgen".to_string()).chain(args)).map_err(py_err)
}

#[pymodule(name = "discgen")]
fn discgen_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kl_to_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(write_image_grid, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
