//! Training loops for the classifier and the VAE, with tab-separated metrics.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledImageSet};
use crate::distributions::Rng;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelBundle;
use crate::nn::Mode;
use crate::objective::{self, LossBreakdown, ObjectiveConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Per-layer regularizer weights. `None` picks 1 per layer when a
    /// classifier is attached; an empty list trains the plain ELBO.
    pub lambda: Option<Vec<f64>>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stop_encoder_grad: bool,
    pub fix_pixel_variance: bool,
    pub mc_samples: usize,
    pub logit_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: None,
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 30,
            seed: 0,
            stop_encoder_grad: false,
            fix_pixel_variance: false,
            mc_samples: 1,
            logit_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be at least 2", self.batch_size)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if let Some(l) = self.lambda.iter().flatten().find(|l| !(**l >= 0.0)) {
            return Err(Error::Config(format!("lambda {l} must be >= 0")));
        }
        if !(self.logit_weight >= 0.0) {
            return Err(Error::Config("logit_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// The objective for `bundle`. `with_classifier` says whether trained
    /// classifier weights are attached.
    pub fn objective<T: Scalar>(&self, bundle: &ModelBundle<T>, with_classifier: bool) -> Result<ObjectiveConfig> {
        let lambda = match &self.lambda {
            Some(l) => l.clone(),
            None if with_classifier => objective::default_lambda(bundle),
            None => Vec::new(),
        };
        if (lambda.iter().any(|&l| l > 0.0) || self.logit_weight > 0.0) && !with_classifier {
            return Err(Error::Config("regularizer weights are set but no classifier is attached".into()));
        }
        Ok(ObjectiveConfig {
            lambda,
            stop_encoder_grad: self.stop_encoder_grad,
            mc_samples: self.mc_samples,
            logit_weight: self.logit_weight,
        })
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

/// Header line written before the rows. `layers` is the number of `l_d` columns.
pub fn metrics_header(layers: usize) -> String {
    let mut cols = vec!["# epoch".to_string(), "l_z".into(), "l_x".into()];
    cols.extend((0..layers).map(|l| format!("l_d{l}")));
    cols.extend(["total".to_string(), "seconds".into()]);
    cols.join("\t")
}

/// `epoch, l_z, l_x, l_d[0..L], total, seconds`, tab-separated.
pub fn metrics_line(m: &EpochMetrics) -> String {
    let mut cols = vec![m.epoch.to_string(), format!("{:.6}", m.loss.l_z), format!("{:.6}", m.loss.l_x)];
    cols.extend(m.loss.l_d.iter().map(|d| format!("{d:.6}")));
    cols.push(format!("{:.6}", m.loss.total));
    cols.push(format!("{:.3}", m.seconds));
    cols.join("\t")
}

fn check_finite<T: Scalar>(g: &Graph<T>, loss: Var, what: &str) -> Result<()> {
    if g.value(loss).all_finite() {
        return Ok(());
    }
    let (node, op) = g
        .first_non_finite()
        .map(|(v, op)| (v.index(), op))
        .unwrap_or((loss.index(), "loss"));
    Err(Error::NonFinite {
        node,
        op: format!("{op} ({what})"),
    })
}

fn check_data<T: Scalar>(bundle: &ModelBundle<T>, data: &LabeledImageSet) -> Result<()> {
    if data.image_shape() != bundle.arch.image {
        return Err(Error::shape("dataset image", &bundle.arch.image, &data.image_shape()));
    }
    Ok(())
}

/// Trains encoder, decoder and pixel variance. The classifier stays frozen
/// and is only consulted when the objective regularizes. Metrics rows (and a
/// header) are written to `log` as they are produced.
pub fn train_vae<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    with_classifier: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_data(bundle, data)?;
    let obj = cfg.objective(bundle, with_classifier)?;
    bundle.vae_only();
    bundle.set_pixel_variance_fixed(cfg.fix_pixel_variance);
    let mut shuffle = Rng::stream(cfg.seed, 1);
    let mut noise = Rng::stream(cfg.seed, 2);
    let mut adam = AdamState::new(&bundle.store);
    let io = |e| Error::io("metrics log", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", metrics_header(obj.lambda.len())).map_err(io)?;
    }
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut parts = Vec::new();
        for idx in minibatches(data.len(), cfg.batch_size, &mut shuffle)? {
            let x: Tensor<T> = data.images_as(&idx);
            let o = objective::build(bundle, &x, &mut noise, &obj, Mode::Train)?;
            check_finite(&o.graph, o.loss, "vae objective")?;
            let grads = o.graph.backward(o.loss)?;
            bundle.store.zero_grad();
            bundle.store.accumulate_grads(&o.graph, &grads);
            adam_step(&mut bundle.store, &mut adam, &cfg.adam);
            bundle.store.apply_buffer_updates(&o.graph);
            parts.push(o.breakdown);
        }
        let m = EpochMetrics {
            epoch,
            loss: LossBreakdown::average(&parts).expect("at least one batch"),
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", metrics_line(&m)).map_err(io)?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Mean over the batch of the summed sigmoid cross-entropy of all labels.
pub fn classifier_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &Tensor<T>,
    labels: &Tensor<T>,
    mode: Mode,
) -> Result<(Graph<T>, Var)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.input(labels.clone());
    let logits = bundle.classify(&mut g, xv, mode)?.logits.expect("full classifier pass");
    let ce = g.bce_with_logits(logits, y)?;
    let s = g.sum(ce);
    let loss = g.mul_scalar(s, 1.0 / x.batch() as f64);
    Ok((g, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Training-set exact-match accuracy under running statistics.
    pub accuracy: f64,
    pub seconds: f64,
}

/// Predicted label bits (logit > 0) for every example, evaluated in
/// inference mode in chunks of `chunk`.
pub fn predict_labels<T: Scalar>(bundle: &ModelBundle<T>, images: &Tensor<T>, chunk: usize) -> Result<Vec<Vec<bool>>> {
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let mut g = Graph::new();
        let xv = g.input(images.select_rows(&idx));
        let logits = bundle.classify(&mut g, xv, Mode::Eval)?.logits.expect("logits");
        let t = g.value(logits);
        for i in 0..idx.len() {
            out.push(t.row(i).iter().map(|v| v.f64() > 0.0).collect());
        }
    }
    Ok(out)
}

/// Fraction of examples whose every predicted bit matches the label.
pub fn exact_match_accuracy<T: Scalar>(bundle: &ModelBundle<T>, data: &LabeledImageSet) -> Result<f64> {
    let preds = predict_labels(bundle, &data.images.cast::<T>(), 256)?;
    let hits = preds
        .iter()
        .enumerate()
        .filter(|(i, p)| p.iter().zip(data.labels.row(*i)).all(|(&b, &l)| b == (l == 1.0)))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy of each label bit separately.
pub fn per_label_accuracy<T: Scalar>(bundle: &ModelBundle<T>, data: &LabeledImageSet) -> Result<Vec<f64>> {
    let preds = predict_labels(bundle, &data.images.cast::<T>(), 256)?;
    let mut hits = vec![0usize; data.num_labels()];
    for (i, p) in preds.iter().enumerate() {
        for (j, (&b, &l)) in p.iter().zip(data.labels.row(i)).enumerate() {
            hits[j] += (b == (l == 1.0)) as usize;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / data.len() as f64).collect())
}

pub fn classifier_metrics_header() -> &'static str {
    "# epoch\tloss\taccuracy\tseconds"
}

pub fn classifier_metrics_line(m: &ClassifierEpoch) -> String {
    format!("{}\t{:.6}\t{:.6}\t{:.3}", m.epoch, m.loss, m.accuracy, m.seconds)
}

/// Trains only the classifier on the multi-label targets.
/// Re-estimates the classifier's running batch-norm statistics with the
/// weights held fixed: each is set to the plain average of the batch
/// statistics over consecutive chunks of the training set.
///
/// The exponential average kept during training lags weights that are still
/// moving, and eval-mode predictions can swing far from train-mode ones.
pub fn recalibrate_classifier_batch_norm<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    data: &LabeledImageSet,
    batch_size: usize,
) -> Result<()> {
    let n = data.len();
    let chunk = batch_size.clamp(2, n.max(2));
    let mut start = 0;
    let mut seen = 0usize;
    while start < n {
        // A trailing single example has no batch variance; fold it into the
        // previous chunk instead.
        let end = if n - (start + chunk).min(n) == 1 { n } else { (start + chunk).min(n) };
        if end - start < 2 {
            break;
        }
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        g.set_stat_momentum(Some(seen as f64 / (seen + 1) as f64));
        let xv = g.input(data.images_as(&idx));
        bundle.classify(&mut g, xv, Mode::Train)?;
        bundle.store.apply_buffer_updates(&g);
        seen += 1;
        start = end;
    }
    Ok(())
}

pub fn train_classifier<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<ClassifierEpoch>> {
    cfg.validate()?;
    check_data(bundle, data)?;
    if data.num_labels() != bundle.arch.num_labels {
        return Err(Error::shape("dataset labels", &[bundle.arch.num_labels], &[data.num_labels()]));
    }
    bundle.classifier_only();
    let mut shuffle = Rng::stream(cfg.seed, 3);
    let mut adam = AdamState::new(&bundle.store);
    let io = |e| Error::io("metrics log", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", classifier_metrics_header()).map_err(io)?;
    }
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let batches = minibatches(data.len(), cfg.batch_size, &mut shuffle)?;
        for idx in &batches {
            let x: Tensor<T> = data.images_as(idx);
            let y: Tensor<T> = data.labels.select_rows(idx).cast();
            let (g, loss) = classifier_loss(bundle, &x, &y, Mode::Train)?;
            check_finite(&g, loss, "classifier loss")?;
            let grads = g.backward(loss)?;
            bundle.store.zero_grad();
            bundle.store.accumulate_grads(&g, &grads);
            adam_step(&mut bundle.store, &mut adam, &cfg.adam);
            bundle.store.apply_buffer_updates(&g);
            total += g.value(loss).item().f64();
        }
        recalibrate_classifier_batch_norm(bundle, data, cfg.batch_size)?;
        let m = ClassifierEpoch {
            epoch,
            loss: total / batches.len() as f64,
            accuracy: exact_match_accuracy(bundle, data)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", classifier_metrics_line(&m)).map_err(io)?;
        }
        out.push(m);
    }
    bundle.freeze_classifier();
    Ok(out)
}
