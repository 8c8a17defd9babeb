//! Variational bound and its discriminatively regularized extension.
//!
//! Every term is a mean over the batch of per-example sums. The maximized
//! quantity is `total = l_z + l_x + Σ_l λ_l·l_d[l] (+ w_y·l_y)`; the graph root
//! returned for minimization is `-total`.

use crate::distributions::{self, sample_standard_normal, Rng};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelBundle;
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `-KL(q(z|x) || p(z))`.
    pub l_z: f64,
    /// Expected pixel log-likelihood.
    pub l_x: f64,
    /// Expected feature log-likelihood per regularized classifier layer.
    pub l_d: Vec<f64>,
    /// Negative soft-label cross-entropy on the classifier output; 0 when off.
    pub l_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_z: f64, l_x: f64, l_d: Vec<f64>, l_y: f64, lambda: &[f64], logit_weight: f64) -> Self {
        let reg: f64 = l_d.iter().zip(lambda).map(|(d, w)| d * w).sum();
        LossBreakdown {
            l_z,
            l_x,
            total: l_z + l_x + reg + logit_weight * l_y,
            l_d,
            l_y,
        }
    }

    /// Elementwise mean of several breakdowns (all with the same layer count).
    pub fn average(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut out = LossBreakdown {
            l_z: 0.0,
            l_x: 0.0,
            l_d: vec![0.0; first.l_d.len()],
            l_y: 0.0,
            total: 0.0,
        };
        for b in items {
            out.l_z += b.l_z / n;
            out.l_x += b.l_x / n;
            out.l_y += b.l_y / n;
            out.total += b.total / n;
            for (o, d) in out.l_d.iter_mut().zip(&b.l_d) {
                *o += d / n;
            }
        }
        Some(out)
    }
}

/// Knobs of the objective itself (the optimizer lives elsewhere).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// One weight per regularized classifier layer. Empty means plain ELBO
    /// with no classifier pass at all.
    pub lambda: Vec<f64>,
    /// Block the regularizer's gradient from reaching the encoder.
    pub stop_encoder_grad: bool,
    /// Monte Carlo draws of `z` per example.
    pub mc_samples: usize,
    /// Weight of the classifier-output term. 0 disables it.
    pub logit_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: Vec::new(),
            stop_encoder_grad: false,
            mc_samples: 1,
            logit_weight: 0.0,
        }
    }
}

/// `λ_l = 1` for every regularized layer: each feature log-likelihood enters
/// with unit variance and no reweighting.
pub fn default_lambda<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<f64> {
    vec![1.0; bundle.arch.regularized_layers().len()]
}

/// `λ_l = 1 / dim(d_l)`, which gives every layer the same per-unit weight.
pub fn per_unit_lambda<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<f64> {
    bundle
        .arch
        .regularized_layers()
        .iter()
        .map(|&l| 1.0 / bundle.arch.feature_shape(l).iter().product::<usize>() as f64)
        .collect()
}

/// A built objective graph.
pub struct Objective<T> {
    pub graph: Graph<T>,
    /// Scalar `-total`, ready for [`Graph::backward`].
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Standard variational bound: [`discriminative_loss`] with no regularizer.
pub fn elbo<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>, rng: &mut Rng, mc_samples: usize) -> Result<Objective<T>> {
    let cfg = ObjectiveConfig {
        mc_samples,
        ..ObjectiveConfig::default()
    };
    build(bundle, x, rng, &cfg, Mode::Train)
}

/// ELBO plus `Σ_l λ_l · E_q[log N(d_l(x) | d_l(μ_θ(z)), I)]` with gradient-blocked
/// targets `d_l(x)` from the frozen classifier (run with running statistics).
pub fn discriminative_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &Tensor<T>,
    rng: &mut Rng,
    cfg: &ObjectiveConfig,
) -> Result<Objective<T>> {
    let layers = bundle.arch.regularized_layers();
    if cfg.lambda.len() != layers.len() {
        return Err(Error::invalid(format!(
            "lambda has {} entries, model regularizes {} feature layers",
            cfg.lambda.len(),
            layers.len()
        )));
    }
    build(bundle, x, rng, cfg, Mode::Train)
}

/// Builds the objective in the given batch-norm mode.
pub fn build<T: Scalar>(
    bundle: &ModelBundle<T>,
    x: &Tensor<T>,
    rng: &mut Rng,
    cfg: &ObjectiveConfig,
    mode: Mode,
) -> Result<Objective<T>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if mode == Mode::Train && n < 2 {
        return Err(Error::invalid(format!("batch of {n} examples; batch norm needs at least 2")));
    }
    if cfg.mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    if let Some(l) = cfg.lambda.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("lambda {l} must be >= 0")));
    }
    let layers = bundle.arch.regularized_layers();
    let regularize = !cfg.lambda.is_empty();
    if regularize && cfg.lambda.len() != layers.len() {
        return Err(Error::invalid(format!(
            "lambda has {} entries, model regularizes {} feature layers",
            cfg.lambda.len(),
            layers.len()
        )));
    }
    let use_logits = cfg.logit_weight > 0.0;
    let depth = if use_logits {
        bundle.arch.classifier_layers()
    } else {
        layers.iter().max().map_or(0, |&l| l + 1)
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let q = bundle.encode(&mut g, xv, mode)?;
    let kl = distributions::kl_to_standard_normal(&mut g, &q)?;
    let l_z_var = g.mul_scalar(kl, -1.0 / n as f64);

    let (targets, target_probs) = if regularize || use_logits {
        let out = bundle.classifier.forward(&mut g, &bundle.store, xv, Mode::Eval, Some(depth))?;
        let feats: Vec<Var> = layers.iter().map(|&l| g.stop_gradient(out.features[l])).collect();
        let probs = match out.logits {
            Some(z) if use_logits => {
                let z = g.stop_gradient(z);
                Some(g.sigmoid(z))
            }
            _ => None,
        };
        (feats, probs)
    } else {
        (Vec::new(), None)
    };

    let scale = 1.0 / (n as f64 * cfg.mc_samples as f64);
    let mut lx_terms = Vec::with_capacity(cfg.mc_samples);
    let mut ld_terms: Vec<Vec<Var>> = vec![Vec::new(); targets.len()];
    let mut ly_terms = Vec::new();
    for _ in 0..cfg.mc_samples {
        let eps = sample_standard_normal::<T>(rng, g.shape(q.mean));
        let z = distributions::reparameterize(&mut g, &q, &eps)?;
        let mean = bundle.decode(&mut g, z, mode)?;
        let px = bundle.pixel_likelihood(&mut g, mean)?;
        lx_terms.push(distributions::log_density(&mut g, &px, xv)?);
        if targets.is_empty() && target_probs.is_none() {
            continue;
        }
        let recon = if cfg.stop_encoder_grad {
            let z_blocked = g.stop_gradient(z);
            bundle.decode(&mut g, z_blocked, mode)?
        } else {
            mean
        };
        let out = bundle.classifier.forward(&mut g, &bundle.store, recon, Mode::Eval, Some(depth))?;
        for (k, &l) in layers.iter().enumerate().take(targets.len()) {
            ld_terms[k].push(distributions::unit_variance_log_density(&mut g, out.features[l], targets[k])?);
        }
        if let (Some(p), Some(logits)) = (target_probs, out.logits) {
            let ce = g.bce_with_logits(logits, p)?;
            let s = g.sum(ce);
            ly_terms.push(g.mul_scalar(s, -1.0));
        }
    }

    let sum_scaled = |g: &mut Graph<T>, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.mul_scalar(acc, scale))
    };
    let l_x_var = sum_scaled(&mut g, &lx_terms)?;
    let l_d_vars: Vec<Var> = ld_terms.iter().map(|t| sum_scaled(&mut g, t)).collect::<Result<_>>()?;
    let l_y_var = if ly_terms.is_empty() { None } else { Some(sum_scaled(&mut g, &ly_terms)?) };

    let mut total = g.add(l_z_var, l_x_var)?;
    for (&d, &w) in l_d_vars.iter().zip(&cfg.lambda) {
        let t = g.mul_scalar(d, w);
        total = g.add(total, t)?;
    }
    if let Some(y) = l_y_var {
        let t = g.mul_scalar(y, cfg.logit_weight);
        total = g.add(total, t)?;
    }
    let loss = g.mul_scalar(total, -1.0);

    let item = |v: Var| g.value(v).item().f64();
    let breakdown = LossBreakdown::compose(
        item(l_z_var),
        item(l_x_var),
        l_d_vars.iter().map(|&v| item(v)).collect(),
        l_y_var.map_or(0.0, item),
        &cfg.lambda,
        cfg.logit_weight,
    );
    Ok(Objective {
        graph: g,
        loss,
        breakdown,
    })
}
