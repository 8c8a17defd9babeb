//! Importance-sampled likelihood estimates, prior samples, reconstructions
//! and latent interpolations. Everything here runs batch norm on running
//! statistics, so each example is processed independently of its batch.

use crate::distributions::{log_density_slices, standard_normal_log_density, DiagonalGaussian, Rng};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::ModelBundle;
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

/// A model with latent `z`, prior `N(0, I)`, an approximate posterior and a
/// conditional likelihood.
pub trait LatentVariableModel {
    fn latent_dim(&self) -> usize;

    /// Observed scalars per example.
    fn units(&self) -> usize;

    /// `q(z|x)` for every row of `x`, as one `[N, D]` Gaussian.
    fn posterior(&self, x: &Tensor<f64>) -> Result<DiagonalGaussian>;

    /// `log p(x_i | z_i)` for every row pair.
    fn log_likelihood(&self, x: &Tensor<f64>, z: &Tensor<f64>) -> Result<Vec<f64>>;
}

/// Inference-mode view of a [`ModelBundle`] with the pixel Gaussian likelihood.
pub struct InferenceModel<'a, T> {
    pub bundle: &'a ModelBundle<T>,
}

impl<T: Scalar> LatentVariableModel for InferenceModel<'_, T> {
    fn latent_dim(&self) -> usize {
        self.bundle.arch.latent_dim
    }

    fn units(&self) -> usize {
        self.bundle.arch.units()
    }

    fn posterior(&self, x: &Tensor<f64>) -> Result<DiagonalGaussian> {
        let mut g = Graph::new();
        let xv = g.input(x.cast::<T>());
        let q = self.bundle.encode(&mut g, xv, Mode::Eval)?;
        Ok(q.to_distribution(&g))
    }

    fn log_likelihood(&self, x: &Tensor<f64>, z: &Tensor<f64>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zv = g.input(z.cast::<T>());
        let mean = self.bundle.decode(&mut g, zv, Mode::Eval)?;
        let mean = g.value(mean);
        if mean.shape() != x.shape() {
            return Err(Error::shape("log_likelihood", mean.shape(), x.shape()));
        }
        let lv = self.bundle.pixel_log_var_values();
        Ok((0..x.batch())
            .map(|i| {
                let m: Vec<f64> = mean.row(i).iter().map(|v| v.f64()).collect();
                log_density_slices(&m, &lv, x.row(i))
            })
            .collect())
    }
}

/// Per-example log-likelihood estimates and their per-unit summary.
#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub estimates: Vec<f64>,
    pub k: usize,
    pub units: usize,
    /// `mean(estimates) / units`.
    pub per_unit: f64,
    /// Standard error of `per_unit` across examples.
    pub se: f64,
}

impl NllReport {
    pub fn from_estimates(estimates: Vec<f64>, k: usize, units: usize) -> Self {
        let n = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let var = if estimates.len() > 1 {
            estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        NllReport {
            k,
            units,
            per_unit: mean / units as f64,
            se: (var / n).sqrt() / units as f64,
            estimates,
        }
    }

    pub fn n(&self) -> usize {
        self.estimates.len()
    }

    pub fn mean(&self) -> f64 {
        self.estimates.iter().sum::<f64>() / self.estimates.len() as f64
    }

    /// `split, K, per-unit average, SE, N`, tab-separated.
    pub fn line(&self, split: &str) -> String {
        format!("{split}\t{}\t{:.6}\t{:.6}\t{}", self.k, self.per_unit, self.se, self.n())
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Examples decoded together when evaluating `K` samples each.
fn chunk_examples(k: usize) -> usize {
    (512 / k).max(1)
}

/// Log importance weights `log p(x|z_k) + log p(z_k) − log q(z_k|x)` for every
/// example (outer) and draw (inner).
pub fn log_weights<M: LatentVariableModel>(model: &M, x: &Tensor<f64>, k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let n = x.batch();
    let d = model.latent_dim();
    let q = model.posterior(x)?;
    let mut out = Vec::with_capacity(n);
    let step = chunk_examples(k);
    for start in (0..n).step_by(step) {
        let rows: Vec<usize> = (start..(start + step).min(n)).collect();
        let mut zs = Vec::with_capacity(rows.len() * k * d);
        let mut xs_idx = Vec::with_capacity(rows.len() * k);
        let mut base = Vec::with_capacity(rows.len() * k);
        for &i in &rows {
            let mu = q.mean().row(i);
            let lv = q.log_var().row(i);
            for _ in 0..k {
                let z: Vec<f64> = mu.iter().zip(lv).map(|(&m, &l)| m + (0.5 * l).exp() * rng.normal()).collect();
                base.push(standard_normal_log_density(&z) - log_density_slices(mu, lv, &z));
                zs.extend_from_slice(&z);
                xs_idx.push(i);
            }
        }
        let z = Tensor::new(vec![rows.len() * k, d], zs)?;
        let ll = model.log_likelihood(&x.select_rows(&xs_idx), &z)?;
        for (r, _) in rows.iter().enumerate() {
            out.push((0..k).map(|j| ll[r * k + j] + base[r * k + j]).collect());
        }
    }
    Ok(out)
}

/// `log p(x) ≈ logsumexp_k(log w_k) − ln K` per example.
pub fn estimate_nll<M: LatentVariableModel>(model: &M, x: &Tensor<f64>, k: usize, rng: &mut Rng) -> Result<NllReport> {
    let w = log_weights(model, x, k, rng)?;
    let est = w.iter().map(|w| log_sum_exp(w) - (k as f64).ln()).collect();
    Ok(NllReport::from_estimates(est, k, model.units()))
}

/// Evidence lower bound per example with the analytic KL and `samples`
/// draws for the reconstruction term.
pub fn estimate_elbo<M: LatentVariableModel>(model: &M, x: &Tensor<f64>, samples: usize, rng: &mut Rng) -> Result<NllReport> {
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let q = model.posterior(x)?;
    let d = model.latent_dim();
    let mut est = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let row = DiagonalGaussian::new(
            Tensor::new(vec![d], q.mean().row(i).to_vec())?,
            Tensor::new(vec![d], q.log_var().row(i).to_vec())?,
        )?;
        let zs: Vec<f64> = (0..samples).flat_map(|_| row.sample(rng).into_data()).collect();
        let xs = x.select_rows(&vec![i; samples]);
        let ll = model.log_likelihood(&xs, &Tensor::new(vec![samples, d], zs)?)?;
        est.push(ll.iter().sum::<f64>() / samples as f64 - row.kl_to_standard_normal());
    }
    Ok(NllReport::from_estimates(est, samples, model.units()))
}

/// Decoder means `μ_θ(z)` for a batch of latents.
pub fn decode_mean<T: Scalar>(bundle: &ModelBundle<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let m = bundle.decode(&mut g, zv, Mode::Eval)?;
    Ok(g.value(m).clone())
}

/// Posterior means and log-variances `[N, D]`.
pub fn posterior<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let q = bundle.encode(&mut g, xv, Mode::Eval)?;
    Ok((g.value(q.mean).clone(), g.value(q.log_var).clone()))
}

/// `n` prior draws and their decoder means.
pub fn sample_prior<T: Scalar>(bundle: &ModelBundle<T>, n: usize, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let z = crate::distributions::sample_standard_normal::<T>(rng, &[n, bundle.arch.latent_dim]);
    let x = decode_mean(bundle, &z)?;
    Ok((z, x))
}

/// Decoder means at a posterior draw, or at the posterior mean when `use_mean`.
pub fn reconstruct<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>, rng: &mut Rng, use_mean: bool) -> Result<Tensor<T>> {
    let (mu, lv) = posterior(bundle, x)?;
    let z = if use_mean {
        mu
    } else {
        let eps = crate::distributions::sample_standard_normal::<T>(rng, mu.shape());
        let data = mu
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + (l * T::of(0.5)).exp() * e)
            .collect();
        Tensor::new(mu.shape().to_vec(), data)?
    };
    decode_mean(bundle, &z)
}

/// Latents `(1−α_i)·a + α_i·b` with `α_i = i/(steps−1)`, one row per step.
pub fn interpolate_latents<T: Scalar>(a: &[T], b: &[T], steps: usize) -> Result<Tensor<T>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape("interpolate", &[a.len()], &[b.len()]));
    }
    let mut data = Vec::with_capacity(steps * a.len());
    for i in 0..steps {
        let alpha = T::of(i as f64 / (steps - 1) as f64);
        data.extend(a.iter().zip(b).map(|(&a, &b)| (T::one() - alpha) * a + alpha * b));
    }
    Tensor::new(vec![steps, a.len()], data)
}

/// Decoded frames between the posterior means of `x_a` and `x_b`
/// (each `[1, C, H, W]`), returned as `[steps, C, H, W]`.
pub fn interpolate<T: Scalar>(bundle: &ModelBundle<T>, x_a: &Tensor<T>, x_b: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let (ma, _) = posterior(bundle, x_a)?;
    let (mb, _) = posterior(bundle, x_b)?;
    if ma.batch() != 1 || mb.batch() != 1 {
        return Err(Error::invalid("interpolate takes one example per endpoint"));
    }
    let z = interpolate_latents(ma.data(), mb.data(), steps)?;
    decode_mean(bundle, &z)
}

/// How well reconstructions preserve what a frozen classifier sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionMetrics {
    /// Mean over examples of `‖d_l(x) − d_l(x̂)‖²`, one entry per classifier layer.
    pub feature_distance: Vec<f64>,
    /// Fraction of label bits predicted identically on `x` and `x̂`.
    pub bit_agreement: f64,
    /// Fraction of examples with every bit predicted identically.
    pub example_agreement: f64,
    pub pixel_mse: f64,
}

impl ReconstructionMetrics {
    pub fn tsv(&self) -> String {
        let mut s = String::from("# metric\tvalue\n");
        for (l, d) in self.feature_distance.iter().enumerate() {
            s.push_str(&format!("feature_distance_{l}\t{d:.8}\n"));
        }
        s.push_str(&format!("bit_agreement\t{:.8}\n", self.bit_agreement));
        s.push_str(&format!("example_agreement\t{:.8}\n", self.example_agreement));
        s.push_str(&format!("pixel_mse\t{:.8}\n", self.pixel_mse));
        s
    }
}

/// Compares classifier features and predictions on `x` and `x_hat` under
/// running statistics.
pub fn reconstruction_metrics<T: Scalar>(bundle: &ModelBundle<T>, x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<ReconstructionMetrics> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("reconstruction_metrics", x.shape(), x_hat.shape()));
    }
    let n = x.batch();
    let layers = bundle.arch.classifier_layers();
    let mut dist = vec![0.0; layers];
    let (mut bits, mut same_bits, mut same_examples) = (0usize, 0usize, 0usize);
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let mut g = Graph::new();
        let a = g.input(x.select_rows(&idx));
        let b = g.input(x_hat.select_rows(&idx));
        let fa = bundle.classify(&mut g, a, Mode::Eval)?;
        let fb = bundle.classify(&mut g, b, Mode::Eval)?;
        for (l, (&va, &vb)) in fa.features.iter().zip(&fb.features).enumerate() {
            dist[l] += g
                .value(va)
                .data()
                .iter()
                .zip(g.value(vb).data())
                .map(|(p, q)| (p.f64() - q.f64()).powi(2))
                .sum::<f64>();
        }
        let (la, lb) = (g.value(fa.logits.expect("logits")), g.value(fb.logits.expect("logits")));
        for i in 0..idx.len() {
            let eq = la.row(i).iter().zip(lb.row(i)).filter(|(p, q)| (p.f64() > 0.0) == (q.f64() > 0.0)).count();
            bits += la.row_len();
            same_bits += eq;
            same_examples += (eq == la.row_len()) as usize;
        }
    }
    let pixel_mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    Ok(ReconstructionMetrics {
        feature_distance: dist.iter().map(|d| d / n as f64).collect(),
        bit_agreement: same_bits as f64 / bits as f64,
        example_agreement: same_examples as f64 / n as f64,
        pixel_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn per_unit_recomposes() {
        let r = NllReport::from_estimates(vec![-10.0, -14.0, -12.0], 5, 4);
        assert_eq!(r.per_unit * 4.0, r.mean());
        assert!((r.se - (4.0f64 / 3.0).sqrt() / 4.0).abs() < 1e-15);
        assert_eq!(r.line("test"), "test\t5\t-3.000000\t0.288675\t3");
    }

    #[test]
    fn latent_path_endpoints_and_midpoint() {
        let a = [1.5f64, -2.0, 0.25];
        let b = [-0.5f64, 4.0, 0.75];
        let z = interpolate_latents(&a, &b, 3).unwrap();
        assert_eq!(z.row(0), &a);
        assert_eq!(z.row(2), &b);
        assert_eq!(z.row(1), &[0.5, 1.0, 0.5]);
        assert!(interpolate_latents(&a, &b, 1).is_err());
    }
}
