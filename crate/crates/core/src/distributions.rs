//! Diagonal Gaussians, the reparametrization trick, and the seeded random stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Bounds applied to every log-variance a model produces.
pub const LOG_VAR_MIN: f64 = -7.0;
pub const LOG_VAR_MAX: f64 = 2.0;

/// Seeded deterministic random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` derived from `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Splits off a child stream, advancing this one.
    pub fn fork(&mut self) -> Self {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// I.i.d. standard normal draws of the given shape.
pub fn sample_standard_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Multivariate normal with diagonal covariance, parameterized by log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Tensor<f64>,
    log_var: Tensor<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor<f64>, log_var: Tensor<f64>) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::shape("diagonal_gaussian", mean.shape(), log_var.shape()));
        }
        Ok(DiagonalGaussian { mean, log_var })
    }

    /// Like [`new`](Self::new) but clamps log-variances to
    /// `[LOG_VAR_MIN, LOG_VAR_MAX]`, as model heads do.
    pub fn clamped(mean: Tensor<f64>, log_var: Tensor<f64>) -> Result<Self> {
        let log_var = log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        Self::new(mean, log_var)
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagonalGaussian {
            mean: Tensor::zeros(shape.to_vec()),
            log_var: Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn mean(&self) -> &Tensor<f64> {
        &self.mean
    }

    pub fn log_var(&self) -> &Tensor<f64> {
        &self.log_var
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    /// `mean + exp(log_var / 2) * eps`.
    pub fn reparameterize(&self, eps: &Tensor<f64>) -> Result<Tensor<f64>> {
        if eps.shape() != self.mean.shape() {
            return Err(Error::shape("reparameterize", self.mean.shape(), eps.shape()));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        Tensor::new(self.mean.shape().to_vec(), data)
    }

    pub fn sample(&self, rng: &mut Rng) -> Tensor<f64> {
        let eps = sample_standard_normal(rng, self.mean.shape());
        self.reparameterize(&eps).expect("same shape")
    }

    /// `KL(self || N(0, I))`, summed over dimensions.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum()
    }

    pub fn log_density(&self, x: &Tensor<f64>) -> Result<f64> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape("log_density", self.mean.shape(), x.shape()));
        }
        Ok(log_density_slices(self.mean.data(), self.log_var.data(), x.data()))
    }
}

/// Diagonal Gaussian log-density over matching slices.
pub fn log_density_slices(mean: &[f64], log_var: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .zip(x)
        .map(|((&m, &lv), &xv)| -HALF_LN_2PI - 0.5 * lv - 0.5 * (xv - m).powi(2) * (-lv).exp())
        .sum()
}

/// Standard normal log-density of a slice.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    z.iter().map(|&v| -HALF_LN_2PI - 0.5 * v * v).sum()
}

/// A diagonal Gaussian whose parameters live in a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    pub fn new<T: Scalar>(g: &Graph<T>, mean: Var, log_var: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(log_var) {
            return Err(Error::shape("diagonal_gaussian", g.shape(mean), g.shape(log_var)));
        }
        Ok(GaussianVar { mean, log_var })
    }

    /// Value-level copy of the distribution.
    pub fn to_distribution<T: Scalar>(&self, g: &Graph<T>) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: g.value(self.mean).cast(),
            log_var: g.value(self.log_var).cast(),
        }
    }
}

/// `z = mean + exp(log_var / 2) ⊙ eps`; gradients reach mean and log_var,
/// `eps` is a constant.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, q: &GaussianVar, eps: &Tensor<T>) -> Result<Var> {
    if eps.shape() != g.shape(q.mean) {
        return Err(Error::shape("reparameterize", g.shape(q.mean), eps.shape()));
    }
    let eps = g.input(eps.clone());
    let half = g.mul_scalar(q.log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(q.mean, noise)
}

/// `KL(q || N(0, I))` summed over every element of `q`.
pub fn kl_to_standard_normal<T: Scalar>(g: &mut Graph<T>, q: &GaussianVar) -> Result<Var> {
    let m2 = g.square(q.mean);
    let var = g.exp(q.log_var);
    let a = g.add(m2, var)?;
    let b = g.sub(a, q.log_var)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.mul_scalar(s, 0.5))
}

/// Elementwise Gaussian log-density terms `-½ln2π - ½lv - (x-μ)²/(2e^lv)`, same shape as `x`.
pub fn log_density_terms<T: Scalar>(g: &mut Graph<T>, p: &GaussianVar, x: Var) -> Result<Var> {
    if g.shape(x) != g.shape(p.mean) {
        return Err(Error::shape("log_density", g.shape(p.mean), g.shape(x)));
    }
    let diff = g.sub(x, p.mean)?;
    let sq = g.square(diff);
    let neg_lv = g.mul_scalar(p.log_var, -1.0);
    let prec = g.exp(neg_lv);
    let quad = g.mul(sq, prec)?;
    let a = g.add(quad, p.log_var)?;
    let b = g.mul_scalar(a, -0.5);
    Ok(g.add_scalar(b, -HALF_LN_2PI))
}

/// Log-density summed over every element.
pub fn log_density<T: Scalar>(g: &mut Graph<T>, p: &GaussianVar, x: Var) -> Result<Var> {
    let terms = log_density_terms(g, p, x)?;
    Ok(g.sum(terms))
}

/// Log-density of `x` under a unit-variance Gaussian centred at `mean`, summed.
pub fn unit_variance_log_density<T: Scalar>(g: &mut Graph<T>, mean: Var, x: Var) -> Result<Var> {
    if g.shape(x) != g.shape(mean) {
        return Err(Error::shape("log_density", g.shape(mean), g.shape(x)));
    }
    let n = g.value(x).numel() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    let h = g.mul_scalar(s, -0.5);
    Ok(g.add_scalar(h, -HALF_LN_2PI * n))
}
