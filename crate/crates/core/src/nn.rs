//! Layer building blocks over [`Graph`] and [`ParamStore`].

use crate::distributions::Rng;
use crate::error::Result;
use crate::graph::{BatchNormStats, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Whether batch norm uses batch statistics (and updates running ones) or
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn normal_init<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(INIT_STD * rng.normal())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Strided convolution, or its transpose, with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        // Transposed kernels are stored [in, out, k, k] so the same tensor
        // would serve the adjoint forward convolution.
        let shape = if transposed {
            [in_channels, out_channels, kernel, kernel]
        } else {
            [out_channels, in_channels, kernel, kernel]
        };
        let weight = store.add_weight(&format!("{name}.weight"), normal_init(&shape, rng));
        let bias = bias.then(|| store.add_weight(&format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            transposed,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = if self.transposed {
            g.conv2d_transpose(x, w, self.stride, self.pad)?
        } else {
            g.conv2d(x, w, self.stride, self.pad)?
        };
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.bias_add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let weight = store.add_weight(&format!("{name}.weight"), normal_init(&[inputs, outputs], rng));
        let bias = store.add_weight(&format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Dense {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.bias_add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_weight(&format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add_weight(&format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(vec![channels])),
        }
    }

    /// In [`Mode::Train`] the new running statistics
    /// (`momentum * old + (1 - momentum) * batch`) are recorded on the graph.
    /// The momentum is [`BN_MOMENTUM`] unless the graph overrides it.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Eval => {
                let stats = BatchNormStats::Running {
                    mean: store.value(self.running_mean),
                    var: store.value(self.running_var),
                };
                Ok(g.batch_norm(x, gamma, beta, stats, BN_EPS)?.0)
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormStats::Batch, BN_EPS)?;
                let (mean, var) = stats.expect("batch statistics");
                let m = T::of(g.stat_momentum().unwrap_or(BN_MOMENTUM));
                let blend = |old: &Tensor<T>, new: &[T]| {
                    let data = old.data().iter().zip(new).map(|(&o, &n)| m * o + (T::one() - m) * n).collect();
                    Tensor::new(old.shape().to_vec(), data).expect("stat shape")
                };
                let rm = blend(store.value(self.running_mean), &mean);
                let rv = blend(store.value(self.running_var), &var);
                g.record_buffer_update(store, self.running_mean, rm);
                g.record_buffer_update(store, self.running_var, rv);
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64(vec![4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        store.apply_buffer_updates(&g);
        let rm = store.value(bn.running_mean).data()[0];
        let rv = store.value(bn.running_var).data()[0];
        assert!((rm - 0.1 * 2.5).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn cumulative_momentum_averages_batch_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let batches = [[1.0, 3.0], [2.0, 6.0], [0.0, 4.0]];
        for (i, b) in batches.iter().enumerate() {
            let mut g = Graph::new();
            g.set_stat_momentum(Some(i as f64 / (i + 1) as f64));
            let x = g.input(Tensor::from_f64(vec![2, 1], b).unwrap());
            bn.forward(&mut g, &store, x, Mode::Train).unwrap();
            store.apply_buffer_updates(&g);
        }
        // batch means 2, 4, 2; unbiased variances 2, 8, 8
        assert!((store.value(bn.running_mean).data()[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let conv = Conv2d::new(&mut store, "up", 4, 2, 4, 2, 1, true, true, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(vec![3, 4, 5, 5]));
        let y = conv.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 10, 10]);
    }
}
