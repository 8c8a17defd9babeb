//! Central finite-difference verification of analytic gradients.

use crate::distributions::{self, GaussianVar, Rng};
use crate::error::Result;
use crate::graph::{BatchNormStats, BinaryOp, Graph, UnaryOp, Var};
use crate::model::{ArchConfig, ModelBundle};
use crate::nn::Mode;
use crate::objective::{self, ObjectiveConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::classifier_loss;

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name, flat index, analytic and numeric derivative of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(p+h) - f(p-h)) / 2h` on a random subsample of at least `samples`
/// trainable coordinates (all of them when there are fewer).
///
/// `f` must not depend on state it mutates; buffer updates recorded in the
/// graph are ignored.
pub fn gradient_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_core(
        store,
        |s| s,
        |s| {
            let mut g = Graph::new();
            let root = f(&mut g, s)?;
            Ok((g, root))
        },
        h,
        samples,
        rng,
    )
}

/// [`gradient_check`] over a whole model, for losses built by library
/// functions that create their own graph.
pub fn gradient_check_bundle<F>(
    bundle: &mut ModelBundle<f64>,
    f: F,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelBundle<f64>) -> Result<(Graph<f64>, Var)>,
{
    check_core(bundle, |b| &mut b.store, f, h, samples, rng)
}

fn check_core<S, F>(
    owner: &mut S,
    store: fn(&mut S) -> &mut ParamStore<f64>,
    mut f: F,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&S) -> Result<(Graph<f64>, Var)>,
{
    store(owner).zero_grad();
    let (g, root) = f(owner)?;
    let grads = g.backward(root)?;
    store(owner).accumulate_grads(&g, &grads);

    let coords: Vec<(ParamId, usize)> = store(owner)
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |j| (id, j)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= samples {
        coords
    } else {
        rng.permutation(coords.len())[..samples]
            .iter()
            .map(|&i| coords[i])
            .collect()
    };

    let mut eval = |owner: &S| -> Result<f64> {
        let (g, root) = f(owner)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: chosen.len(),
        worst: None,
    };
    for (id, j) in chosen {
        let analytic = store(owner).get(id).grad.data()[j];
        let orig = store(owner).get(id).value.data()[j];
        store(owner).get_mut(id).value.data_mut()[j] = orig + h;
        let plus = eval(owner)?;
        store(owner).get_mut(id).value.data_mut()[j] = orig - h;
        let minus = eval(owner)?;
        store(owner).get_mut(id).value.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store(owner).get(id).name.clone(), j, analytic, numeric));
        }
    }
    store(owner).zero_grad();
    Ok(report)
}

/// Finite-difference step used by the suites.
pub const SUITE_STEP: f64 = 1e-6;

/// Worst relative error of one operation over its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{:.3e}", self.op, self.instances, self.max_rel_error)
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape")
}

/// Moves every value at least `margin` away from each point in `kinks`.
fn avoid(mut t: Tensor<f64>, kinks: &[f64], margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = k + if *v >= k { margin } else { -margin };
            }
        }
    }
    t
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.input(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// One random instance of `op`: the parameter store and the scalar function.
fn instance(op: &str, rng: &mut Rng) -> (ParamStore<f64>, Builder) {
    let mut s = ParamStore::new();
    let shape2 = |rng: &mut Rng| vec![dim(rng, 1, 4), dim(rng, 1, 5)];
    let shape4 = |rng: &mut Rng, n_lo: usize| vec![dim(rng, n_lo, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    let f: Builder = match op {
        "exp" | "log" | "tanh" | "sigmoid" | "relu" | "leaky_relu" | "square" => {
            let sh = shape2(rng);
            let x = match op {
                "log" => rand_tensor(rng, &sh, 0.2, 3.0),
                "relu" | "leaky_relu" => avoid(rand_tensor(rng, &sh, -2.0, 2.0), &[0.0], 1e-3),
                _ => rand_tensor(rng, &sh, -2.0, 2.0),
            };
            let u = match op {
                "exp" => UnaryOp::Exp,
                "log" => UnaryOp::Log,
                "tanh" => UnaryOp::Tanh,
                "sigmoid" => UnaryOp::Sigmoid,
                "relu" => UnaryOp::Relu,
                "leaky_relu" => UnaryOp::LeakyRelu,
                _ => UnaryOp::Square,
            };
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            let x = s.add_weight("x", x);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = g.unary(u, x);
                project(g, y, &r)
            })
        }
        "add" | "sub" | "mul" | "div" | "broadcast" => {
            let sh = shape2(rng);
            let a = s.add_weight("a", rand_tensor(rng, &sh, -2.0, 2.0));
            let bshape = if op == "broadcast" { vec![] } else { sh.clone() };
            let b = if op == "div" {
                avoid(rand_tensor(rng, &bshape, -2.0, 2.0), &[0.0], 0.5)
            } else {
                rand_tensor(rng, &bshape, -2.0, 2.0)
            };
            let b = s.add_weight("b", b);
            let bop = match op {
                "add" => BinaryOp::Add,
                "sub" => BinaryOp::Sub,
                "div" => BinaryOp::Div,
                _ => BinaryOp::Mul,
            };
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            Box::new(move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.binary(bop, a, b)?;
                project(g, y, &r)
            })
        }
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let a = s.add_weight("a", rand_tensor(rng, &[m, k], -1.0, 1.0));
            let b = s.add_weight("b", rand_tensor(rng, &[k, n], -1.0, 1.0));
            let r = rand_tensor(rng, &[m, n], -1.0, 1.0);
            Box::new(move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.matmul(a, b)?;
                project(g, y, &r)
            })
        }
        "conv2d" | "conv2d_transpose" => {
            let transpose = op == "conv2d_transpose";
            let (n, c, f) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let pad = rng.below(k.min(2));
            let (h, w) = (dim(rng, k.max(2), 5), dim(rng, k.max(2), 5));
            let x = s.add_weight("x", rand_tensor(rng, &[n, c, h, w], -1.0, 1.0));
            let kshape = if transpose { [c, f, k, k] } else { [f, c, k, k] };
            let kern = s.add_weight("k", rand_tensor(rng, &kshape, -1.0, 1.0));
            let mut g0 = Graph::new();
            let (xv, kv) = (g0.param(&s, x), g0.param(&s, kern));
            let out = if transpose {
                g0.conv2d_transpose(xv, kv, stride, pad)
            } else {
                g0.conv2d(xv, kv, stride, pad)
            }
            .expect("valid geometry");
            let r = rand_tensor(rng, g0.shape(out), -1.0, 1.0);
            Box::new(move |g, s| {
                let (xv, kv) = (g.param(s, x), g.param(s, kern));
                let y = if transpose {
                    g.conv2d_transpose(xv, kv, stride, pad)?
                } else {
                    g.conv2d(xv, kv, stride, pad)?
                };
                project(g, y, &r)
            })
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let train = op == "batch_norm_train";
            let mut sh = shape4(rng, 2);
            // Two values per channel normalize to +-1 whatever x is, leaving
            // a gradient that is pure rounding noise.
            while train && sh[0] * sh[2] * sh[3] < 4 {
                sh[2] += 1;
            }
            let c = sh[1];
            let x = s.add_weight("x", rand_tensor(rng, &sh, -2.0, 2.0));
            let gamma = s.add_weight("gamma", rand_tensor(rng, &[c], 0.5, 1.5));
            let beta = s.add_weight("beta", rand_tensor(rng, &[c], -0.5, 0.5));
            let mean = rand_tensor(rng, &[c], -0.5, 0.5);
            let var = rand_tensor(rng, &[c], 0.5, 2.0);
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            Box::new(move |g, s| {
                let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
                let stats = if train {
                    BatchNormStats::Batch
                } else {
                    BatchNormStats::Running { mean: &mean, var: &var }
                };
                let (y, _) = g.batch_norm(xv, gv, bv, stats, 1e-5)?;
                project(g, y, &r)
            })
        }
        "bias_add" => {
            let sh = shape4(rng, 1);
            let x = s.add_weight("x", rand_tensor(rng, &sh, -1.0, 1.0));
            let b = s.add_weight("b", rand_tensor(rng, &[sh[1]], -1.0, 1.0));
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            Box::new(move |g, s| {
                let (xv, bv) = (g.param(s, x), g.param(s, b));
                let y = g.bias_add(xv, bv)?;
                project(g, y, &r)
            })
        }
        "reshape" | "sum_rows" | "repeat_rows" | "sum" | "mean" | "clamp" => {
            let sh = shape4(rng, 1);
            let xt = if op == "clamp" {
                avoid(rand_tensor(rng, &sh, -2.0, 2.0), &[-1.0, 1.0], 1e-3)
            } else {
                rand_tensor(rng, &sh, -2.0, 2.0)
            };
            let x = s.add_weight("x", xt);
            let reps = dim(rng, 1, 3);
            let op = op.to_string();
            let out_shape = match op.as_str() {
                "reshape" => vec![sh[0], sh[1..].iter().product()],
                "sum_rows" => vec![sh[0]],
                "repeat_rows" => [vec![reps], sh.clone()].concat(),
                "sum" | "mean" => vec![],
                _ => sh.clone(),
            };
            let r = rand_tensor(rng, &out_shape, -1.0, 1.0);
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let y = match op.as_str() {
                    "reshape" => g.flatten(xv)?,
                    "sum_rows" => g.sum_rows(xv),
                    "repeat_rows" => g.repeat_rows(xv, reps),
                    "sum" => g.sum(xv),
                    "mean" => g.mean(xv),
                    _ => g.clamp(xv, -1.0, 1.0),
                };
                project(g, y, &r)
            })
        }
        "bce_with_logits" => {
            let sh = shape2(rng);
            let z = s.add_weight("z", rand_tensor(rng, &sh, -4.0, 4.0));
            let t = rand_tensor(rng, &sh, 0.0, 1.0);
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            Box::new(move |g, s| {
                let zv = g.param(s, z);
                let tv = g.input(t.clone());
                let y = g.bce_with_logits(zv, tv)?;
                project(g, y, &r)
            })
        }
        "reparameterize" | "kl_to_standard_normal" | "log_density" => {
            let sh = shape2(rng);
            let m = s.add_weight("mean", rand_tensor(rng, &sh, -2.0, 2.0));
            let lv = s.add_weight("log_var", rand_tensor(rng, &sh, -2.0, 1.5));
            let x = s.add_weight("x", rand_tensor(rng, &sh, -2.0, 2.0));
            let eps = rand_tensor(rng, &sh, -2.0, 2.0);
            let r = rand_tensor(rng, &sh, -1.0, 1.0);
            let op = op.to_string();
            Box::new(move |g, s| {
                let (mv, lvv) = (g.param(s, m), g.param(s, lv));
                let q = GaussianVar::new(g, mv, lvv)?;
                match op.as_str() {
                    "reparameterize" => {
                        let z = distributions::reparameterize(g, &q, &eps)?;
                        project(g, z, &r)
                    }
                    "kl_to_standard_normal" => distributions::kl_to_standard_normal(g, &q),
                    _ => {
                        let xv = g.param(s, x);
                        distributions::log_density(g, &q, xv)
                    }
                }
            })
        }
        other => panic!("no gradient-check instance for {other}"),
    };
    (s, f)
}

/// Differentiable operations covered by [`op_suite`]. `stop_gradient` is
/// left out on purpose: finite differences see through it.
pub const SUITE_OPS: &[&str] = &[
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "square",
    "add",
    "sub",
    "mul",
    "div",
    "broadcast",
    "matmul",
    "conv2d",
    "conv2d_transpose",
    "batch_norm_train",
    "batch_norm_eval",
    "bias_add",
    "reshape",
    "sum",
    "mean",
    "sum_rows",
    "repeat_rows",
    "clamp",
    "bce_with_logits",
    "reparameterize",
    "kl_to_standard_normal",
    "log_density",
];

/// Checks every coordinate of `instances` random instances of each op in
/// 64-bit arithmetic.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for (i, op) in SUITE_OPS.iter().enumerate() {
        let mut rng = Rng::stream(seed, i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (mut store, f) = instance(op, &mut rng);
            let r = gradient_check(&mut store, |g, s| f(g, s), SUITE_STEP, usize::MAX, &mut rng)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(OpCheck {
            op: op.to_string(),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// Small architecture used for whole-model checks.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image: [1, 8, 8],
        latent_dim: 3,
        base_filters: 2,
        stages: 2,
        num_labels: 3,
        classifier_hidden: 4,
        kernel: 4,
        feature_layers: Vec::new(),
    }
}

/// Whole-model checks: the ELBO, the regularized objective and the
/// classifier loss, on a tiny network in 64-bit arithmetic, `samples` random
/// coordinates each. The encoder gradient stop is not covered because finite
/// differences see through it.
pub fn composite_suite(samples: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = Rng::stream(seed, 1000);
    let arch = tiny_arch();
    let layers = arch.regularized_layers().len();
    let x = rand_tensor(&mut rng, &[3, 1, 8, 8], -1.0, 1.0);
    let labels = Tensor::new(vec![3, 3], (0..9).map(|_| rng.coin() as u8 as f64).collect())?;
    let lambda: Vec<f64> = (0..layers).map(|l| 0.5 + l as f64).collect();
    let cases = [
        ("vae_elbo", Vec::new()),
        ("vae_discriminative", lambda),
    ];
    let mut out = Vec::new();
    for (name, lambda) in cases {
        let mut bundle = ModelBundle::<f64>::init(&arch, &mut Rng::stream(seed, 1001))?;
        bundle.vae_only();
        let cfg = ObjectiveConfig {
            lambda,
            stop_encoder_grad: false,
            mc_samples: 2,
            logit_weight: 0.0,
        };
        let report = gradient_check_bundle(
            &mut bundle,
            |b| {
                let o = objective::build(b, &x, &mut Rng::new(seed), &cfg, Mode::Train)?;
                Ok((o.graph, o.loss))
            },
            SUITE_STEP,
            samples,
            &mut rng,
        )?;
        out.push(OpCheck {
            op: name.to_string(),
            instances: report.coordinates,
            max_rel_error: report.max_rel_error,
        });
    }
    let mut bundle = ModelBundle::<f64>::init(&arch, &mut Rng::stream(seed, 1002))?;
    bundle.classifier_only();
    let report = gradient_check_bundle(
        &mut bundle,
        |b| classifier_loss(b, &x, &labels, Mode::Train),
        SUITE_STEP,
        samples,
        &mut rng,
    )?;
    out.push(OpCheck {
        op: "classifier_loss".into(),
        instances: report.coordinates,
        max_rel_error: report.max_rel_error,
    });
    Ok(out)
}
