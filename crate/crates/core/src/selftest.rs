//! Built-in numerical self-checks: finite-difference gradient checks for every
//! autodiff primitive and the full networks, and brute-force oracles for the
//! SSL and feature equations.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{autoencoder_forward, ArchConfig, BackboneParams, DecoderParams, Mode};
use crate::rng::{self, Stream};
use crate::signal::Protocol;
use crate::signal::{de_from_variance, sample_variance};
use crate::ssl::{
    adamatch_rectify, confidence_mask, mixup_with_lambda, relative_threshold, sharpen,
    warmup_weight, Method, SslMethodConfig,
};
use crate::tensor::{finite_difference_check, Graph, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_INSTANCES: usize = 20;
pub const ORACLE_INSTANCES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst error observed (or the computed value for worked examples).
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
    /// Error raised while running the check, if any.
    pub error: Option<String>,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} worst={:.3e} tol={:.0e} n={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )?;
        match &self.error {
            Some(e) => write!(f, " error: {e}"),
            None => Ok(()),
        }
    }
}

fn check(name: &str, worst: f64, tolerance: f64, instances: usize) -> Check {
    Check {
        name: name.to_string(),
        passed: worst < tolerance,
        worst,
        tolerance,
        instances,
        error: None,
    }
}

fn failed(name: &str, err: crate::Error) -> Check {
    Check {
        name: name.to_string(),
        passed: false,
        worst: f64::NAN,
        tolerance: 0.0,
        instances: 0,
        error: Some(err.to_string()),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Normal draws pushed at least 0.1 away from zero, for kinked functions.
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn rand_prob_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize, floor: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let r: Vec<f64> = (0..k).map(|_| floor + rng.random::<f64>()).collect();
        let s: f64 = r.iter().sum();
        data.extend(r.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, k], data).expect("shape matches length")
}

/// Max FD error of `Σ f(x) ⊙ w` for a fixed random weighting `w`.
fn weighted_fd(
    rng: &mut ChaCha8Rng,
    x: &Tensor,
    f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = f(&mut g, v)?;
        g.shape(y).to_vec()
    };
    let w = randn(rng, &shape);
    finite_difference_check(
        |g, xv| {
            let y = f(g, xv)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        x,
        FD_STEP,
    )
}

type GradCase = fn(&mut ChaCha8Rng) -> Result<f64>;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn grad_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("add", |r| {
            let s = dims(r);
            let (x, c) = (randn(r, &[s.0, s.1]), randn(r, &[s.0, s.1]));
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                g.add(x, c)
            })
        }),
        ("sub", |r| {
            let s = dims(r);
            let (x, c) = (randn(r, &[s.0, s.1]), randn(r, &[s.0, s.1]));
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                g.sub(c, x)
            })
        }),
        ("mul", |r| {
            let s = dims(r);
            let (x, c) = (randn(r, &[s.0, s.1]), randn(r, &[s.0, s.1]));
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                let a = g.mul(x, c)?;
                g.mul(a, x)
            })
        }),
        ("scale", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            let c: f64 = StandardNormal.sample(r);
            weighted_fd(r, &x, &|g, x| Ok(g.scale(x, c)))
        }),
        ("matmul_left", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..5);
            let (x, b) = (randn(r, &[m, k]), randn(r, &[k, n]));
            weighted_fd(r, &x, &|g, x| {
                let b = g.constant(b.clone());
                g.matmul(x, b)
            })
        }),
        ("matmul_right", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..5);
            let (a, x) = (randn(r, &[m, k]), randn(r, &[k, n]));
            weighted_fd(r, &x, &|g, x| {
                let a = g.constant(a.clone());
                g.matmul(a, x)
            })
        }),
        ("transpose", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            weighted_fd(r, &x, &|g, x| g.transpose(x))
        }),
        ("reshape", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1, 2]);
            weighted_fd(r, &x, &|g, x| g.reshape(x, &[s.0, s.1 * 2]))
        }),
        ("conv1d_input", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (x, w, bias) = (
                randn(r, &[b, cin, len]),
                randn(r, &[cout, cin, k]),
                randn(r, &[cout]),
            );
            weighted_fd(r, &x, &|g, x| {
                let (w, bias) = (g.constant(w.clone()), g.constant(bias.clone()));
                g.conv1d(x, w, Some(bias), pad)
            })
        }),
        ("conv1d_kernel", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (xin, w) = (randn(r, &[b, cin, len]), randn(r, &[cout, cin, k]));
            weighted_fd(r, &w, &|g, w| {
                let x = g.constant(xin.clone());
                g.conv1d(x, w, None, pad)
            })
        }),
        ("conv1d_bias", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (xin, w, bias) = (
                randn(r, &[b, cin, len]),
                randn(r, &[cout, cin, k]),
                randn(r, &[cout]),
            );
            weighted_fd(r, &bias, &|g, bias| {
                let (x, w) = (g.constant(xin.clone()), g.constant(w.clone()));
                g.conv1d(x, w, Some(bias), pad)
            })
        }),
        ("conv_transpose1d_input", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (x, w, bias) = (
                randn(r, &[b, cin, len]),
                randn(r, &[cin, cout, k]),
                randn(r, &[cout]),
            );
            weighted_fd(r, &x, &|g, x| {
                let (w, bias) = (g.constant(w.clone()), g.constant(bias.clone()));
                g.conv_transpose1d(x, w, Some(bias), pad)
            })
        }),
        ("conv_transpose1d_kernel", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (xin, w) = (randn(r, &[b, cin, len]), randn(r, &[cin, cout, k]));
            weighted_fd(r, &w, &|g, w| {
                let x = g.constant(xin.clone());
                g.conv_transpose1d(x, w, None, pad)
            })
        }),
        ("conv_transpose1d_bias", |r| {
            let (b, cin, cout, len, k, pad) = conv_dims(r);
            let (xin, w, bias) = (
                randn(r, &[b, cin, len]),
                randn(r, &[cin, cout, k]),
                randn(r, &[cout]),
            );
            weighted_fd(r, &bias, &|g, bias| {
                let (x, w) = (g.constant(xin.clone()), g.constant(w.clone()));
                g.conv_transpose1d(x, w, Some(bias), pad)
            })
        }),
        ("batch_norm_train_input", |r| {
            let (x, gamma, beta) = bn_inputs(r);
            weighted_fd(r, &x, &|g, x| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                Ok(g.batch_norm1d_train(x, ga, be, 1e-5)?.0)
            })
        }),
        ("batch_norm_train_affine", |r| {
            let (xin, gamma, beta) = bn_inputs(r);
            let c = gamma.len();
            let mut both = gamma.into_data();
            both.extend(beta.into_data());
            let both = Tensor::new(vec![2 * c], both)?;
            weighted_fd(r, &both, &|g, p| {
                let ga = g.slice(p, 0, 0, c)?;
                let be = g.slice(p, 0, c, 2 * c)?;
                let x = g.constant(xin.clone());
                Ok(g.batch_norm1d_train(x, ga, be, 1e-5)?.0)
            })
        }),
        ("batch_norm_eval", |r| {
            let (x, gamma, beta) = bn_inputs(r);
            let c = gamma.len();
            let mean: Vec<f64> = (0..c).map(|_| StandardNormal.sample(r)).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.5 + r.random::<f64>()).collect();
            weighted_fd(r, &x, &|g, x| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                g.batch_norm1d_eval(x, ga, be, &mean, &var, 1e-5)
            })
        }),
        ("leaky_relu", |r| {
            let s = dims(r);
            let x = randn_off_zero(r, &[s.0, s.1]);
            weighted_fd(r, &x, &|g, x| Ok(g.leaky_relu(x, 0.01)))
        }),
        ("relu", |r| {
            let s = dims(r);
            let x = randn_off_zero(r, &[s.0, s.1]);
            weighted_fd(r, &x, &|g, x| Ok(g.relu(x)))
        }),
        ("dropout", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            let seed: u64 = r.random();
            weighted_fd(r, &x, &|g, x| {
                g.dropout(x, 0.5, true, &mut rng::stream(seed, Stream::Dropout))
            })
        }),
        ("softmax", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1 + 1]);
            weighted_fd(r, &x, &|g, x| Ok(g.softmax(x)))
        }),
        ("log_softmax", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1 + 1]);
            weighted_fd(r, &x, &|g, x| Ok(g.log_softmax(x)))
        }),
        ("cross_entropy", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1 + 1]);
            let t = rand_prob_rows(r, s.0, s.1 + 1, 0.0);
            weighted_fd(r, &x, &|g, x| {
                let t = g.constant(t.clone());
                g.cross_entropy(x, t)
            })
        }),
        ("cross_entropy_rows", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1 + 1]);
            let t = rand_prob_rows(r, s.0, s.1 + 1, 0.0);
            weighted_fd(r, &x, &|g, x| {
                let t = g.constant(t.clone());
                g.cross_entropy_rows(x, t)
            })
        }),
        ("mse", |r| {
            let s = dims(r);
            let (x, c) = (randn(r, &[s.0, s.1]), randn(r, &[s.0, s.1]));
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                g.mse(x, c)
            })
        }),
        ("mean", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            weighted_fd(r, &x, &|g, x| Ok(g.mean(x)))
        }),
        ("sum", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            weighted_fd(r, &x, &|g, x| Ok(g.sum(x)))
        }),
        ("maximum", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            // Offset every entry by ±0.5 so no pair ties.
            let c = x.map(|v| v + if v.to_bits() % 2 == 0 { 0.5 } else { -0.5 });
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                g.maximum(x, c)
            })
        }),
        ("concat", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0, s.1]);
            let c = randn(r, &[s.0, 2]);
            let axis = r.random_range(0..2);
            let c = if axis == 0 { randn(r, &[2, s.1]) } else { c };
            weighted_fd(r, &x, &|g, x| {
                let c = g.constant(c.clone());
                let sq = g.mul(x, x)?;
                g.concat(&[x, c, sq], axis)
            })
        }),
        ("slice", |r| {
            let s = dims(r);
            let x = randn(r, &[s.0 + 1, s.1 + 1]);
            let axis = r.random_range(0..2);
            let n = x.shape()[axis];
            let start = r.random_range(0..n);
            let end = r.random_range(start + 1..=n);
            weighted_fd(r, &x, &|g, x| g.slice(x, axis, start, end))
        }),
        ("backbone_input", backbone_input_case),
        ("backbone_parameters", backbone_param_case),
        ("autoencoder_input", autoencoder_case),
    ]
}

fn conv_dims(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize) {
    let k = r.random_range(1..4);
    let pad = r.random_range(0..k);
    (
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(k..k + 5),
        k,
        pad,
    )
}

fn bn_inputs(r: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let (b, c, len) = (
        r.random_range(2..4),
        r.random_range(1..4),
        r.random_range(2..5),
    );
    let gamma = randn(r, &[c]).map(|v| 1.0 + 0.3 * v);
    (randn(r, &[b, c, len]), gamma, randn(r, &[c]))
}

fn small_arch(r: &mut ChaCha8Rng) -> ArchConfig {
    let mut arch = ArchConfig::new(
        r.random_range(1..4),
        r.random_range(5..9),
        r.random_range(2..4),
    );
    arch.conv1_channels = 4;
    arch.conv2_channels = 5;
    arch.hidden = 6;
    arch
}

fn backbone_input_case(r: &mut ChaCha8Rng) -> Result<f64> {
    let arch = small_arch(r);
    let params = BackboneParams::init(arch.clone(), r.random())?;
    let b = r.random_range(2..5);
    let x = randn(r, &[b, arch.in_channels, arch.spatial_len]);
    let y = Tensor::one_hot(
        &(0..b).map(|i| i % arch.num_classes).collect::<Vec<_>>(),
        arch.num_classes,
    );
    let seed: u64 = r.random();
    finite_difference_check(
        |g, xv| {
            let mut p = params.clone();
            let bound = p.bind(g);
            let logits = p.forward(
                g,
                &bound,
                xv,
                Mode::Train,
                &mut rng::stream(seed, Stream::Dropout),
            )?;
            let t = g.constant(y.clone());
            g.cross_entropy(logits, t)
        },
        &x,
        FD_STEP,
    )
}

fn backbone_loss(
    params: &BackboneParams,
    x: &Tensor,
    y: &Tensor,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut p = params.clone();
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let logits = p.forward(
        &mut g,
        &bound,
        xv,
        Mode::Train,
        &mut rng::stream(seed, Stream::Dropout),
    )?;
    let t = g.constant(y.clone());
    let loss = g.cross_entropy(logits, t)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((
        value,
        crate::nn::collect_grads(&grads, &bound.vars(), &params.trainable()),
    ))
}

/// Central differences on a random subset of entries of every trainable
/// tensor.
fn backbone_param_case(r: &mut ChaCha8Rng) -> Result<f64> {
    let arch = small_arch(r);
    let params = BackboneParams::init(arch.clone(), r.random())?;
    let b = r.random_range(2..5);
    let x = randn(r, &[b, arch.in_channels, arch.spatial_len]);
    let y = Tensor::one_hot(
        &(0..b).map(|i| i % arch.num_classes).collect::<Vec<_>>(),
        arch.num_classes,
    );
    let seed: u64 = r.random();
    let (_, analytic) = backbone_loss(&params, &x, &y, seed)?;
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for _ in 0..4 {
            let i = r.random_range(0..grad.len());
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.trainable_mut()[t].data_mut()[i] += delta;
                Ok(backbone_loss(&p, &x, &y, seed)?.0)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(1.0));
        }
    }
    Ok(worst)
}

fn autoencoder_case(r: &mut ChaCha8Rng) -> Result<f64> {
    let arch = small_arch(r);
    let enc = BackboneParams::init(arch.clone(), r.random())?;
    let dec = DecoderParams::init(&arch, r.random())?;
    let b = r.random_range(2..4);
    let x = randn(r, &[b, arch.in_channels, arch.spatial_len]);
    let target = randn(r, x.shape());
    finite_difference_check(
        |g, xv| {
            let (mut e, mut d) = (enc.clone(), dec.clone());
            let (eb, db) = (e.bind(g), d.bind(g));
            let recon = autoencoder_forward(g, &mut e, &eb, &mut d, &db, xv, Mode::Train)?;
            let t = g.constant(target.clone());
            g.mse(recon, t)
        },
        &x,
        FD_STEP,
    )
}

/// Finite-difference checks over `instances` random instances per case.
pub fn gradient_suite(seed: u64, instances: usize) -> Vec<Check> {
    let mut rng = rng::stream(seed, Stream::Synth);
    grad_cases()
        .into_iter()
        .map(|(name, case)| {
            let name = format!("grad/{name}");
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                match case(&mut rng) {
                    Ok(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
                    Err(e) => return failed(&name, e),
                }
            }
            check(&name, worst, GRAD_TOL, instances)
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn oracle(
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut ChaCha8Rng) -> Result<f64>,
) -> Check {
    let name = format!("oracle/{name}");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        match f(rng) {
            Ok(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
            Err(e) => return failed(&name, e),
        }
    }
    check(&name, worst, ORACLE_TOL, instances)
}

fn example(name: &str, got: &[f64], want: &[f64], tol: f64) -> Check {
    check(&format!("example/{name}"), max_abs_diff(got, want), tol, 1)
}

/// Brute-force oracles on `instances` random inputs each, plus the worked
/// examples.
pub fn oracle_suite(seed: u64, instances: usize) -> Vec<Check> {
    let mut rng = rng::stream(seed, Stream::Mixup);
    let r = &mut rng;
    let mut out = vec![
        oracle("sharpen", instances, r, |r| {
            let (b, k) = (r.random_range(1..6), r.random_range(2..7));
            let p = rand_prob_rows(r, b, k, 0.01);
            let t = r.random_range(0.2..3.0);
            let got = sharpen(&p, t)?;
            let mut want = Vec::new();
            for row in p.rows() {
                let pw: Vec<f64> = row.iter().map(|v| v.powf(1.0 / t)).collect();
                let s: f64 = pw.iter().sum();
                want.extend(pw.iter().map(|v| v / s));
            }
            Ok(max_abs_diff(got.data(), &want))
        }),
        oracle("mixup", instances, r, |r| {
            let (b, k) = (r.random_range(1..5), r.random_range(2..5));
            let (x1, x2) = (randn(r, &[b, 7]), randn(r, &[b, 7]));
            let (y1, y2) = (rand_prob_rows(r, b, k, 0.0), rand_prob_rows(r, b, k, 0.0));
            let lambda: f64 = r.random();
            let (x, y, lp) = mixup_with_lambda(&x1, &y1, &x2, &y2, lambda)?;
            let l = if lambda < 0.5 { 1.0 - lambda } else { lambda };
            let brute = |a: &Tensor, c: &Tensor| -> Vec<f64> {
                (0..a.len())
                    .map(|i| l * a.data()[i] + (1.0 - l) * c.data()[i])
                    .collect()
            };
            let err = max_abs_diff(x.data(), &brute(&x1, &x2))
                .max(max_abs_diff(y.data(), &brute(&y1, &y2)));
            Ok(err.max((lp - l).abs()))
        }),
        oracle("rectify", instances, r, |r| {
            let (b, k) = (r.random_range(1..9), r.random_range(2..6));
            let (qu, ql) = (rand_prob_rows(r, b, k, 0.01), rand_prob_rows(r, b, k, 0.01));
            let got = adamatch_rectify(&qu, &ql)?;
            let mut want = vec![0.0; b * k];
            for row in 0..b {
                let mut s = 0.0;
                for j in 0..k {
                    let (mut el, mut eu) = (0.0, 0.0);
                    for i in 0..b {
                        el += ql.data()[i * k + j];
                        eu += qu.data()[i * k + j];
                    }
                    want[row * k + j] = qu.data()[row * k + j] * el / eu;
                    s += want[row * k + j];
                }
                want[row * k..(row + 1) * k]
                    .iter_mut()
                    .for_each(|v| *v /= s);
            }
            Ok(max_abs_diff(got.data(), &want))
        }),
        oracle("relative_threshold", instances, r, |r| {
            let (b, k) = (r.random_range(1..9), r.random_range(2..6));
            let ql = rand_prob_rows(r, b, k, 0.0);
            let tau: f64 = r.random();
            let mut total = 0.0;
            for i in 0..b {
                let mut best = ql.data()[i * k];
                for j in 1..k {
                    if ql.data()[i * k + j] > best {
                        best = ql.data()[i * k + j];
                    }
                }
                total += best;
            }
            Ok((relative_threshold(&ql, tau) - tau * total / b as f64).abs())
        }),
        oracle("confidence_mask", instances, r, |r| {
            let (b, k) = (r.random_range(1..9), r.random_range(2..6));
            let q = rand_prob_rows(r, b, k, 0.0);
            let thr: f64 = r.random_range(0.0..0.9);
            let got = confidence_mask(&q, thr);
            let want: Vec<f64> = q
                .rows()
                .map(|row| row.iter().any(|v| *v >= thr) as u8 as f64)
                .collect();
            Ok(max_abs_diff(&got, &want))
        }),
        oracle("de_closed_form", instances, r, |r| {
            let var = 10f64.powf(r.random_range(-6.0..3.0));
            let (de, floored) = de_from_variance(var);
            let want = 0.5 * ((2.0 * PI).ln() + 1.0 + var.ln());
            Ok(if floored {
                f64::INFINITY
            } else {
                (de - want).abs()
            })
        }),
        oracle("sample_variance", instances, r, |r| {
            let n: usize = r.random_range(2..300);
            let shift: f64 = r.random_range(-5.0..5.0);
            let x: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(r);
                    shift + 2.0 * z
                })
                .collect();
            // Welford's recurrence as an independent evaluation.
            let (mut mean, mut m2) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let d = v - mean;
                mean += d / (i + 1) as f64;
                m2 += d * (v - mean);
            }
            Ok((sample_variance(&x) - m2 / (n - 1) as f64).abs())
        }),
    ];
    out.extend(worked_examples());
    out
}

fn worked_examples() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, got: Result<Vec<f64>>, want: &[f64], tol: f64| {
        out.push(match got {
            Ok(g) => example(name, &g, want, tol),
            Err(e) => failed(&format!("example/{name}"), e),
        })
    };
    let p = Tensor::from_rows(&[vec![0.6, 0.4]]).expect("one row");
    push(
        "sharpen_t0.5",
        sharpen(&p, 0.5).map(Tensor::into_data),
        &[0.36 / 0.52, 0.16 / 0.52],
        1e-12,
    );
    push(
        "sharpen_t0.01",
        sharpen(&p, 0.01).map(|t| vec![(t.data()[0] > 1.0 - 1e-6) as u8 as f64]),
        &[1.0],
        0.5,
    );
    let x1 = Tensor::from_rows(&[vec![1.0, 0.0]]).expect("one row");
    let x2 = Tensor::from_rows(&[vec![0.0, 1.0]]).expect("one row");
    push(
        "mixup_lambda0.3",
        mixup_with_lambda(&x1, &x1, &x2, &x2, 0.3)
            .map(|(x, y, l)| [x.into_data(), y.into_data(), vec![l]].concat()),
        &[0.7, 0.3, 0.7, 0.3, 0.7],
        1e-12,
    );
    let qu = Tensor::from_rows(&[vec![0.8, 0.2]]).expect("one row");
    let ql = Tensor::from_rows(&[vec![0.4, 0.6]]).expect("one row");
    push(
        "rectify_single_row",
        adamatch_rectify(&qu, &ql).map(Tensor::into_data),
        &[0.4, 0.6],
        1e-12,
    );
    let q9 = Tensor::from_rows(&[vec![0.9, 0.1]]).expect("one row");
    push(
        "relative_threshold",
        Ok(vec![relative_threshold(&q9, 0.6)]),
        &[0.54],
        1e-12,
    );
    let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
    push(
        "relative_threshold_uniform",
        Ok(vec![relative_threshold(&uniform, 0.9)]),
        &[0.3],
        1e-12,
    );
    push(
        "de_unit_variance",
        Ok(vec![de_from_variance(1.0).0]),
        &[1.418_938_533_204_672_7],
        1e-12,
    );
    push(
        "de_zero",
        Ok(vec![
            de_from_variance(1.0 / (2.0 * PI * std::f64::consts::E)).0,
        ]),
        &[0.0],
        1e-12,
    );
    let mut cfg = SslMethodConfig::defaults(Method::MixMatch, Protocol::Seed);
    cfg.warmup_epochs = 10;
    push(
        "warmup_half",
        Ok(vec![warmup_weight(5, &cfg)]),
        &[0.5],
        1e-12,
    );
    out
}

/// Both suites with the standard instance counts.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut checks = gradient_suite(seed, GRAD_INSTANCES);
    checks.extend(oracle_suite(seed, ORACLE_INSTANCES));
    checks
}
