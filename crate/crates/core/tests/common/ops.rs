//! Finite-difference checks for every tape op and for the full bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use kpp_core::diffcore::{Tape, Tensor, Var};
use kpp_core::distributions::{
    bernoulli_log_prob, gaussian_log_prob, kl_diag_gaussians, kl_to_standard_normal, reparam_sample, DiagGaussian,
    LOG_STD_MAX, LOG_STD_MIN,
};
use kpp_core::model::{tsm_shift_var, Likelihood, Model, ModelConfig};
use kpp_core::objective::{elbo_graph, ElboNoise};
use kpp_core::stn::{affine_grid_var, bilinear_sample_var, read_traces_var};

use super::fd::{central_difference, relative_error, GradCheck};

pub const OP_STEP: f64 = 1e-5;
pub const OP_FLOOR: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const ELBO_TOL: f64 = 1e-3;

/// One op under test. The first `checked` inputs are differentiated; the
/// rest are recorded as constants.
pub struct OpCase {
    pub name: &'static str,
    pub checked: usize,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn(&mut Tape, &[Var]) -> Var,
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Normal draws kept at least `margin` away from every point in `kinks`.
fn away(rng: &mut impl Rng, shape: &[usize], std: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = std * rng.sample::<f64, _>(StandardNormal);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn binary(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect()).unwrap()
}

/// Grid coordinates whose pixel positions stay clear of integer lines.
fn sample_grid(rng: &mut impl Rng, shape: &[usize], h: usize, w: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let size = if i % 2 == 0 { w } else { h };
            let p = loop {
                let p: f64 = rng.random_range(-0.9..size as f64 - 0.1);
                let frac = p - p.floor();
                if frac > 0.01 && frac < 0.99 {
                    break p;
                }
            };
            2.0 * p / (size - 1) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn gaussian(t: &mut Tape, v: &[Var]) -> (DiagGaussian, Option<DiagGaussian>) {
    let q = DiagGaussian::new(t, v[0], v[1]).unwrap();
    let p = (v.len() >= 4).then(|| DiagGaussian::new(t, v[2], v[3]).unwrap());
    (q, p)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            checked: 2,
            inputs: |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)],
            build: |t, v| t.add(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "sub",
            checked: 2,
            inputs: |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)],
            build: |t, v| t.sub(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "mul",
            checked: 2,
            inputs: |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)],
            build: |t, v| t.mul(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "matmul",
            checked: 2,
            inputs: |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[4, 2], 1.0)],
            build: |t, v| t.matmul(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "conv2d",
            checked: 3,
            inputs: |r| vec![normal(r, &[2, 2, 5, 5], 1.0), normal(r, &[3, 2, 3, 3], 0.5), normal(r, &[3], 1.0)],
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
        },
        OpCase {
            name: "conv2d_unpadded",
            checked: 2,
            inputs: |r| vec![normal(r, &[1, 2, 4, 4], 1.0), normal(r, &[2, 2, 3, 3], 0.5)],
            build: |t, v| t.conv2d(v[0], v[1], None, 1, 0).unwrap(),
        },
        OpCase {
            name: "conv_transpose2d",
            checked: 3,
            inputs: |r| vec![normal(r, &[2, 3, 3, 3], 1.0), normal(r, &[3, 2, 4, 4], 0.5), normal(r, &[2], 1.0)],
            build: |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
        },
        OpCase {
            name: "sum",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 3, 4], 1.0)],
            build: |t, v| t.sum(v[0], &[1]).unwrap(),
        },
        OpCase {
            name: "mean",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 3, 4], 1.0)],
            build: |t, v| t.mean(v[0], &[0, 2]).unwrap(),
        },
        OpCase {
            name: "sum_all",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 3], 1.0)],
            build: |t, v| t.sum_all(v[0]).unwrap(),
        },
        OpCase {
            name: "mean_all",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 3], 1.0)],
            build: |t, v| t.mean_all(v[0]).unwrap(),
        },
        OpCase {
            name: "exp",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 0.7)],
            build: |t, v| t.exp(v[0]).unwrap(),
        },
        OpCase {
            name: "ln",
            checked: 1,
            inputs: |r| vec![uniform(r, &[3, 3], 0.3, 3.0)],
            build: |t, v| t.ln(v[0]).unwrap(),
        },
        OpCase {
            name: "softplus",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 3.0)],
            build: |t, v| t.softplus(v[0]).unwrap(),
        },
        OpCase {
            name: "tanh",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 1.5)],
            build: |t, v| t.tanh(v[0]).unwrap(),
        },
        OpCase {
            name: "sigmoid",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 3.0)],
            build: |t, v| t.sigmoid(v[0]).unwrap(),
        },
        OpCase {
            name: "relu",
            checked: 1,
            inputs: |r| vec![away(r, &[3, 3], 1.0, &[0.0], 1e-3)],
            build: |t, v| t.relu(v[0]).unwrap(),
        },
        OpCase {
            name: "scale",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 1.0)],
            build: |t, v| t.scale(v[0], -2.5).unwrap(),
        },
        OpCase {
            name: "add_scalar",
            checked: 1,
            inputs: |r| vec![normal(r, &[3, 3], 1.0)],
            build: |t, v| {
                let y = t.add_scalar(v[0], 0.7).unwrap();
                t.mul(y, y).unwrap()
            },
        },
        OpCase {
            name: "clamp",
            checked: 1,
            inputs: |r| vec![away(r, &[4, 4], 0.8, &[-0.5, 0.5], 1e-3)],
            build: |t, v| t.clamp(v[0], -0.5, 0.5).unwrap(),
        },
        OpCase {
            name: "broadcast",
            checked: 1,
            inputs: |r| vec![normal(r, &[3], 1.0)],
            build: |t, v| t.broadcast(v[0], 4).unwrap(),
        },
        OpCase {
            name: "concat",
            checked: 2,
            inputs: |r| vec![normal(r, &[2, 3], 1.0), normal(r, &[2, 2], 1.0)],
            build: |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
        },
        OpCase {
            name: "slice",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 5], 1.0)],
            build: |t, v| t.slice(v[0], 1, 1, 4).unwrap(),
        },
        OpCase {
            name: "reshape",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 6], 1.0)],
            build: |t, v| t.reshape(v[0], &[3, 4]).unwrap(),
        },
        OpCase {
            name: "affine_grid",
            checked: 1,
            inputs: |r| vec![uniform(r, &[2, 3], -0.9, 0.9)],
            build: |t, v| affine_grid_var(t, v[0], 3, 4).unwrap(),
        },
        OpCase {
            name: "bilinear_sample",
            checked: 2,
            inputs: |r| vec![normal(r, &[2, 2, 4, 5], 1.0), sample_grid(r, &[3, 2, 3, 2], 4, 5)],
            build: |t, v| bilinear_sample_var(t, v[0], v[1], &[0, 1, 1]).unwrap(),
        },
        OpCase {
            name: "read_traces",
            checked: 2,
            inputs: |r| vec![normal(r, &[1, 2, 6, 6], 1.0), normal(r, &[2, 3], 0.7)],
            build: |t, v| read_traces_var(t, v[0], v[1], &[0, 0], (3, 3)).unwrap(),
        },
        OpCase {
            name: "tsm_shift",
            checked: 1,
            inputs: |r| vec![normal(r, &[8, 16, 2, 2], 1.0)],
            build: |t, v| tsm_shift_var(t, v[0], 4).unwrap(),
        },
        OpCase {
            name: "reparam_sample",
            checked: 2,
            inputs: |r| vec![normal(r, &[2, 3], 1.0), normal(r, &[2, 3], 0.5), normal(r, &[2, 3], 1.0)],
            build: |t, v| {
                let (q, _) = gaussian(t, &v[..2]);
                reparam_sample(t, &q, v[2]).unwrap()
            },
        },
        OpCase {
            name: "kl_diag_gaussians",
            checked: 4,
            inputs: |r| {
                vec![
                    normal(r, &[2, 3], 1.0),
                    normal(r, &[2, 3], 0.5),
                    normal(r, &[2, 3], 1.0),
                    normal(r, &[2, 3], 0.5),
                ]
            },
            build: |t, v| {
                let (q, p) = gaussian(t, v);
                kl_diag_gaussians(t, &q, &p.unwrap()).unwrap()
            },
        },
        OpCase {
            name: "kl_to_standard_normal",
            checked: 2,
            inputs: |r| vec![normal(r, &[2, 3], 1.0), normal(r, &[2, 3], 0.5)],
            build: |t, v| {
                let (q, _) = gaussian(t, v);
                kl_to_standard_normal(t, &q).unwrap()
            },
        },
        OpCase {
            name: "gaussian_head",
            checked: 1,
            inputs: |r| vec![away(r, &[2, 6], 3.0, &[LOG_STD_MIN, LOG_STD_MAX], 1e-3)],
            build: |t, v| {
                let d = DiagGaussian::from_head(t, v[0]).unwrap();
                t.concat(&[d.mean, d.log_std], 1).unwrap()
            },
        },
        OpCase {
            name: "bernoulli_log_prob",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 5], 2.0), binary(r, &[2, 5])],
            build: |t, v| {
                let target = t.value(v[1]).clone();
                bernoulli_log_prob(t, v[0], &target).unwrap()
            },
        },
        OpCase {
            name: "gaussian_log_prob",
            checked: 1,
            inputs: |r| vec![normal(r, &[2, 5], 1.0), uniform(r, &[2, 5], 0.0, 1.0)],
            build: |t, v| {
                let target = t.value(v[1]).clone();
                gaussian_log_prob(t, v[0], 0.7, &target).unwrap()
            },
        },
    ]
}

fn record(t: &mut Tape, case: &OpCase, inputs: &[Tensor]) -> Vec<Var> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if i < case.checked {
                t.param(x.clone()).unwrap()
            } else {
                t.constant(x.clone()).unwrap()
            }
        })
        .collect()
}

fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> Var {
    let w = t.constant(w.clone()).unwrap();
    let prod = t.mul(y, w).unwrap();
    t.sum_all(prod).unwrap()
}

/// Worst relative error between the tape gradient and central differences
/// of `sum(op(inputs) * w)` for one random draw.
pub fn check_op(case: &OpCase, rng: &mut ChaCha8Rng) -> f64 {
    let inputs = (case.inputs)(rng);
    let mut tape = Tape::new();
    let vars = record(&mut tape, case, &inputs);
    let y = (case.build)(&mut tape, &vars);
    let w = normal(rng, tape.shape(y), 1.0);
    let loss = weighted_sum(&mut tape, y, &w);
    tape.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let v = record(&mut t, case, ins);
        let y = (case.build)(&mut t, &v);
        let l = weighted_sum(&mut t, y, &w);
        t.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..case.checked {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = central_difference(&inputs[i], OP_STEP, |x| {
            let mut ins = inputs.clone();
            ins[i] = x.clone();
            eval(&ins)
        });
        worst = worst.max(GradCheck::compare(&analytic, &numeric, OP_FLOOR).max_rel_error);
    }
    worst
}

/// Worst error of `case` over `draws` random draws starting from `seed`.
pub fn check_op_draws(case: &OpCase, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws).map(|_| check_op(case, &mut rng)).fold(0.0, f64::max)
}

/// Small memory model with every parameter (heads included) jittered off its init.
pub fn fd_model(seed: u64, ablation: bool) -> Model {
    let config = ModelConfig {
        image: [1, 8, 8],
        enc_channels: [8, 8, 8],
        embed_dim: 8,
        latent: 3,
        reads: 2,
        memory: [2, 8, 8],
        memory_base_channels: 4,
        memory_upsamples: 1,
        trace: (4, 4),
        prior_channels: [4, 4],
        decoder_base_channels: 4,
        decoder_upsamples: 1,
        tsm: true,
        likelihood: Likelihood::Bernoulli,
        init_log_std: 0.0,
        ablation,
    };
    let mut model = Model::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

fn elbo_loss(model: &Model, images: &Tensor, noise: &ElboNoise) -> f64 {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape).unwrap();
    let g = elbo_graph(model, &mut tape, &b, images, 4, noise).unwrap();
    tape.value(g.loss).item().unwrap()
}

/// Outcome of one end-to-end draw.
#[derive(Debug, Clone, Copy)]
pub struct ElboFd {
    pub max_rel_error: f64,
    /// Coordinates dropped because the two step sizes disagreed, i.e. a
    /// ReLU or sampling-cell boundary sat inside the difference stencil.
    pub kinks: usize,
}

/// Checks the gradient of the negative bound for `coords` random scalar
/// parameters of a jittered model on two binary episodes of four.
pub fn elbo_fd_draw(seed: u64, coords: usize) -> ElboFd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = fd_model(seed, seed % 5 == 4);
    let images = binary(&mut rng, &[8, 1, 8, 8]);
    let noise = ElboNoise::draw(&model, 8, &mut rng);

    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape).unwrap();
    let g = elbo_graph(&model, &mut tape, &b, &images, 4, &noise).unwrap();
    tape.backward(g.loss).unwrap();
    let grads = b.gradients(&tape, &model.params);

    let names: Vec<String> = model.params.names().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| model.params.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = ElboFd {
        max_rel_error: 0.0,
        kinks: 0,
    };
    let mut checked = 0;
    while checked < coords {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let diff = |h: f64| {
            let mut m = model.clone();
            let orig = m.params.get(&names[k]).unwrap().data()[flat];
            m.params.get_mut(&names[k]).unwrap().data_mut()[flat] = orig + h;
            let plus = elbo_loss(&m, &images, &noise);
            m.params.get_mut(&names[k]).unwrap().data_mut()[flat] = orig - h;
            let minus = elbo_loss(&m, &images, &noise);
            (plus - minus) / (2.0 * h)
        };
        let (coarse, fine) = (diff(1e-5), diff(5e-6));
        if relative_error(coarse, fine, 1e-5) > ELBO_TOL / 4.0 {
            out.kinks += 1;
            continue;
        }
        let analytic = grads[&names[k]].data()[flat];
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic, fine, 1e-5));
        checked += 1;
    }
    out
}
