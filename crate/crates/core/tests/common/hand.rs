//! A 1x1-pixel model with unit-width layers, re-derived in plain scalar
//! arithmetic, plus Gauss-Hermite expectations over its noise.

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kpp_core::diffcore::{Tape, Tensor};
use kpp_core::distributions::{LOG_STD_MAX, LOG_STD_MIN};
use kpp_core::model::{Episode, Likelihood, Model, ModelConfig};
use kpp_core::objective::{elbo_graph, ElboNoise};

pub const EPISODE: [f64; 2] = [1.0, 0.0];

pub fn hand_config() -> ModelConfig {
    ModelConfig {
        image: [1, 1, 1],
        enc_channels: [1, 1, 1],
        embed_dim: 1,
        latent: 1,
        reads: 1,
        memory: [1, 2, 2],
        memory_base_channels: 1,
        memory_upsamples: 0,
        trace: (2, 2),
        prior_channels: [1, 1],
        decoder_base_channels: 1,
        decoder_upsamples: 0,
        tsm: true,
        likelihood: Likelihood::Bernoulli,
        init_log_std: 0.0,
        ablation: false,
    }
}

/// Hand model with every parameter drawn uniformly from `[-1, 1]`.
pub fn hand_model(seed: u64) -> Model {
    let mut model = Model::init(hand_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    model
}

pub fn episode(pixels: &[f64]) -> Episode {
    let images = Tensor::new(&[pixels.len(), 1, 1, 1], pixels.to_vec()).unwrap();
    Episode::new(images, (0..pixels.len()).collect()).unwrap()
}

fn p<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params.get(name).unwrap().data()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn clamp_ls(v: f64) -> f64 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// `KL(N(mq, e^lq) || N(mp, e^lp))`.
pub fn kl(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    (lp - lq) + ((2.0 * lq).exp() + (mq - mp).powi(2)) / (2.0 * (2.0 * lp).exp()) - 0.5
}

fn embed(m: &Model, x: f64) -> f64 {
    let mut h = x;
    for i in 0..3 {
        // a 3x3 stride-2 kernel on a 1x1 input only touches its centre tap
        h = relu(p(m, &format!("enc.conv{i}.w"))[4] * h + p(m, &format!("enc.conv{i}.b"))[0]);
    }
    p(m, "enc.fc.w")[0] * h + p(m, "enc.fc.b")[0]
}

/// `(mean, log_std)` of a width-`d` Gaussian head on scalar input `e`.
fn head(m: &Model, name: &str, e: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let w = p(m, &format!("{name}.w"));
    let b = p(m, &format!("{name}.b"));
    let raw: Vec<f64> = (0..2 * d).map(|j| w[j] * e + b[j]).collect();
    (raw[..d].to_vec(), raw[d..].iter().map(|&v| clamp_ls(v)).collect())
}

/// Bilinear read of a 2x2 memory with zero padding outside.
fn bilinear(mem: &[f64; 4], gx: f64, gy: f64) -> f64 {
    let px = (gx + 1.0) * 0.5;
    let py = (gy + 1.0) * 0.5;
    let mut v = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let wx = (1.0 - (px - c as f64).abs()).max(0.0);
            let wy = (1.0 - (py - r as f64).abs()).max(0.0);
            v += wx * wy * mem[r * 2 + c];
        }
    }
    v
}

pub struct HandState {
    pub embeddings: Vec<f64>,
    pub memory: [f64; 4],
}

pub fn hand_state(m: &Model, x: &[f64]) -> HandState {
    let embeddings: Vec<f64> = x.iter().map(|&v| embed(m, v)).collect();
    let pooled = embeddings.iter().sum::<f64>() / x.len() as f64;
    let (w, b) = (p(m, "mem.fc.w"), p(m, "mem.fc.b"));
    let memory = [0, 1, 2, 3].map(|k| w[k] * pooled + b[k]);
    HandState { embeddings, memory }
}

/// Readout prior `(mean, log_std)` given raw key `y`.
pub fn prior_given_key(m: &Model, memory: &[f64; 4], y: [f64; 3]) -> (f64, f64) {
    let [s, tx, ty] = y.map(f64::tanh);
    let w0 = p(m, "prior.conv0.w");
    let mut h = p(m, "prior.conv0.b")[0];
    for r in 0..2 {
        for c in 0..2 {
            let u = if c == 0 { -1.0 } else { 1.0 };
            let v = if r == 0 { -1.0 } else { 1.0 };
            h += w0[(r + 1) * 3 + c + 1] * bilinear(memory, s * u + tx, s * v + ty);
        }
    }
    let h = relu(h);
    let h = relu(p(m, "prior.conv1.w")[4] * h + p(m, "prior.conv1.b")[0]);
    let (mean, ls) = head(m, "prior.fc", h, 1);
    (mean[0], ls[0])
}

fn log_bernoulli(x: f64, z: f64, m: &Model) -> f64 {
    let l = p(m, "dec.fc.w")[0] * z + p(m, "dec.fc.b")[0];
    x * l - softplus(l)
}

#[derive(Debug, Clone, Copy)]
pub struct HandTerms {
    pub recon_ll: f64,
    pub kl_z: f64,
    pub kl_y: f64,
}

/// The three terms for every image of `x`, given standard-normal key and latent noise.
pub fn straight_line(m: &Model, x: &[f64], key_eps: &[[f64; 3]], z_eps: &[f64]) -> Vec<HandTerms> {
    let st = hand_state(m, x);
    (0..x.len())
        .map(|t| {
            let e = st.embeddings[t];
            let (km, kls) = head(m, "key", e, 3);
            let y = [0, 1, 2].map(|j| km[j] + kls[j].exp() * key_eps[t][j]);
            let (pm, pls) = prior_given_key(m, &st.memory, y);
            let (qm, qls) = head(m, "post", e, 1);
            let z = qm[0] + qls[0].exp() * z_eps[t];
            HandTerms {
                recon_ll: log_bernoulli(x[t], z, m),
                kl_z: kl(qm[0], qls[0], pm, pls),
                kl_y: (0..3).map(|j| kl(km[j], kls[j], 0.0, 0.0)).sum(),
            }
        })
        .collect()
}

/// Standard-normal Gauss-Hermite nodes and weights.
pub fn normal_rule(n: usize) -> Vec<(f64, f64)> {
    let rule = GaussHermite::new(NonZeroUsize::new(n).unwrap());
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(t, w)| (std::f64::consts::SQRT_2 * t, w / std::f64::consts::PI.sqrt()))
        .collect()
}

/// `ln p(x_t | M)` per image, integrating keys and latent against their priors.
pub fn exact_log_lik(m: &Model, x: &[f64], n: usize) -> Vec<f64> {
    let st = hand_state(m, x);
    let rule = normal_rule(n);
    let mut lik = vec![0.0; x.len()];
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            for &(c, wc) in &rule {
                let (pm, pls) = prior_given_key(m, &st.memory, [a, b, c]);
                let sd = pls.exp();
                for (t, &xt) in x.iter().enumerate() {
                    let inner: f64 = rule.iter().map(|&(u, wu)| wu * log_bernoulli(xt, pm + sd * u, m).exp()).sum();
                    lik[t] += wa * wb * wc * inner;
                }
            }
        }
    }
    lik.into_iter().map(f64::ln).collect()
}

/// Expected per-image bound from the library's graph, with one batch row per quadrature node.
pub fn expected_elbo(m: &Model, x: &[f64], n: usize) -> Vec<f64> {
    let rule = normal_rule(n);
    let t_len = x.len();
    let mut nodes = Vec::new();
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            for &(c, wc) in &rule {
                for &(d, wd) in &rule {
                    nodes.push(([a, b, c, d], wa * wb * wc * wd));
                }
            }
        }
    }
    let rows = nodes.len() * t_len;
    let mut images = Vec::with_capacity(rows);
    let mut keys = Vec::with_capacity(rows * 3);
    let mut latent = Vec::with_capacity(rows);
    for (u, _) in &nodes {
        for &xt in x {
            images.push(xt);
            keys.extend_from_slice(&u[..3]);
            latent.push(u[3]);
        }
    }
    let noise = ElboNoise {
        keys: Some(Tensor::new(&[rows, 3], keys).unwrap()),
        latent: Tensor::new(&[rows, 1], latent).unwrap(),
    };
    let images = Tensor::new(&[rows, 1, 1, 1], images).unwrap();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();
    let g = elbo_graph(m, &mut tape, &b, &images, t_len, &noise).unwrap();
    let elbo = tape.value(g.elbo).data();
    let mut out = vec![0.0; t_len];
    for (j, (_, w)) in nodes.iter().enumerate() {
        for t in 0..t_len {
            out[t] += w * elbo[j * t_len + t];
        }
    }
    out
}

/// `E_{q(Y|x)}[kl_z]` per image by 3-D quadrature over the key noise.
pub fn expected_kl_z(m: &Model, x: &[f64], n: usize) -> Vec<f64> {
    let rule = normal_rule(n);
    let mut out = vec![0.0; x.len()];
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            for &(c, wc) in &rule {
                let eps = vec![[a, b, c]; x.len()];
                let terms = straight_line(m, x, &eps, &vec![0.0; x.len()]);
                for (o, t) in out.iter_mut().zip(&terms) {
                    *o += wa * wb * wc * t.kl_z;
                }
            }
        }
    }
    out
}

/// Monte Carlo mean and standard error of `kl_z` per image over `draws` key draws,
/// evaluated by the library in one batch.
pub fn mc_kl_z(m: &Model, x: &[f64], draws: usize, seed: u64) -> Vec<(f64, f64)> {
    let t_len = x.len();
    let rows = draws * t_len;
    let images: Vec<f64> = (0..draws).flat_map(|_| x.iter().copied()).collect();
    let images = Tensor::new(&[rows, 1, 1, 1], images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ElboNoise::draw(m, rows, &mut rng);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();
    let g = elbo_graph(m, &mut tape, &b, &images, t_len, &noise).unwrap();
    let kl = tape.value(g.kl_z).data();
    (0..t_len)
        .map(|t| {
            let v: Vec<f64> = (0..draws).map(|j| kl[j * t_len + t]).collect();
            let mean = v.iter().sum::<f64>() / draws as f64;
            let var = v.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            (mean, (var / draws as f64).sqrt())
        })
        .collect()
}
