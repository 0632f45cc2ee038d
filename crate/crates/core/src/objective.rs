//! The memory-conditional evidence lower bound and the procedures built on a
//! trained model: generation, key-perturbed generation, iterative reads and
//! denoising.
//!
//! Per image the bound is
//!
//! ```text
//! elbo = E_q(Z|X) ln p(x | z)  -  KL(q(Z|X) || p(Z | traces(M, y)))  -  KL(q(Y|X) || N(0, I))
//! ```
//!
//! with one reparameterized draw of `y` and `z`, and `M` written
//! deterministically from the image's episode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{inject_noise, NoiseKind};
use crate::diffcore::{Tape, Tensor, Var};
use crate::distributions::{
    bernoulli_log_prob, gaussian_log_prob, kl_diag_gaussians, kl_to_standard_normal, reparam_sample,
    standard_normal, DiagGaussian,
};
use crate::model::{Bound, Episode, Likelihood, Memory, Model, ModelError};
use crate::stn::KeyTriple;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{term}: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: ModelError,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

fn at<T, E: Into<ModelError>>(term: &'static str, r: Result<T, E>) -> Result<T, ObjectiveError> {
    r.map_err(|e| ObjectiveError::Term {
        term,
        source: e.into(),
    })
}

/// Bound terms in nats per image, averaged over the evaluated images.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub recon_ll: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub elbo: f64,
    /// Per-image terms in evaluation order.
    pub per_image: Vec<ImageTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTerms {
    pub recon_ll: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    /// Largest `|elbo - (recon_ll - kl_z - kl_y)|` over the means and every image.
    pub fn identity_gap(&self) -> f64 {
        let mean_gap = (self.elbo - (self.recon_ll - self.kl_z - self.kl_y)).abs();
        self.per_image
            .iter()
            .map(|t| (t.elbo - (t.recon_ll - t.kl_z - t.kl_y)).abs())
            .fold(mean_gap, f64::max)
    }

    /// Smallest KL term over all images.
    pub fn min_kl(&self) -> f64 {
        self.per_image
            .iter()
            .map(|t| t.kl_z.min(t.kl_y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Tape handles for one evaluation of the bound.
pub struct ElboGraph {
    /// `-mean(elbo)`, the quantity minimized during training.
    pub loss: Var,
    pub recon_ll: Var,
    pub kl_z: Var,
    pub kl_y: Option<Var>,
    pub elbo: Var,
}

/// Noise for one evaluation: key noise `[n, 3K]` (memory variant only) and latent noise `[n, L]`.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    pub keys: Option<Tensor>,
    pub latent: Tensor,
}

impl ElboNoise {
    pub fn draw(model: &Model, n: usize, rng: &mut impl Rng) -> Self {
        let c = &model.config;
        let keys = (!c.ablation).then(|| standard_normal(rng, &[n, 3 * c.reads]));
        let latent = standard_normal(rng, &[n, c.latent]);
        ElboNoise { keys, latent }
    }
}

/// Records the bound for `images` `[b * episode_len, c, h, w]`, where
/// consecutive runs of `episode_len` images form one episode.
pub fn elbo_graph(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    images: &Tensor,
    episode_len: usize,
    noise: &ElboNoise,
) -> Result<ElboGraph, ObjectiveError> {
    model.check_images(images)?;
    let n = images.shape()[0];
    if episode_len == 0 || n % episode_len != 0 {
        return Err(ObjectiveError::InvalidArgument(format!(
            "{n} images do not split into episodes of {episode_len}"
        )));
    }
    let x = tape.constant(images.clone()).map_err(ModelError::from)?;
    let e = at("encode", model.encode_var(tape, b, x, episode_len))?;

    let (prior, kl_y) = if model.config.ablation {
        (at("ablation_prior", model.ablation_prior_var(tape, b, e, episode_len))?, None)
    } else {
        let q_y = at("key_posterior", model.key_posterior_var(tape, b, e))?;
        let key_noise = noise
            .keys
            .clone()
            .ok_or_else(|| ObjectiveError::InvalidArgument("missing key noise".into()))?;
        let eps = at("key_posterior", tape.constant(key_noise))?;
        let keys = at("key_posterior", reparam_sample(tape, &q_y, eps))?;
        let memories = at("memory", model.write_memory_var(tape, b, e, episode_len))?;
        let mem_of: Vec<usize> = (0..n).map(|i| i / episode_len).collect();
        let traces = at("traces", model.read_var(tape, memories, keys, &mem_of))?;
        let prior = at("readout_prior", model.readout_prior_var(tape, b, traces))?;
        let kl_y = at("kl_y", kl_to_standard_normal(tape, &q_y))?;
        (prior, Some(kl_y))
    };

    let q_z = at("latent_posterior", model.latent_posterior_var(tape, b, e))?;
    let eps = at("latent_posterior", tape.constant(noise.latent.clone()))?;
    let z = at("latent_posterior", reparam_sample(tape, &q_z, eps))?;
    let out = at("decode", model.decode_var(tape, b, z))?;
    let pixels = model.config.pixels();
    let flat = at("decode", tape.reshape(out, &[n, pixels]))?;
    let target = images.reshape(&[n, pixels]).map_err(ModelError::from)?;
    let recon = match model.config.likelihood {
        Likelihood::Bernoulli => at("recon_ll", bernoulli_log_prob(tape, flat, &target))?,
        Likelihood::Gaussian { sigma } => at("recon_ll", gaussian_log_prob(tape, flat, sigma, &target))?,
    };
    let kl_z = at("kl_z", kl_diag_gaussians(tape, &q_z, &prior))?;
    let mut elbo = at("elbo", tape.sub(recon, kl_z))?;
    if let Some(kl_y) = kl_y {
        elbo = at("elbo", tape.sub(elbo, kl_y))?;
    }
    let mean = at("elbo", tape.mean_all(elbo))?;
    let loss = at("elbo", tape.scale(mean, -1.0))?;
    Ok(ElboGraph {
        loss,
        recon_ll: recon,
        kl_z,
        kl_y,
        elbo,
    })
}

fn breakdown(tape: &Tape, g: &ElboGraph) -> ElboBreakdown {
    let recon = tape.value(g.recon_ll).data();
    let kl_z = tape.value(g.kl_z).data();
    let kl_y = g.kl_y.map(|v| tape.value(v).data().to_vec());
    let elbo = tape.value(g.elbo).data();
    let per_image: Vec<ImageTerms> = (0..recon.len())
        .map(|i| ImageTerms {
            recon_ll: recon[i],
            kl_z: kl_z[i],
            kl_y: kl_y.as_ref().map_or(0.0, |k| k[i]),
            elbo: elbo[i],
        })
        .collect();
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageTerms) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    ElboBreakdown {
        recon_ll: mean(|t| t.recon_ll),
        kl_z: mean(|t| t.kl_z),
        kl_y: mean(|t| t.kl_y),
        elbo: mean(|t| t.elbo),
        per_image,
    }
}

fn stack_episodes(episodes: &[Episode]) -> Result<(Tensor, usize), ObjectiveError> {
    let first = episodes
        .first()
        .ok_or_else(|| ObjectiveError::InvalidArgument("no episodes".into()))?;
    let t = first.len();
    if episodes.iter().any(|e| e.len() != t) {
        return Err(ObjectiveError::InvalidArgument(
            "episodes in a batch must share a length".into(),
        ));
    }
    let mut data = Vec::with_capacity(first.images.numel() * episodes.len());
    for e in episodes {
        data.extend_from_slice(e.images.data());
    }
    let mut shape = first.images.shape().to_vec();
    shape[0] *= episodes.len();
    Ok((Tensor::new(&shape, data).map_err(ModelError::from)?, t))
}

/// Evaluates the bound for a batch of equally long episodes.
pub fn elbo_batch(model: &Model, episodes: &[Episode], rng: &mut impl Rng) -> Result<ElboBreakdown, ObjectiveError> {
    let (images, t) = stack_episodes(episodes)?;
    let noise = ElboNoise::draw(model, images.shape()[0], rng);
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape)?;
    let g = elbo_graph(model, &mut tape, &b, &images, t, &noise)?;
    Ok(breakdown(&tape, &g))
}

/// Bound for a single episode with noise drawn from `rng_seed`.
pub fn elbo(model: &Model, episode: &Episode, rng_seed: u64) -> Result<ElboBreakdown, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    elbo_batch(model, std::slice::from_ref(episode), &mut rng)
}

/// Bound and `d(-mean elbo) / d param` for every parameter.
pub fn loss_and_grads(
    model: &Model,
    episodes: &[Episode],
    rng: &mut impl Rng,
) -> Result<(ElboBreakdown, BTreeMap<String, Tensor>), ObjectiveError> {
    let (images, t) = stack_episodes(episodes)?;
    let noise = ElboNoise::draw(model, images.shape()[0], rng);
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape)?;
    let g = elbo_graph(model, &mut tape, &b, &images, t, &noise)?;
    tape.backward(g.loss).map_err(ModelError::from)?;
    Ok((breakdown(&tape, &g), b.gradients(&tape, &model.params)))
}

/// Images decoded from the readout-prior mean for raw keys `[n, 3K]` read from `memory`.
pub fn decode_from_keys(model: &Model, memory: &Memory, keys: &Tensor) -> Result<Tensor, ObjectiveError> {
    if model.config.ablation {
        return Err(ObjectiveError::InvalidArgument(
            "the no-memory variant cannot read from a memory".into(),
        ));
    }
    let c = &model.config;
    let n = keys.shape()[0];
    if keys.shape() != [n, 3 * c.reads] || n == 0 {
        return Err(ObjectiveError::InvalidArgument(format!(
            "keys must be [n, {}], got {:?}",
            3 * c.reads,
            keys.shape()
        )));
    }
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape)?;
    let mut mshape = vec![1];
    mshape.extend_from_slice(memory.grid.shape());
    let mem = tape
        .constant(memory.grid.reshape(&mshape).map_err(ModelError::from)?)
        .map_err(ModelError::from)?;
    let kv = tape.constant(keys.clone()).map_err(ModelError::from)?;
    let traces = at("traces", model.read_var(&mut tape, mem, kv, &vec![0; n]))?;
    let prior = at("readout_prior", model.readout_prior_var(&mut tape, &b, traces))?;
    let out = at("decode", model.decode_var(&mut tape, &b, prior.mean))?;
    let mean = at("decode", model.output_mean(&mut tape, out))?;
    Ok(tape.value(mean).clone())
}

/// Output of [`generate`]: images `[n, c, h, w]` and the raw keys `[n, 3K]` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub images: Tensor,
    pub keys: Tensor,
}

impl Generation {
    /// Keys of output `i` as triples.
    pub fn key_triples(&self, i: usize) -> Vec<KeyTriple> {
        let row = self.keys.rows(i, i + 1);
        row.data()
            .chunks(3)
            .map(|k| KeyTriple::new([k[0], k[1], k[2]]))
            .collect()
    }
}

/// Draws `K` keys per output from `N(0, 1)` and decodes the readout-prior mean.
pub fn generate(model: &Model, memory: &Memory, n: usize, rng_seed: u64) -> Result<Generation, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let keys = standard_normal(&mut rng, &[n, 3 * model.config.reads]);
    let images = decode_from_keys(model, memory, &keys)?;
    Ok(Generation { images, keys })
}

/// Generations from `base_keys + eps`, `eps ~ N(0, eps_std^2)` per coordinate.
pub fn perturbed_generate(
    model: &Model,
    memory: &Memory,
    base_keys: &[KeyTriple],
    eps_std: f64,
    n: usize,
    rng_seed: u64,
) -> Result<Generation, ObjectiveError> {
    if !(eps_std > 0.0) {
        return Err(ObjectiveError::InvalidArgument(format!(
            "perturbation std must be positive, got {eps_std}"
        )));
    }
    if base_keys.len() != model.config.reads {
        return Err(ObjectiveError::InvalidArgument(format!(
            "expected {} base keys, got {}",
            model.config.reads,
            base_keys.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let base: Vec<f64> = base_keys.iter().flat_map(|k| k.raw).collect();
    let mut data = Vec::with_capacity(n * base.len());
    for _ in 0..n {
        for &b in &base {
            data.push(b + eps_std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let keys = Tensor::new(&[n, base.len()], data).map_err(ModelError::from)?;
    let images = decode_from_keys(model, memory, &keys)?;
    Ok(Generation { images, keys })
}

/// Repeatedly re-infers keys from the current image with `memory` held fixed.
/// Returns the `steps` successive reconstructions.
pub fn iterative_read(
    model: &Model,
    memory: &Memory,
    x_init: &Tensor,
    steps: usize,
    rng_seed: u64,
) -> Result<Vec<Tensor>, ObjectiveError> {
    if steps == 0 {
        return Err(ObjectiveError::InvalidArgument("steps must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let image_shape = model.config.image;
    let mut current = x_init.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let keys = {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape)?;
            let mut shape = vec![1];
            shape.extend_from_slice(&image_shape);
            let x = tape
                .constant(current.reshape(&shape).map_err(ModelError::from)?)
                .map_err(ModelError::from)?;
            let e = at("encode", model.encode_var(&mut tape, &b, x, 1))?;
            let q_y: DiagGaussian = at("key_posterior", model.key_posterior_var(&mut tape, &b, e))?;
            let eps = standard_normal(&mut rng, &[1, 3 * model.config.reads]);
            let eps = tape.constant(eps).map_err(ModelError::from)?;
            let y = at("key_posterior", reparam_sample(&mut tape, &q_y, eps))?;
            tape.value(y).clone()
        };
        let next = decode_from_keys(model, memory, &keys)?;
        current = next.reshape(&image_shape).map_err(ModelError::from)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Euclidean distance between two equally shaped images.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResult {
    pub noisy: Tensor,
    pub trajectory: Vec<Tensor>,
    /// L2 error to the clean image: entry 0 for the noisy input, then one per step.
    pub errors: Vec<f64>,
}

/// Corrupts `x_clean`, then cleans it up with `steps` iterative reads.
pub fn denoise(
    model: &Model,
    memory: &Memory,
    x_clean: &Tensor,
    noise: NoiseKind,
    steps: usize,
    rng_seed: u64,
) -> Result<DenoiseResult, ObjectiveError> {
    let noisy = inject_noise(x_clean, noise, rng_seed)?;
    let trajectory = iterative_read(model, memory, &noisy, steps, rng_seed.wrapping_add(1))?;
    let mut errors = vec![l2_distance(&noisy, x_clean)];
    errors.extend(trajectory.iter().map(|x| l2_distance(x, x_clean)));
    Ok(DenoiseResult {
        noisy,
        trajectory,
        errors,
    })
}
