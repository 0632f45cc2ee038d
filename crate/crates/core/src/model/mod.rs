//! Learned networks: episode encoder, key head, memory writer, amortized
//! latent posterior, memory readout prior, decoder and the no-memory head.

mod checkpoint;
mod params;
mod tsm;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use params::{Bound, ParamStore};
pub use tsm::{tsm_shift, tsm_shift_var, SHIFT_FRACTION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::distributions::{DiagGaussian, DistError};
use crate::stn::{self, StnError, TraceSet};
use params::{init_tensor, Init};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Stn(#[from] StnError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image shape {got:?} does not match configured {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} traces, got {got}")]
    TraceCount { expected: usize, got: usize },
    #[error("an episode needs at least one image")]
    EmptyEpisode,
}

/// Output distribution over pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Bernoulli,
    /// Fixed-variance Gaussian with standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `[channels, height, width]` of each image.
    pub image: [usize; 3],
    pub enc_channels: [usize; 3],
    pub embed_dim: usize,
    /// Latent width `L`.
    pub latent: usize,
    /// Number of reads `K` per image.
    pub reads: usize,
    /// `[channels, height, width]` of the memory.
    pub memory: [usize; 3],
    pub memory_base_channels: usize,
    /// Number of stride-2 transposed convolutions in the memory writer.
    pub memory_upsamples: usize,
    /// `(height, width)` of each read trace.
    pub trace: (usize, usize),
    pub prior_channels: [usize; 2],
    pub decoder_base_channels: usize,
    /// Number of stride-2 transposed convolutions in the decoder.
    pub decoder_upsamples: usize,
    pub tsm: bool,
    pub likelihood: Likelihood,
    pub init_log_std: f64,
    /// Replace the memory path with a dense prior on the pooled embedding.
    pub ablation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: [1, 16, 16],
            enc_channels: [16, 32, 32],
            embed_dim: 128,
            latent: 64,
            reads: 2,
            memory: [3, 64, 64],
            memory_base_channels: 32,
            memory_upsamples: 4,
            trace: (16, 16),
            prior_channels: [16, 32],
            decoder_base_channels: 32,
            decoder_upsamples: 2,
            tsm: true,
            likelihood: Likelihood::Bernoulli,
            init_log_std: 0.0,
            ablation: false,
        }
    }
}

fn conv_out(size: usize) -> usize {
    // kernel 3, stride 2, padding 1
    (size + 2 - 3) / 2 + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.image.contains(&0) || self.memory.contains(&0) {
            return err("image and memory dimensions must be positive");
        }
        if self.reads == 0 || self.latent == 0 || self.embed_dim == 0 {
            return err("reads, latent and embed_dim must be positive");
        }
        if self.trace.0 == 0 || self.trace.1 == 0 {
            return err("trace size must be positive");
        }
        if self.enc_channels.contains(&0) || self.prior_channels.contains(&0) {
            return err("channel widths must be positive");
        }
        let up = 1usize << self.memory_upsamples;
        if self.memory[1] % up != 0 || self.memory[2] % up != 0 {
            return err("memory height and width must be divisible by 2^memory_upsamples");
        }
        let up = 1usize << self.decoder_upsamples;
        if self.image[1] % up != 0 || self.image[2] % up != 0 {
            return err("image height and width must be divisible by 2^decoder_upsamples");
        }
        if let Likelihood::Gaussian { sigma } = self.likelihood {
            if !(sigma > 0.0) {
                return err("gaussian sigma must be positive");
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image.iter().product()
    }

    fn encoder_flat(&self) -> usize {
        let (mut h, mut w) = (self.image[1], self.image[2]);
        for _ in 0..3 {
            h = conv_out(h);
            w = conv_out(w);
        }
        self.enc_channels[2] * h * w
    }

    fn prior_flat(&self) -> usize {
        let (mut h, mut w) = self.trace;
        for _ in 0..2 {
            h = conv_out(h);
            w = conv_out(w);
        }
        self.prior_channels[1] * h * w
    }

    fn memory_base(&self) -> (usize, usize) {
        (
            self.memory[1] >> self.memory_upsamples,
            self.memory[2] >> self.memory_upsamples,
        )
    }

    /// Output channels of memory-writer layer `i` (the last one emits memory channels).
    fn memory_channels(&self, i: usize) -> usize {
        if i == self.memory_upsamples {
            self.memory[0]
        } else {
            (self.memory_base_channels >> i).max(self.memory[0])
        }
    }

    fn decoder_base(&self) -> (usize, usize) {
        (
            self.image[1] >> self.decoder_upsamples,
            self.image[2] >> self.decoder_upsamples,
        )
    }

    fn decoder_channels(&self, i: usize) -> usize {
        if i == self.decoder_upsamples {
            self.image[0]
        } else {
            (self.decoder_base_channels >> i).max(self.image[0])
        }
    }

    /// Scalar count of the memory writer plus readout prior.
    pub fn memory_path_params(&self) -> usize {
        let (bh, bw) = self.memory_base();
        let mut n = self.embed_dim * self.memory_channels(0) * bh * bw + self.memory_channels(0) * bh * bw;
        for i in 0..self.memory_upsamples {
            let (ci, co) = (self.memory_channels(i), self.memory_channels(i + 1));
            n += ci * co * 16 + co;
        }
        let cin = self.reads * self.memory[0];
        n += self.prior_channels[0] * cin * 9 + self.prior_channels[0];
        n += self.prior_channels[1] * self.prior_channels[0] * 9 + self.prior_channels[1];
        n += self.prior_flat() * 2 * self.latent + 2 * self.latent;
        n
    }

    /// Hidden width that brings the no-memory head closest to the memory path's size.
    pub fn ablation_hidden(&self) -> usize {
        let per_unit = self.embed_dim + 1 + 2 * self.latent;
        let target = self.memory_path_params().saturating_sub(2 * self.latent);
        ((target as f64 / per_unit as f64).round() as usize).max(1)
    }
}

/// An exchangeable set of `T` images written into one memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `[T, channels, height, width]`.
    pub images: Tensor,
    pub dataset_ids: Vec<usize>,
}

impl Episode {
    pub fn new(images: Tensor, dataset_ids: Vec<usize>) -> Result<Self, ModelError> {
        if images.rank() != 4 || images.shape()[0] == 0 {
            return Err(ModelError::EmptyEpisode);
        }
        if dataset_ids.len() != images.shape()[0] {
            return Err(ModelError::Config(format!(
                "{} dataset ids for {} images",
                dataset_ids.len(),
                images.shape()[0]
            )));
        }
        Ok(Episode { images, dataset_ids })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, t: usize) -> Tensor {
        let s = self.images.shape();
        self.images.rows(t, t + 1).reshape(&s[1..]).expect("image shape")
    }

    /// Episode with its images reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let images: Vec<Tensor> = perm.iter().map(|&i| self.image(i)).collect();
        Episode {
            images: Tensor::stack(&images).expect("same shapes"),
            dataset_ids: perm.iter().map(|&i| self.dataset_ids[i]).collect(),
        }
    }
}

/// Deterministic memory written from an episode, `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub grid: Tensor,
}

/// Parameter name prefixes of the memory path (writer, readout prior, key head).
pub const MEMORY_PREFIXES: [&str; 3] = ["mem.", "prior.", "key."];
pub const ABLATION_PREFIX: &str = "abl.";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn dense(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    let n = tape.shape(y)[0];
    let bb = tape.broadcast(bias, n)?;
    Ok(tape.add(y, bb)?)
}

fn conv(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(bias), 2, 1)?)
}

fn upconv(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    Ok(tape.conv_transpose2d(x, w, Some(bias), 2, 1)?)
}

impl Model {
    /// Randomly initialized model; every Gaussian head starts at
    /// `N(0, exp(init_log_std)^2)` regardless of its input.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let relu_gain = 2f64.sqrt();
        let add = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, shape: &[usize], init: Init| {
            p.insert(name, init_tensor(rng, shape, init));
        };

        let mut cin = c.image[0];
        for (i, &co) in c.enc_channels.iter().enumerate() {
            add(&mut p, &mut rng, format!("enc.conv{i}.w"), &[co, cin, 3, 3], Init::Scaled { fan_in: cin * 9, gain: relu_gain });
            add(&mut p, &mut rng, format!("enc.conv{i}.b"), &[co], Init::Zeros);
            cin = co;
        }
        let flat = c.encoder_flat();
        add(&mut p, &mut rng, "enc.fc.w".into(), &[flat, c.embed_dim], Init::Scaled { fan_in: flat, gain: relu_gain });
        add(&mut p, &mut rng, "enc.fc.b".into(), &[c.embed_dim], Init::Zeros);

        let gaussian_head = |p: &mut ParamStore, name: &str, fan_in: usize, dim: usize| {
            p.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, 2 * dim]));
            let mut bias = vec![0.0; 2 * dim];
            bias[dim..].iter_mut().for_each(|v| *v = c.init_log_std);
            p.insert(format!("{name}.b"), Tensor::from_vec(bias));
        };
        gaussian_head(&mut p, "post", c.embed_dim, c.latent);

        if c.ablation {
            let h = c.ablation_hidden();
            add(&mut p, &mut rng, "abl.fc1.w".into(), &[c.embed_dim, h], Init::Scaled { fan_in: c.embed_dim, gain: relu_gain });
            add(&mut p, &mut rng, "abl.fc1.b".into(), &[h], Init::Zeros);
            gaussian_head(&mut p, "abl.fc2", h, c.latent);
        } else {
            gaussian_head(&mut p, "key", c.embed_dim, 3 * c.reads);
            let (bh, bw) = c.memory_base();
            let c0 = c.memory_channels(0);
            add(&mut p, &mut rng, "mem.fc.w".into(), &[c.embed_dim, c0 * bh * bw], Init::Scaled { fan_in: c.embed_dim, gain: relu_gain });
            add(&mut p, &mut rng, "mem.fc.b".into(), &[c0 * bh * bw], Init::Zeros);
            for i in 0..c.memory_upsamples {
                let (ci, co) = (c.memory_channels(i), c.memory_channels(i + 1));
                let gain = if i + 1 == c.memory_upsamples { 1.0 } else { relu_gain };
                add(&mut p, &mut rng, format!("mem.up{i}.w"), &[ci, co, 4, 4], Init::Scaled { fan_in: ci * 4, gain });
                add(&mut p, &mut rng, format!("mem.up{i}.b"), &[co], Init::Zeros);
            }
            let mut cin = c.reads * c.memory[0];
            for (i, &co) in c.prior_channels.iter().enumerate() {
                add(&mut p, &mut rng, format!("prior.conv{i}.w"), &[co, cin, 3, 3], Init::Scaled { fan_in: cin * 9, gain: relu_gain });
                add(&mut p, &mut rng, format!("prior.conv{i}.b"), &[co], Init::Zeros);
                cin = co;
            }
            gaussian_head(&mut p, "prior.fc", c.prior_flat(), c.latent);
        }

        let (bh, bw) = c.decoder_base();
        let d0 = if c.decoder_upsamples == 0 { c.image[0] } else { c.decoder_channels(0) };
        let gain = if c.decoder_upsamples == 0 { 1.0 } else { relu_gain };
        add(&mut p, &mut rng, "dec.fc.w".into(), &[c.latent, d0 * bh * bw], Init::Scaled { fan_in: c.latent, gain });
        add(&mut p, &mut rng, "dec.fc.b".into(), &[d0 * bh * bw], Init::Zeros);
        for i in 0..c.decoder_upsamples {
            let (ci, co) = (c.decoder_channels(i), c.decoder_channels(i + 1));
            let gain = if i + 1 == c.decoder_upsamples { 1.0 } else { relu_gain };
            add(&mut p, &mut rng, format!("dec.up{i}.w"), &[ci, co, 4, 4], Init::Scaled { fan_in: ci * 4, gain });
            add(&mut p, &mut rng, format!("dec.up{i}.b"), &[co], Init::Zeros);
        }
        Ok(Model { config, params: p })
    }

    /// Checks that `images` is `[n, c, h, w]` with the configured image shape.
    pub fn check_images(&self, images: &Tensor) -> Result<(), ModelError> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.config.image || s[0] == 0 {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.config.image);
            return Err(ModelError::ImageShape {
                expected,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Per-image embeddings `[n, embed_dim]` of `n = b * episode_len` images.
    pub fn encode_var(&self, tape: &mut Tape, b: &Bound, x: Var, episode_len: usize) -> Result<Var, ModelError> {
        let mut h = x;
        for i in 0..3 {
            h = conv(tape, b, &format!("enc.conv{i}"), h)?;
            h = tape.relu(h)?;
            if self.config.tsm && i < 2 {
                h = tsm_shift_var(tape, h, episode_len)?;
            }
        }
        let n = tape.shape(h)[0];
        let flat = tape.reshape(h, &[n, self.config.encoder_flat()])?;
        dense(tape, b, "enc.fc", flat)
    }

    /// Memory `[b, c, h, w]` from the mean embedding of each episode.
    pub fn write_memory_var(&self, tape: &mut Tape, b: &Bound, e: Var, episode_len: usize) -> Result<Var, ModelError> {
        let c = &self.config;
        let pooled = self.pool(tape, e, episode_len)?;
        let nb = tape.shape(pooled)[0];
        let h = dense(tape, b, "mem.fc", pooled)?;
        let (bh, bw) = c.memory_base();
        let mut h = if c.memory_upsamples == 0 {
            h
        } else {
            tape.relu(h)?
        };
        h = tape.reshape(h, &[nb, c.memory_channels(0), bh, bw])?;
        if c.memory_upsamples == 0 {
            // a single dense layer emits the memory directly
            return Ok(tape.reshape(h, &[nb, c.memory[0], c.memory[1], c.memory[2]])?);
        }
        for i in 0..c.memory_upsamples {
            h = upconv(tape, b, &format!("mem.up{i}"), h)?;
            if i + 1 < c.memory_upsamples {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn pool(&self, tape: &mut Tape, e: Var, episode_len: usize) -> Result<Var, ModelError> {
        let [n, d]: [usize; 2] = tape.shape(e).try_into().map_err(|_| {
            ModelError::Config(format!("embeddings must be rank 2, got {:?}", tape.shape(e)))
        })?;
        if episode_len == 0 || n % episode_len != 0 {
            return Err(ModelError::EmptyEpisode);
        }
        let grouped = tape.reshape(e, &[n / episode_len, episode_len, d])?;
        Ok(tape.mean(grouped, &[1])?)
    }

    /// `q(Y | X)` over `[n, 3K]` raw keys; key `k` occupies columns `3k..3k+3`.
    pub fn key_posterior_var(&self, tape: &mut Tape, b: &Bound, e: Var) -> Result<DiagGaussian, ModelError> {
        let raw = dense(tape, b, "key", e)?;
        Ok(DiagGaussian::from_head(tape, raw)?)
    }

    /// `q(Z | X)` over `[n, L]`.
    pub fn latent_posterior_var(&self, tape: &mut Tape, b: &Bound, e: Var) -> Result<DiagGaussian, ModelError> {
        let raw = dense(tape, b, "post", e)?;
        Ok(DiagGaussian::from_head(tape, raw)?)
    }

    /// Reads `K` traces per image: `keys` is `[n, 3K]` raw keys and image `i`
    /// addresses memory `mem_of[i]`. Returns `[n, K * c_mem, h_t, w_t]`.
    pub fn read_var(&self, tape: &mut Tape, memories: Var, keys: Var, mem_of: &[usize]) -> Result<Var, ModelError> {
        let c = &self.config;
        let n = tape.shape(keys)[0];
        let flat_keys = tape.reshape(keys, &[n * c.reads, 3])?;
        let index: Vec<usize> = mem_of
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, c.reads))
            .collect();
        let traces = stn::read_traces_var(tape, memories, flat_keys, &index, c.trace)?;
        Ok(tape.reshape(traces, &[n, c.reads * c.memory[0], c.trace.0, c.trace.1])?)
    }

    /// `p(Z | traces)` from channel-stacked traces `[n, K * c_mem, h_t, w_t]`.
    pub fn readout_prior_var(&self, tape: &mut Tape, b: &Bound, traces: Var) -> Result<DiagGaussian, ModelError> {
        let c = &self.config;
        let s = tape.shape(traces).to_vec();
        let expected_channels = c.reads * c.memory[0];
        if s.len() != 4 || s[1] != expected_channels {
            return Err(ModelError::TraceCount {
                expected: c.reads,
                got: s.get(1).copied().unwrap_or(0) / c.memory[0],
            });
        }
        let mut h = traces;
        for i in 0..2 {
            h = conv(tape, b, &format!("prior.conv{i}"), h)?;
            h = tape.relu(h)?;
        }
        let flat = tape.reshape(h, &[s[0], c.prior_flat()])?;
        let raw = dense(tape, b, "prior.fc", flat)?;
        Ok(DiagGaussian::from_head(tape, raw)?)
    }

    /// No-memory prior `p(Z | E)`: a dense head on each episode's pooled
    /// embedding, repeated for every image of that episode.
    pub fn ablation_prior_var(&self, tape: &mut Tape, b: &Bound, e: Var, episode_len: usize) -> Result<DiagGaussian, ModelError> {
        let pooled = self.pool(tape, e, episode_len)?;
        let nb = tape.shape(pooled)[0];
        let h = dense(tape, b, "abl.fc1", pooled)?;
        let h = tape.relu(h)?;
        let raw = dense(tape, b, "abl.fc2", h)?;
        let n = nb * episode_len;
        let mut expand = vec![0.0; n * nb];
        for i in 0..n {
            expand[i * nb + i / episode_len] = 1.0;
        }
        let expand = tape.constant(Tensor::new(&[n, nb], expand)?)?;
        let raw = tape.matmul(expand, raw)?;
        Ok(DiagGaussian::from_head(tape, raw)?)
    }

    /// Decoder output `[n, c, h, w]`: Bernoulli logits or Gaussian means.
    pub fn decode_var(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var, ModelError> {
        let c = &self.config;
        let n = tape.shape(z)[0];
        let h = dense(tape, b, "dec.fc", z)?;
        if c.decoder_upsamples == 0 {
            return Ok(tape.reshape(h, &[n, c.image[0], c.image[1], c.image[2]])?);
        }
        let (bh, bw) = c.decoder_base();
        let h = tape.relu(h)?;
        let mut h = tape.reshape(h, &[n, c.decoder_channels(0), bh, bw])?;
        for i in 0..c.decoder_upsamples {
            h = upconv(tape, b, &format!("dec.up{i}"), h)?;
            if i + 1 < c.decoder_upsamples {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Maps decoder output to pixel means (sigmoid for Bernoulli logits).
    pub fn output_mean(&self, tape: &mut Tape, out: Var) -> Result<Var, ModelError> {
        Ok(match self.config.likelihood {
            Likelihood::Bernoulli => tape.sigmoid(out)?,
            Likelihood::Gaussian { .. } => out,
        })
    }

    // Tensor-level conveniences; each evaluates on a private tape.

    /// Per-image embeddings `[T, embed_dim]` of an episode.
    pub fn encode(&self, episode: &Episode) -> Result<Tensor, ModelError> {
        self.check_images(&episode.images)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape)?;
        let x = tape.constant(episode.images.clone())?;
        let e = self.encode_var(&mut tape, &b, x, episode.len())?;
        Ok(tape.value(e).clone())
    }

    /// Memory written from per-image embeddings `[T, embed_dim]` of one episode.
    pub fn write_memory(&self, embeddings: &Tensor) -> Result<Memory, ModelError> {
        if self.config.ablation {
            return Err(ModelError::Config("the no-memory variant has no memory writer".into()));
        }
        let t = embeddings.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape)?;
        let e = tape.constant(embeddings.clone())?;
        let m = self.write_memory_var(&mut tape, &b, e, t)?;
        let grid = tape.value(m).clone();
        Ok(Memory {
            grid: grid.reshape(&grid.shape()[1..])?,
        })
    }

    /// Encodes `episode` and writes its memory.
    pub fn memory_for(&self, episode: &Episode) -> Result<Memory, ModelError> {
        let e = self.encode(episode)?;
        self.write_memory(&e)
    }

    /// Readout prior `(mean, log_std)` for one sample's traces.
    pub fn readout_prior(&self, traces: &TraceSet) -> Result<(Tensor, Tensor), ModelError> {
        if traces.traces.len() != self.config.reads {
            return Err(ModelError::TraceCount {
                expected: self.config.reads,
                got: traces.traces.len(),
            });
        }
        let stacked = Tensor::stack(&traces.traces)?;
        let s = stacked.shape().to_vec();
        let stacked = stacked.reshape(&[1, s[0] * s[1], s[2], s[3]])?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape)?;
        let t = tape.constant(stacked)?;
        let d = self.readout_prior_var(&mut tape, &b, t)?;
        Ok((tape.value(d.mean).clone(), tape.value(d.log_std).clone()))
    }

    /// Decoder output for latent rows `z` `[n, L]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape)?;
        let zv = tape.constant(z.clone())?;
        let out = self.decode_var(&mut tape, &b, zv)?;
        Ok(tape.value(out).clone())
    }
}
