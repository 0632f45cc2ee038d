//! Episodic training: AdamW, the learning-rate schedule, conditional
//! evaluation and metric rows.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset, EpisodeSampler, Split};
use crate::diffcore::Tensor;
use crate::model::{Episode, Likelihood, Model, ModelConfig, ModelError, ParamStore};
use crate::objective::{elbo_batch, loss_and_grads, ElboBreakdown, ObjectiveError};

const NOISE_SALT: u64 = 0x6b70_705f_6e6f_6973;
const EVAL_SALT: u64 = 0x6b70_705f_6576_616c;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Rows logged before the abort.
        history: Vec<MetricsRow>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(format!("unknown schedule `{other}`")),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Architecture, including reads `K`, latent width `L`, memory size,
    /// likelihood and the no-memory flag.
    pub model: ModelConfig,
    /// Episode length `T`.
    pub episode_len: usize,
    pub epochs: usize,
    /// Episodes per optimizer step.
    pub batch_episodes: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training images.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Worker threads for per-episode gradient and evaluation work.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            episode_len: 8,
            epochs: 30,
            batch_episodes: 4,
            steps_per_epoch: None,
            lr: 1e-3,
            schedule: Schedule::Cosine,
            warmup_epochs: 10,
            weight_decay: 1e-3,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.episode_len == 0 {
            return err("T must be at least 1");
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_episodes == 0 {
            return err("batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight decay must be non-negative");
        }
        if self.steps_per_epoch == Some(0) {
            return err("steps per epoch must be at least 1");
        }
        self.model.validate()?;
        Ok(())
    }

    fn steps_for(&self, train_len: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| train_len.div_ceil(self.episode_len * self.batch_episodes).max(1))
    }
}

/// Learning rate for `epoch`: a linear ramp `lr * (epoch + 1) / warmup` over
/// the warmup epochs, then either constant `lr` or a cosine decay reaching 0
/// at the final epoch.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let lr = config.lr;
    let w = config.warmup_epochs;
    if epoch < w {
        return lr * (epoch + 1) as f64 / w as f64;
    }
    match config.schedule {
        Schedule::Constant => lr,
        Schedule::Cosine => {
            let span = config.epochs.saturating_sub(w);
            let t = if span <= 1 {
                1.0
            } else {
                (epoch - w) as f64 / (span - 1) as f64
            };
            lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            ..AdamState::default()
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

/// One AdamW update. Weight decay is decoupled and skips bias parameters.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let decay = if is_bias(name) { 0.0 } else { weight_decay };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * pd[i]);
        }
    }
}

/// One line of the metrics log. Values are in nats per image.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub elbo: f64,
    pub recon_ll: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "epoch,split,elbo,recon_ll,kl_z,kl_y,wall_seconds,seed";

impl MetricsRow {
    fn from_breakdown(b: &ElboBreakdown, epoch: usize, split: Split, seed: u64) -> Self {
        MetricsRow {
            epoch,
            split,
            elbo: b.elbo,
            recon_ll: b.recon_ll,
            kl_z: b.kl_z,
            kl_y: b.kl_y,
            wall_seconds: 0.0,
            seed,
        }
    }

    /// Negative bound, the reported conditional likelihood.
    pub fn neg_elbo(&self) -> f64 {
        -self.elbo
    }

    /// Negative bound in bits per pixel dimension.
    pub fn bits_per_dim(&self, pixels: usize) -> f64 {
        self.neg_elbo() / (std::f64::consts::LN_2 * pixels as f64)
    }

    /// Same row with `wall_seconds` cleared, for byte-stable logs.
    pub fn without_wall_clock(&self) -> Self {
        MetricsRow {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.split, self.elbo, self.recon_ll, self.kl_z, self.kl_y, self.wall_seconds, self.seed
        )
    }
}

pub fn write_metrics_csv(w: &mut impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

fn merge(parts: Vec<ElboBreakdown>) -> ElboBreakdown {
    let per_image: Vec<_> = parts.into_iter().flat_map(|b| b.per_image).collect();
    let n = per_image.len() as f64;
    ElboBreakdown {
        recon_ll: per_image.iter().map(|t| t.recon_ll).sum::<f64>() / n,
        kl_z: per_image.iter().map(|t| t.kl_z).sum::<f64>() / n,
        kl_y: per_image.iter().map(|t| t.kl_y).sum::<f64>() / n,
        elbo: per_image.iter().map(|t| t.elbo).sum::<f64>() / n,
        per_image,
    }
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn episode_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

/// Full bound for every image of `episodes`, with noise for episode `i` drawn from `(seed, i)`.
pub fn evaluate_episodes(
    model: &Model,
    episodes: &[Episode],
    seed: u64,
    threads: usize,
) -> Result<ElboBreakdown, ObjectiveError> {
    let parts = parallel_map(episodes, threads, |i, ep| {
        let mut rng = episode_rng(seed, EVAL_SALT, i as u64);
        elbo_batch(model, std::slice::from_ref(ep), &mut rng)
    });
    Ok(merge(parts.into_iter().collect::<Result<Vec<_>, _>>()?))
}

/// Conditional bound on a held-out split: each consecutive run of `t` images
/// writes its own memory and is scored against it.
pub fn eval_conditional(model: &Model, dataset: &Dataset, t: usize, seed: u64) -> Result<MetricsRow, TrainError> {
    eval_conditional_with(model, dataset, t, seed, 1).map(|(row, _)| row)
}

/// [`eval_conditional`] on `threads` workers, also returning the full breakdown.
pub fn eval_conditional_with(
    model: &Model,
    dataset: &Dataset,
    t: usize,
    seed: u64,
    threads: usize,
) -> Result<(MetricsRow, ElboBreakdown), TrainError> {
    let episodes = dataset.partition(t)?;
    let b = evaluate_episodes(model, &episodes, seed, threads)?;
    Ok((MetricsRow::from_breakdown(&b, 0, dataset.split, seed), b))
}

/// Mean loss and gradient over a batch of episodes, one tape per episode.
fn batch_gradients(
    model: &Model,
    episodes: &[Episode],
    seed: u64,
    first_index: u64,
    threads: usize,
) -> Result<(ElboBreakdown, BTreeMap<String, Tensor>), ObjectiveError> {
    let parts = parallel_map(episodes, threads, |i, ep| {
        let mut rng = episode_rng(seed, NOISE_SALT, first_index + i as u64);
        loss_and_grads(model, std::slice::from_ref(ep), &mut rng)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut breakdowns = Vec::with_capacity(parts.len());
    for (b, grads) in parts {
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, v)| *a += v),
                None => {
                    total.insert(name, g);
                }
            }
        }
        breakdowns.push(b);
    }
    for g in total.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((merge(breakdowns), total))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: Model,
    /// Parameters from the epoch with the best test bound.
    pub best: Model,
    pub best_epoch: usize,
    /// Test row of the initial parameters.
    pub initial_test: MetricsRow,
    /// One train and one test row per epoch.
    pub history: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn rows(&self, split: Split) -> impl Iterator<Item = &MetricsRow> {
        self.history.iter().filter(move |r| r.split == split)
    }
}

/// Seed used for every test evaluation during a run with `config.seed`.
pub fn eval_seed(config: &TrainConfig) -> u64 {
    config.seed
}

fn check_divergence(
    neg: f64,
    baseline: f64,
    streak: &mut usize,
) -> Option<String> {
    if !neg.is_finite() {
        return Some(format!("negative elbo is {neg}"));
    }
    if neg - baseline > 9.0 * baseline.abs() {
        *streak += 1;
    } else {
        *streak = 0;
    }
    (*streak >= 3).then(|| {
        format!("negative test elbo {neg:.4} has been worse than 10x the initial {baseline:.4} for 3 epochs")
    })
}

/// Trains on episodes sampled from `train_set`, evaluating on `test_set` after every epoch.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome, TrainError> {
    train_with(config, train_set, test_set, |_| {})
}

/// [`train`] with a callback receiving each logged row.
pub fn train_with(
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    for ds in [train_set, test_set] {
        if ds.image_shape() != config.model.image {
            return Err(TrainError::Config(format!(
                "dataset `{}` has images {:?}, model expects {:?}",
                ds.name,
                ds.image_shape(),
                config.model.image
            )));
        }
    }
    if matches!(config.model.likelihood, Likelihood::Bernoulli) && !train_set.is_binary() {
        return Err(TrainError::Config(
            "Bernoulli likelihood needs binary training data".into(),
        ));
    }
    let mut model = Model::init(config.model.clone(), config.seed)?;
    let mut sampler = EpisodeSampler::new(train_set.len(), config.episode_len, config.seed)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let steps = config.steps_for(train_set.len());
    let test_seed = eval_seed(config);

    let mut initial_test = eval_conditional_with(&model, test_set, config.episode_len, test_seed, config.threads)?.0;
    initial_test.seed = config.seed;
    initial_test.split = Split::Test;
    let baseline = initial_test.neg_elbo();

    let mut history = Vec::with_capacity(2 * config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut streak = 0;
    let start = Instant::now();
    let diverged = |epoch: usize, reason: String, history: &[MetricsRow]| TrainError::Diverged {
        epoch,
        reason,
        history: history.to_vec(),
    };

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let mut parts = Vec::with_capacity(steps);
        for _ in 0..steps {
            let first = sampler.position();
            let episodes: Vec<Episode> = (0..config.batch_episodes)
                .map(|_| sampler.next_episode(train_set))
                .collect();
            let (b, grads) = match batch_gradients(&model, &episodes, config.seed, first, config.threads) {
                Ok(r) => r,
                Err(e @ ObjectiveError::Term { .. }) => {
                    return Err(diverged(epoch + 1, e.to_string(), &history));
                }
                Err(e) => return Err(e.into()),
            };
            adam_step(&mut model.params, &grads, &mut adam, lr, config.weight_decay);
            if !model.params.all_finite() {
                return Err(diverged(epoch + 1, "parameters became non-finite".into(), &history));
            }
            parts.push(b);
        }
        let mut train_row = MetricsRow::from_breakdown(&merge(parts), epoch + 1, Split::Train, config.seed);
        train_row.wall_seconds = start.elapsed().as_secs_f64();
        on_row(&train_row);
        history.push(train_row);

        let test = eval_conditional_with(&model, test_set, config.episode_len, test_seed, config.threads);
        let mut test_row = match test {
            Ok((row, _)) => row,
            Err(TrainError::Objective(e @ ObjectiveError::Term { .. })) => {
                return Err(diverged(epoch + 1, e.to_string(), &history));
            }
            Err(e) => return Err(e),
        };
        test_row.epoch = epoch + 1;
        test_row.split = Split::Test;
        test_row.seed = config.seed;
        test_row.wall_seconds = start.elapsed().as_secs_f64();
        on_row(&test_row);
        history.push(test_row.clone());

        if let Some(reason) = check_divergence(test_row.neg_elbo(), baseline, &mut streak) {
            return Err(diverged(epoch + 1, reason, &history));
        }
        if best.as_ref().is_none_or(|(e, _, _)| test_row.elbo > *e) {
            best = Some((test_row.elbo, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        initial_test,
        history,
    })
}

/// Worker count from `KPP_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("KPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
