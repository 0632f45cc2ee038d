//! The `kpp` command line: training runs, generation, denoising, ablation
//! sweeps and evaluation, each writing into its own run directory.

mod args;
mod config;
mod data_source;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use kpp_core::data::{tile, write_pgm, DataError, EpisodeSampler, NoiseKind, Split};
use kpp_core::diffcore::Tensor;
use kpp_core::model::{load_checkpoint, save_checkpoint, CheckpointError, Likelihood, Model, ModelConfig};
use kpp_core::objective::{denoise, generate, perturbed_generate, Generation, ObjectiveError};
use kpp_core::trainer::{
    eval_conditional_with, threads_from_env, train_with, MetricsRow, Schedule, TrainConfig, TrainError,
    TrainOutcome, METRICS_HEADER,
};

pub use args::{AblateArgs, Axis, BinarizeArg, Cli, Command, DataArgs, DenoiseArgs, EvalArgs, GenerateArgs, ModelArgs, TrainArgs};
pub use config::{expand_config, parse_config};
pub use data_source::load_data;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(TrainError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_ERROR,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { epoch, reason, .. } => CliError::Diverged { epoch, reason },
            other => CliError::Train(other),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let command_line = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    match dispatch(cli.command, &command_line) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, command_line: &str) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(&a, command_line),
        Command::Generate(a) => cmd_generate(&a, command_line),
        Command::Denoise(a) => cmd_denoise(&a, command_line),
        Command::Ablate(a) => cmd_ablate(&a, command_line),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `manifest.txt` into `out`, creating the directory.
pub fn write_manifest(out: &Path, command_line: &str, seed: u64, extra: &[(&str, String)], config: &dyn std::fmt::Debug) -> Result<(), CliError> {
    create_dir(out)?;
    let mut text = String::new();
    let _ = writeln!(text, "command = {command_line}");
    let _ = writeln!(text, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "seed = {seed}");
    let _ = writeln!(text, "out = {}", out.display());
    for (k, v) in extra {
        let _ = writeln!(text, "{k} = {v}");
    }
    let _ = writeln!(text, "\n[config]\n{config:#?}");
    write_file(&out.join("manifest.txt"), text.as_bytes())
}

fn parse_likelihood(s: &str) -> Result<Likelihood, CliError> {
    if s == "bernoulli" {
        return Ok(Likelihood::Bernoulli);
    }
    let sigma = s
        .strip_prefix("gaussian:")
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .ok_or_else(|| CliError::Usage(format!("likelihood must be `bernoulli` or `gaussian:SIGMA`, got `{s}`")))?;
    Ok(Likelihood::Gaussian { sigma })
}

/// Training configuration described by the shared model flags.
pub fn train_config(m: &ModelArgs, image: [usize; 3], seed: u64, ablation: bool) -> Result<TrainConfig, CliError> {
    let schedule: Schedule = m.schedule.parse().map_err(CliError::Usage)?;
    if m.memory_size < 16 || !m.memory_size.is_power_of_two() {
        return Err(CliError::Usage(format!(
            "memory size must be a power of two of at least 16, got {}",
            m.memory_size
        )));
    }
    let memory_upsamples = (m.memory_size / 4).trailing_zeros() as usize;
    let model = ModelConfig {
        image,
        latent: m.l,
        reads: m.k,
        memory: [m.memory_channels, m.memory_size, m.memory_size],
        memory_upsamples,
        trace: (m.trace_size, m.trace_size),
        tsm: !m.no_tsm,
        likelihood: parse_likelihood(&m.likelihood)?,
        ablation,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        model,
        episode_len: m.t,
        epochs: m.epochs,
        batch_episodes: m.batch,
        steps_per_epoch: m.steps_per_epoch,
        lr: m.lr,
        schedule,
        warmup_epochs: m.warmup,
        weight_decay: m.weight_decay,
        seed,
        threads: threads_from_env(),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

/// Runs training into `out`: streams `metrics.csv`, then writes `best.ckpt` and `last.ckpt`.
pub fn run_training(
    config: &TrainConfig,
    data: &DataArgs,
    out: &Path,
    wall_clock: bool,
) -> Result<TrainOutcome, CliError> {
    let (train_set, test_set) = load_data(data, config.model.image[1])?;
    let metrics_path = out.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{METRICS_HEADER}").map_err(|e| CliError::io(&metrics_path, e))?;
    let mut io_error = None;
    let result = train_with(config, &train_set, &test_set, |row| {
        let row = if wall_clock { row.clone() } else { row.without_wall_clock() };
        if let Err(e) = writeln!(w, "{}", row.to_csv()).and_then(|_| w.flush()) {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(CliError::io(&metrics_path, e));
    }
    let outcome = result?;
    save_checkpoint(out.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(out.join("last.ckpt"), &outcome.last)?;
    Ok(outcome)
}

fn default_out(kind: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{kind}-seed{seed}"))
}

fn cmd_train(a: &TrainArgs, command_line: &str) -> Result<(), CliError> {
    let image = [1, a.data.image_size, a.data.image_size];
    let image = data_source::image_shape(&a.data, image)?;
    let config = train_config(&a.model, image, a.seed, a.no_memory)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("train", a.seed));
    let arm = if a.no_memory { "no-memory" } else { "memory" };
    write_manifest(&out, command_line, a.seed, &[("arm", arm.to_string())], a)?;
    let outcome = run_training(&config, &a.data, &out, a.wall_clock)?;
    let best = outcome
        .rows(Split::Test)
        .find(|r| r.epoch == outcome.best_epoch)
        .expect("best epoch has a test row");
    println!(
        "best test epoch {}: negative elbo {:.4} nats/image; outputs in {}",
        outcome.best_epoch,
        best.neg_elbo(),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Ok(load_checkpoint(path)?)
}

fn image_at(images: &Tensor, i: usize) -> Tensor {
    let s = images.shape();
    images.rows(i, i + 1).reshape(&s[1..]).expect("image shape")
}

fn keys_csv(rows: &[(usize, &str, &Generation, usize)]) -> String {
    let mut text = String::from("sample,kind,read,s,x,y\n");
    for &(sample, kind, g, i) in rows {
        for (read, k) in g.key_triples(i).iter().enumerate() {
            let _ = writeln!(text, "{sample},{kind},{read},{},{},{}", k.raw[0], k.raw[1], k.raw[2]);
        }
    }
    text
}

fn cmd_generate(a: &GenerateArgs, command_line: &str) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("generate", a.seed));
    write_manifest(&out, command_line, a.seed, &[], a)?;
    let (_, test_set) = load_data(&a.data, model.config.image[1])?;
    let episode = EpisodeSampler::new(test_set.len(), a.t, a.seed)?.next_episode(&test_set);
    let memory = model.memory_for(&episode).map_err(ObjectiveError::from)?;

    let mut images = Vec::new();
    let keys = match a.perturb {
        None => {
            let g = generate(&model, &memory, a.n, a.seed)?;
            for i in 0..a.n {
                images.push(image_at(&g.images, i));
            }
            keys_csv(&(0..a.n).map(|i| (i, "prior", &g, i)).collect::<Vec<_>>())
        }
        Some(std) => {
            let base = generate(&model, &memory, 1, a.seed)?;
            let p = perturbed_generate(&model, &memory, &base.key_triples(0), std, a.n, a.seed.wrapping_add(1))?;
            write_pgm(out.join("base.pgm"), &image_at(&base.images, 0))?;
            images.push(image_at(&base.images, 0));
            let mut rows = vec![(0, "base", &base, 0)];
            for i in 0..a.n {
                images.push(image_at(&p.images, i));
                rows.push((i + 1, "perturbed", &p, i));
            }
            keys_csv(&rows)
        }
    };
    let singles = if a.perturb.is_some() { &images[1..] } else { &images[..] };
    for (i, img) in singles.iter().enumerate() {
        write_pgm(out.join(format!("sample_{i:03}.pgm")), img)?;
    }
    let grid = tile(&Tensor::stack(&images).expect("same shapes"), a.grid_cols.max(1))?;
    write_pgm(out.join("grid.pgm"), &grid)?;
    write_pgm(
        out.join("episode.pgm"),
        &tile(&episode.images, a.grid_cols.max(1))?,
    )?;
    write_file(&out.join("keys.csv"), keys.as_bytes())?;
    println!("wrote {} generations to {}", singles.len(), out.display());
    Ok(())
}

/// Default corruption strengths when `--noise` names only the kind.
pub fn parse_noise(s: &str) -> Result<NoiseKind, CliError> {
    let full = match s {
        "salt_pepper" => "salt_pepper:0.1",
        "speckle" => "speckle:0.3",
        "poisson" => "poisson:30",
        other => other,
    };
    full.parse::<NoiseKind>()
        .map_err(|e| CliError::Usage(format!("--noise: {e}")))
}

fn cmd_denoise(a: &DenoiseArgs, command_line: &str) -> Result<(), CliError> {
    let noise = parse_noise(&a.noise)?;
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let model = load_model(&a.ckpt)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("denoise", a.seed));
    write_manifest(&out, command_line, a.seed, &[("noise", noise.to_string())], a)?;
    let (_, test_set) = load_data(&a.data, model.config.image[1])?;
    let episodes = test_set.partition(a.t)?;
    if a.n > episodes.len() * a.t {
        return Err(CliError::Usage(format!(
            "--n {} exceeds the {} test images available in whole episodes",
            a.n,
            episodes.len() * a.t
        )));
    }
    let mut csv = String::from("image_id,step,l2_error\n");
    let mut memories = Vec::new();
    for (i, j) in (0..a.n).map(|i| (i, i / a.t)) {
        if memories.len() <= j {
            memories.push(model.memory_for(&episodes[j]).map_err(ObjectiveError::from)?);
        }
        let clean = episodes[j].image(i % a.t);
        let r = denoise(&model, &memories[j], &clean, noise, a.steps, a.seed.wrapping_add(i as u64))?;
        write_pgm(out.join(format!("img{i:03}_clean.pgm")), &clean)?;
        write_pgm(out.join(format!("img{i:03}_noisy.pgm")), &r.noisy)?;
        for (s, x) in r.trajectory.iter().enumerate() {
            write_pgm(out.join(format!("img{i:03}_step{:02}.pgm", s + 1)), x)?;
        }
        for (s, e) in r.errors.iter().enumerate() {
            let _ = writeln!(csv, "{i},{s},{e}");
        }
    }
    write_file(&out.join("errors.csv"), csv.as_bytes())?;
    println!("denoised {} images with {noise}; outputs in {}", a.n, out.display());
    Ok(())
}

/// One sweep cell: the axis value as written to the CSV and the settings it implies.
fn ablation_cells(a: &AblateArgs) -> Result<Vec<(String, ModelArgs, bool)>, CliError> {
    let values: Vec<&str> = a.values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage("--values must list at least one value".into()));
    }
    values
        .into_iter()
        .map(|v| {
            let mut m = a.model.clone();
            let mut ablation = false;
            match a.axis {
                Axis::T | Axis::K => {
                    let n: usize = v
                        .parse()
                        .map_err(|_| CliError::Usage(format!("`{v}` is not a positive integer")))?;
                    if a.axis == Axis::T {
                        m.t = n;
                    } else {
                        m.k = n;
                    }
                }
                Axis::Memory => match v {
                    "on" => {}
                    "off" => ablation = true,
                    other => return Err(CliError::Usage(format!("memory values are on/off, got `{other}`"))),
                },
            }
            Ok((v.to_string(), m, ablation))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let seeds = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<u64>().map_err(|_| CliError::Usage(format!("bad seed `{v}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds must list at least one seed".into()));
    }
    Ok(seeds)
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::T => "T",
        Axis::K => "K",
        Axis::Memory => "memory",
    }
}

pub const ABLATION_HEADER: &str = "axis,value,seed,test_elbo,test_kl";

fn cmd_ablate(a: &AblateArgs, command_line: &str) -> Result<(), CliError> {
    let cells = ablation_cells(a)?;
    let seeds = parse_seeds(&a.seeds)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("ablate-{}", axis_name(a.axis))));
    write_manifest(&out, command_line, seeds[0], &[("seeds", a.seeds.clone())], a)?;
    let image = data_source::image_shape(&a.data, [1, a.data.image_size, a.data.image_size])?;
    let configs = cells
        .iter()
        .map(|(_, m, abl)| seeds.iter().map(|&s| train_config(m, image, s, *abl)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;

    let csv_path = out.join("ablation.csv");
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    let mut diverged = None;
    for ((value, _, _), configs) in cells.iter().zip(&configs) {
        for config in configs {
            let name = format!("{}-{value}-seed{}", axis_name(a.axis), config.seed);
            let cell_out = out.join("cells").join(name);
            write_manifest(&cell_out, command_line, config.seed, &[("cell", value.clone())], config)?;
            let row = match run_training(config, &a.data, &cell_out, false) {
                Ok(o) => o.rows(Split::Test).last().cloned().expect("test rows"),
                Err(e @ CliError::Diverged { .. }) => {
                    eprintln!("cell {value} seed {}: {e}", config.seed);
                    diverged.get_or_insert(e);
                    let _ = writeln!(csv, "{},{value},{},NaN,NaN", axis_name(a.axis), config.seed);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let _ = writeln!(
                csv,
                "{},{value},{},{},{}",
                axis_name(a.axis),
                config.seed,
                row.elbo,
                row.kl_z + row.kl_y
            );
            write_file(&csv_path, csv.as_bytes())?;
        }
    }
    write_file(&csv_path, csv.as_bytes())?;
    println!("wrote {}", csv_path.display());
    match diverged {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Formats the line printed by `kpp eval`.
pub fn eval_report(row: &MetricsRow, config: &ModelConfig) -> String {
    let summary = match config.likelihood {
        Likelihood::Bernoulli => format!("negative elbo {:.6} nats/image", row.neg_elbo()),
        Likelihood::Gaussian { .. } => format!(
            "negative elbo {:.6} bits/dim ({:.6} nats/image)",
            row.bits_per_dim(config.pixels()),
            row.neg_elbo()
        ),
    };
    format!("{METRICS_HEADER}\n{}\n{summary}", row.to_csv())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let (_, test_set) = load_data(&a.data, model.config.image[1])?;
    let (row, _) = eval_conditional_with(&model, &test_set, a.t, a.seed, threads_from_env())?;
    println!("{}", eval_report(&row, &model.config));
    Ok(())
}
