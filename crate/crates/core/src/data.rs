//! Datasets, episode sampling and image corruption.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::model::Episode;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad IDX magic {found:#010x} at byte 0 (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("images must be [n, c, h, w], got {0:?}")]
    Shape(Vec<usize>),
    #[error("{0} labels for {1} images")]
    LabelCount(usize, usize),
    #[error("invalid noise parameter: {0}")]
    Noise(String),
    #[error("episode length {t} exceeds dataset size {n}")]
    EpisodeTooLong { t: usize, n: usize },
    #[error("image size {h}x{w} below the 8x8 minimum")]
    TooSmall { h: usize, w: usize },
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `[n, c, h, w]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u8>>,
    pub split: Split,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, split: Split, name: impl Into<String>) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Shape(images.shape().to_vec()));
        }
        if let Some((index, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        Ok(Dataset {
            images,
            labels: None,
            split,
            name: name.into(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self, DataError> {
        if labels.len() != self.len() {
            return Err(DataError::LabelCount(labels.len(), self.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images
            .rows(i, i + 1)
            .reshape(&self.image_shape())
            .expect("image shape")
    }

    pub fn is_binary(&self) -> bool {
        self.images.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Episode made of the given dataset indices, in order.
    pub fn episode(&self, indices: &[usize]) -> Episode {
        let images: Vec<Tensor> = indices.iter().map(|&i| self.image(i)).collect();
        Episode::new(
            Tensor::stack(&images).expect("same shapes"),
            indices.to_vec(),
        )
        .expect("non-empty episode")
    }

    /// Consecutive non-overlapping episodes of length `t`; a remainder shorter than `t` is dropped.
    pub fn partition(&self, t: usize) -> Result<Vec<Episode>, DataError> {
        if t == 0 || t > self.len() {
            return Err(DataError::EpisodeTooLong { t, n: self.len() });
        }
        Ok((0..self.len() / t)
            .map(|e| self.episode(&(e * t..(e + 1) * t).collect::<Vec<_>>()))
            .collect())
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.rows(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            split: self.split,
            name: self.name.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated {
            offset,
            expected: offset + 4,
            actual: bytes.len(),
        })
}

fn idx_payload(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(DataError::BadMagic { found, expected: magic });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Parses an IDX image file (`u8` pixels) into `[n, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (dims, payload) = idx_payload(bytes, IDX_IMAGES_MAGIC)?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[dims[0], 1, dims[1], dims[2]], data).map_err(|_| DataError::Shape(dims))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    Ok(idx_payload(bytes, IDX_LABELS_MAGIC)?.1.to_vec())
}

/// Loads an IDX image file as a training split named after the file.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(parse_idx_images(&bytes)?, Split::Train, name)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, DataError> {
    let path = path.as_ref();
    parse_idx_labels(&fs::read(path).map_err(|e| io_err(path, e))?)
}

/// Encodes single-channel images as an IDX image file, rounding to `u8`.
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    Threshold,
    Stochastic,
}

/// Threshold mode maps `x >= 0.5` to 1; stochastic mode draws `Bernoulli(x)` once per pixel.
pub fn binarize(dataset: &Dataset, mode: BinarizeMode, seed: u64) -> Dataset {
    let images = match mode {
        BinarizeMode::Threshold => dataset.images.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        BinarizeMode::Stochastic => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = dataset
                .images
                .data()
                .iter()
                .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect();
            Tensor::new(dataset.images.shape(), data).expect("same length")
        }
    };
    Dataset {
        images,
        ..dataset.clone()
    }
}

/// Number of classes produced by [`synth_shapes`].
pub const SYNTH_CLASSES: usize = 3;

/// `n` binary `h x w` images of randomly placed and scaled rectangles (label 0),
/// crosses (label 1) and circle outlines (label 2).
pub fn synth_shapes(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset, DataError> {
    if h < 8 || w < 8 {
        return Err(DataError::TooSmall { h, w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * h * w];
    let mut labels = Vec::with_capacity(n);
    let min_side = h.min(w);
    for i in 0..n {
        let class = rng.random_range(0..SYNTH_CLASSES);
        let size = rng.random_range(min_side * 3 / 8..=min_side * 3 / 4);
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        let img = &mut data[i * h * w..(i + 1) * h * w];
        let thick = (size / 5).max(1);
        for r in 0..size {
            for c in 0..size {
                let on = match class {
                    0 => true,
                    1 => {
                        let mid = (size - thick) / 2;
                        (mid..mid + thick).contains(&r) || (mid..mid + thick).contains(&c)
                    }
                    _ => {
                        let centre = (size as f64 - 1.0) / 2.0;
                        let d = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
                        let radius = size as f64 / 2.0;
                        d <= radius && d > radius - thick as f64 - 0.5
                    }
                };
                if on {
                    img[(top + r) * w + left + c] = 1.0;
                }
            }
        }
        labels.push(class as u8);
    }
    let images = Tensor::new(&[n, 1, h, w], data).expect("length matches");
    Dataset::new(images, Split::Train, "synth_shapes")?.with_labels(labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Each pixel becomes 0 or 1 with probability `rate / 2` each.
    SaltPepper { rate: f64 },
    /// `x * (1 + eps)`, `eps ~ N(0, std^2)`.
    Speckle { std: f64 },
    /// `Poisson(x * scale) / scale`.
    Poisson { scale: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            NoiseKind::SaltPepper { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(DataError::Noise(format!("salt-and-pepper rate {rate} outside [0, 1]")))
            }
            NoiseKind::Speckle { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(DataError::Noise(format!("speckle std {std} must be non-negative")))
            }
            NoiseKind::Poisson { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(DataError::Noise(format!("poisson scale {scale} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NoiseKind::SaltPepper { .. } => "salt_pepper",
            NoiseKind::Speckle { .. } => "speckle",
            NoiseKind::Poisson { .. } => "poisson",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::SaltPepper { rate } => write!(f, "salt_pepper:{rate}"),
            NoiseKind::Speckle { std } => write!(f, "speckle:{std}"),
            NoiseKind::Poisson { scale } => write!(f, "poisson:{scale}"),
        }
    }
}

/// Parses `salt_pepper:RATE`, `speckle:STD` or `poisson:SCALE`.
impl FromStr for NoiseKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| DataError::Noise(format!("expected KIND:VALUE, got `{s}`")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| DataError::Noise(format!("`{value}` is not a number")))?;
        let noise = match kind {
            "salt_pepper" => NoiseKind::SaltPepper { rate: v },
            "speckle" => NoiseKind::Speckle { std: v },
            "poisson" => NoiseKind::Poisson { scale: v },
            other => return Err(DataError::Noise(format!("unknown noise kind `{other}`"))),
        };
        noise.validate()?;
        Ok(noise)
    }
}

pub fn inject_noise(image: &Tensor, kind: NoiseKind, seed: u64) -> Result<Tensor, DataError> {
    kind.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match kind {
        NoiseKind::SaltPepper { rate } => image.map(|x| {
            let u: f64 = rng.random();
            if u < rate / 2.0 {
                0.0
            } else if u < rate {
                1.0
            } else {
                x
            }
        }),
        NoiseKind::Speckle { std } => {
            let normal = Normal::new(0.0, std).map_err(|e| DataError::Noise(e.to_string()))?;
            image.map(|x| (x * (1.0 + normal.sample(&mut rng))).clamp(0.0, 1.0))
        }
        NoiseKind::Poisson { scale } => image.map(|x| {
            let lambda = x * scale;
            if lambda <= 0.0 {
                return 0.0;
            }
            let count = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
            (count / scale).clamp(0.0, 1.0)
        }),
    };
    Ok(out)
}

/// Seeded sampler of episodes: `T` distinct dataset indices per episode.
///
/// Episode `i` of seed `s` depends only on `(s, i)`, so runs that log these
/// pairs can regenerate any episode.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    n: usize,
    t: usize,
    seed: u64,
    next: u64,
}

impl EpisodeSampler {
    pub fn new(n: usize, t: usize, seed: u64) -> Result<Self, DataError> {
        if t == 0 || t > n {
            return Err(DataError::EpisodeTooLong { t, n });
        }
        Ok(EpisodeSampler { n, t, seed, next: 0 })
    }

    pub fn episode_len(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the next episode [`next_indices`](Self::next_indices) will return.
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn indices_at(&self, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        sample(&mut rng, self.n, self.t).into_vec()
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let out = self.indices_at(self.next);
        self.next += 1;
        out
    }

    pub fn next_episode(&mut self, dataset: &Dataset) -> Episode {
        dataset.episode(&self.next_indices())
    }
}

/// Tiles `[n, c, h, w]` images into a single-channel `[rows * h, cols * w]` mosaic
/// (channels averaged), one pixel of padding between tiles.
pub fn tile(images: &Tensor, cols: usize) -> Result<Tensor, DataError> {
    let s = images.shape();
    if s.len() != 4 || cols == 0 {
        return Err(DataError::Shape(s.to_vec()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let (oh, ow) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = vec![0.0; oh * ow];
    for i in 0..n {
        let (r0, c0) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v: f64 = (0..c)
                    .map(|ch| images.data()[((i * c + ch) * h + y) * w + x])
                    .sum::<f64>()
                    / c as f64;
                out[(r0 + y) * ow + c0 + x] = v;
            }
        }
    }
    Tensor::new(&[oh, ow], out).map_err(|_| DataError::Shape(vec![oh, ow]))
}

/// Binary PGM (P5, maxval 255) bytes for a `[h, w]` or `[1, h, w]` image in `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(DataError::Shape(s.to_vec())),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<(), DataError> {
    let path = path.as_ref();
    let bytes = encode_pgm(image)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| io_err(path, e))
}
