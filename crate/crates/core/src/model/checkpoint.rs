//! Self-describing binary checkpoints.
//!
//! Layout: the magic bytes `KPP1`, then one record per named tensor until end
//! of file. A record is the name length (`u32`), the UTF-8 name, the rank
//! (`u32`), each dimension (`u64`) and the values as `f64`, all little-endian.
//! Architecture settings travel as rank-0 records named `config.*`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Likelihood, Model, ModelConfig, ModelError, ParamStore};
use crate::diffcore::Tensor;

pub const MAGIC: &[u8; 4] = b"KPP1";
const CONFIG_PREFIX: &str = "config.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?} at byte 0")]
    BadMagic { found: Vec<u8> },
    #[error("truncated record at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid record at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("missing config entry `{0}`")]
    MissingConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn config_entries(c: &ModelConfig) -> Vec<(&'static str, f64)> {
    let sigma = match c.likelihood {
        Likelihood::Bernoulli => 0.0,
        Likelihood::Gaussian { sigma } => sigma,
    };
    vec![
        ("image_c", c.image[0] as f64),
        ("image_h", c.image[1] as f64),
        ("image_w", c.image[2] as f64),
        ("enc0", c.enc_channels[0] as f64),
        ("enc1", c.enc_channels[1] as f64),
        ("enc2", c.enc_channels[2] as f64),
        ("embed_dim", c.embed_dim as f64),
        ("latent", c.latent as f64),
        ("reads", c.reads as f64),
        ("memory_c", c.memory[0] as f64),
        ("memory_h", c.memory[1] as f64),
        ("memory_w", c.memory[2] as f64),
        ("memory_base_channels", c.memory_base_channels as f64),
        ("memory_upsamples", c.memory_upsamples as f64),
        ("trace_h", c.trace.0 as f64),
        ("trace_w", c.trace.1 as f64),
        ("prior0", c.prior_channels[0] as f64),
        ("prior1", c.prior_channels[1] as f64),
        ("decoder_base_channels", c.decoder_base_channels as f64),
        ("decoder_upsamples", c.decoder_upsamples as f64),
        ("tsm", f64::from(u8::from(c.tsm))),
        ("gaussian_sigma", sigma),
        ("init_log_std", c.init_log_std),
        ("ablation", f64::from(u8::from(c.ablation))),
    ]
}

fn config_from(entries: &ParamStore) -> Result<ModelConfig, CheckpointError> {
    let get = |k: &str| -> Result<f64, CheckpointError> {
        entries
            .get(&format!("{CONFIG_PREFIX}{k}"))
            .and_then(Tensor::item)
            .ok_or_else(|| CheckpointError::MissingConfig(k.to_string()))
    };
    let u = |k: &str| get(k).map(|v| v as usize);
    let sigma = get("gaussian_sigma")?;
    Ok(ModelConfig {
        image: [u("image_c")?, u("image_h")?, u("image_w")?],
        enc_channels: [u("enc0")?, u("enc1")?, u("enc2")?],
        embed_dim: u("embed_dim")?,
        latent: u("latent")?,
        reads: u("reads")?,
        memory: [u("memory_c")?, u("memory_h")?, u("memory_w")?],
        memory_base_channels: u("memory_base_channels")?,
        memory_upsamples: u("memory_upsamples")?,
        trace: (u("trace_h")?, u("trace_w")?),
        prior_channels: [u("prior0")?, u("prior1")?],
        decoder_base_channels: u("decoder_base_channels")?,
        decoder_upsamples: u("decoder_upsamples")?,
        tsm: get("tsm")? != 0.0,
        likelihood: if sigma > 0.0 {
            Likelihood::Gaussian { sigma }
        } else {
            Likelihood::Bernoulli
        },
        init_log_std: get("init_log_std")?,
        ablation: get("ablation")? != 0.0,
    })
}

fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let dims: &[usize] = if t.rank() == 1 && t.numel() == 1 && name.starts_with(CONFIG_PREFIX) {
        &[]
    } else {
        t.shape()
    };
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    for (k, v) in config_entries(&model.config) {
        write_record(w, &format!("{CONFIG_PREFIX}{k}"), &Tensor::scalar(v))?;
    }
    for (name, t) in model.params.iter() {
        write_record(w, name, t)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            CheckpointError::Truncated {
                offset: self.pos,
                needed: n.saturating_sub(self.bytes.len() - self.pos),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes.iter().take(4).copied().collect(),
        });
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let mut config_store = ParamStore::new();
    let mut params = ParamStore::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| CheckpointError::Invalid {
                offset: start,
                reason: e.to_string(),
            })?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(
            CheckpointError::Invalid {
                offset: start,
                reason: format!("dimensions {dims:?} overflow"),
            },
        )?;
        let raw = cur.take(count.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let shape = if rank == 0 { vec![1] } else { dims };
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Invalid {
            offset: start,
            reason: e.to_string(),
        })?;
        if name.starts_with(CONFIG_PREFIX) {
            config_store.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    let config = config_from(&config_store)?;
    config.validate()?;
    Ok(Model { config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
