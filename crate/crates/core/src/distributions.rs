//! Diagonal Gaussian and Bernoulli terms, expressed as tape operations so
//! every quantity stays differentiable.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

/// Bounds applied to every log standard deviation emitted by a network head.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("target value {value} at index {index} is not 0 or 1")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("gaussian likelihood needs sigma > 0, got {0}")]
    NonPositiveSigma(f64),
}

/// Diagonal Gaussian over `[batch, dim...]`, parameterized by mean and log std.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_std: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mean: Var, log_std: Var) -> Result<Self, DiffError> {
        if tape.shape(mean) != tape.shape(log_std) {
            return Err(DiffError::ShapeMismatch {
                op: "diag_gaussian",
                left: tape.shape(mean).to_vec(),
                right: tape.shape(log_std).to_vec(),
            });
        }
        Ok(DiagGaussian { mean, log_std })
    }

    /// N(0, 1) with the given shape, recorded as constants.
    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Result<Self, DiffError> {
        let mean = tape.constant(Tensor::zeros(shape))?;
        let log_std = tape.constant(Tensor::zeros(shape))?;
        Ok(DiagGaussian { mean, log_std })
    }

    /// Splits a `[batch, 2 * dim]` head output into mean and clamped log std.
    pub fn from_head(tape: &mut Tape, raw: Var) -> Result<Self, DiffError> {
        let shape = tape.shape(raw).to_vec();
        if shape.len() != 2 || shape[1] % 2 != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "gaussian_head",
                left: shape,
                right: vec![0, 2],
            });
        }
        let dim = shape[1] / 2;
        let mean = tape.slice(raw, 1, 0, dim)?;
        let log_std = tape.slice(raw, 1, dim, 2 * dim)?;
        let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn shape<'a>(&self, tape: &'a Tape) -> &'a [usize] {
        tape.shape(self.mean)
    }
}

/// Standard normal noise of the given shape.
pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// `mean + exp(log_std) * noise`.
pub fn reparam_sample(tape: &mut Tape, d: &DiagGaussian, noise: Var) -> Result<Var, DiffError> {
    if tape.shape(noise) != d.shape(tape) {
        return Err(DiffError::ShapeMismatch {
            op: "reparam_sample",
            left: d.shape(tape).to_vec(),
            right: tape.shape(noise).to_vec(),
        });
    }
    let std = tape.exp(d.log_std)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(d.mean, scaled)
}

fn sum_per_sample(tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let rank = tape.shape(x).len();
    if rank < 2 {
        return Ok(x);
    }
    let axes: Vec<usize> = (1..rank).collect();
    tape.sum(x, &axes)
}

/// Closed-form `KL(q || p)` per batch element, summed over the remaining axes.
pub fn kl_diag_gaussians(tape: &mut Tape, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var, DiffError> {
    if q.shape(tape) != p.shape(tape) {
        return Err(DiffError::ShapeMismatch {
            op: "kl_diag_gaussians",
            left: q.shape(tape).to_vec(),
            right: p.shape(tape).to_vec(),
        });
    }
    // log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
    let log_ratio = tape.sub(p.log_std, q.log_std)?;
    let neg2 = tape.scale(log_ratio, -2.0)?;
    let var_ratio = tape.exp(neg2)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let diff2 = tape.mul(diff, diff)?;
    let p_ls2 = tape.scale(p.log_std, -2.0)?;
    let inv_var_p = tape.exp(p_ls2)?;
    let mahal = tape.mul(diff2, inv_var_p)?;
    let quad = tape.add(var_ratio, mahal)?;
    let half = tape.scale(quad, 0.5)?;
    let half = tape.add_scalar(half, -0.5)?;
    let per_dim = tape.add(log_ratio, half)?;
    sum_per_sample(tape, per_dim)
}

/// `KL(q || N(0, 1))`, evaluated through [`kl_diag_gaussians`].
pub fn kl_to_standard_normal(tape: &mut Tape, q: &DiagGaussian) -> Result<Var, DiffError> {
    let shape = q.shape(tape).to_vec();
    let p = DiagGaussian::standard(tape, &shape)?;
    kl_diag_gaussians(tape, q, &p)
}

/// `sum x * l - softplus(l)`: Bernoulli log-likelihood of binary `target` under `logits`.
pub fn bernoulli_log_prob(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var, DistError> {
    if let Some((index, &value)) = target
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        return Err(DistError::NonBinaryTarget { index, value });
    }
    if tape.shape(logits) != target.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "bernoulli_log_prob",
            left: tape.shape(logits).to_vec(),
            right: target.shape().to_vec(),
        }
        .into());
    }
    let x = tape.constant(target.clone())?;
    let xl = tape.mul(x, logits)?;
    let sp = tape.softplus(logits)?;
    let ll = tape.sub(xl, sp)?;
    Ok(sum_per_sample(tape, ll)?)
}

/// Log density of `target` under `N(mean, sigma^2)` per batch element.
pub fn gaussian_log_prob(tape: &mut Tape, mean: Var, sigma: f64, target: &Tensor) -> Result<Var, DistError> {
    if !(sigma > 0.0) {
        return Err(DistError::NonPositiveSigma(sigma));
    }
    if tape.shape(mean) != target.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "gaussian_log_prob",
            left: tape.shape(mean).to_vec(),
            right: target.shape().to_vec(),
        }
        .into());
    }
    let x = tape.constant(target.clone())?;
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let scaled = tape.scale(sq, -0.5 / (sigma * sigma))?;
    let ll = tape.add_scalar(scaled, -HALF_LN_2PI - sigma.ln())?;
    Ok(sum_per_sample(tape, ll)?)
}
