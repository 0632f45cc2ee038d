//! Temporal shift of feature channels across the images of an episode.

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};

/// Fraction of channels shifted in each direction.
pub const SHIFT_FRACTION: f64 = 0.125;

fn fold(channels: usize) -> usize {
    (channels as f64 * SHIFT_FRACTION).floor() as usize
}

/// Forward shift for the first fold of channels, backward shift for the second,
/// zero fill at episode ends. `features` is `[b * t, c, h, w]`.
fn shift(data: &[f64], shape: &[usize], episode_len: usize, adjoint: bool) -> Vec<f64> {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let f = fold(c);
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let t = i % episode_len;
        for ch in 0..c {
            // source image for output (i, ch); the adjoint swaps direction
            let forward = ch < f;
            let backward = ch >= f && ch < 2 * f;
            let src = if forward != adjoint && (forward || backward) {
                (t > 0).then(|| i - 1)
            } else if forward || backward {
                (t + 1 < episode_len).then(|| i + 1)
            } else {
                Some(i)
            };
            if let Some(s) = src {
                let d = (i * c + ch) * plane;
                let sidx = (s * c + ch) * plane;
                out[d..d + plane].copy_from_slice(&data[sidx..sidx + plane]);
            }
        }
    }
    out
}

/// Shifts `[b * episode_len, c, h, w]` features along the episode axis.
pub fn tsm_shift(features: &Tensor, episode_len: usize) -> Result<Tensor, DiffError> {
    check(features, episode_len)?;
    Tensor::new(
        features.shape(),
        shift(features.data(), features.shape(), episode_len, false),
    )
}

fn check(features: &Tensor, episode_len: usize) -> Result<(), DiffError> {
    let s = features.shape();
    if s.len() < 2 || episode_len == 0 || s[0] % episode_len != 0 {
        return Err(DiffError::ShapeMismatch {
            op: "tsm_shift",
            left: s.to_vec(),
            right: vec![episode_len],
        });
    }
    Ok(())
}

#[derive(Debug)]
struct TsmOp {
    episode_len: usize,
}

impl CustomOp for TsmOp {
    fn name(&self) -> &'static str {
        "tsm_shift"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let g = shift(grad_out.data(), grad_out.shape(), self.episode_len, true);
        vec![Some(
            Tensor::new(inputs[0].shape(), g).expect("shift preserves shape"),
        )]
    }
}

pub fn tsm_shift_var(tape: &mut Tape, features: Var, episode_len: usize) -> Result<Var, DiffError> {
    let out = tsm_shift(tape.value(features), episode_len)?;
    tape.custom(Box::new(TsmOp { episode_len }), &[features], out)
}
