//! Spatial transformer oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kpp_core::diffcore::{Tape, Tensor};
use kpp_core::stn::{bilinear_sample, affine_grid, read_traces, read_traces_var, KeyTriple};

use super::ops::{normal, uniform};

/// The window used by the worked addressing example.
pub const WINDOW: [f64; 3] = [0.5, 0.3, 0.5];

/// Largest deviation of an identity read from the memory it reads.
pub fn identity_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = uniform(&mut rng, &[3, 12, 10], -1.0, 1.0);
    let set = read_traces(&memory, &[KeyTriple::identity()], (12, 10)).unwrap();
    set.traces[0].max_abs_diff(&memory)
}

/// Direct bilinear crop: pixel `(r, c)` of the window samples source
/// position `s * u_c + x`, `s * v_r + y`, with zero outside the memory.
pub fn brute_force_crop(memory: &Tensor, s: f64, x: f64, y: f64, oh: usize, ow: usize) -> Tensor {
    let [ch, h, w]: [usize; 3] = memory.shape().try_into().unwrap();
    let at = |k: usize, r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
            0.0
        } else {
            memory.data()[(k * h + r as usize) * w + c as usize]
        }
    };
    let mut out = Vec::with_capacity(ch * oh * ow);
    for k in 0..ch {
        for r in 0..oh {
            for c in 0..ow {
                let u = -1.0 + 2.0 * c as f64 / (ow - 1) as f64;
                let v = -1.0 + 2.0 * r as f64 / (oh - 1) as f64;
                let px = (s * u + x + 1.0) / 2.0 * (w - 1) as f64;
                let py = (s * v + y + 1.0) / 2.0 * (h - 1) as f64;
                let (c0, r0) = (px.floor(), py.floor());
                let (fx, fy) = (px - c0, py - r0);
                let (c0, r0) = (c0 as isize, r0 as isize);
                let value = (1.0 - fy) * ((1.0 - fx) * at(k, r0, c0) + fx * at(k, r0, c0 + 1))
                    + fy * ((1.0 - fx) * at(k, r0 + 1, c0) + fx * at(k, r0 + 1, c0 + 1));
                out.push(value);
            }
        }
    }
    Tensor::new(&[ch, oh, ow], out).unwrap()
}

/// Largest deviation of the worked-example window from the brute-force crop.
pub fn window_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = normal(&mut rng, &[3, 16, 16], 1.0);
    let [s, x, y] = WINDOW;
    let key = KeyTriple::from_squashed(WINDOW);
    let grid = affine_grid(&key, 8, 8);
    let read = bilinear_sample(&memory, &grid).unwrap();
    read.max_abs_diff(&brute_force_crop(&memory, s, x, y, 8, 8))
}

/// `(largest |grad| outside the window's pixel footprint, count of nonzero grads inside)`.
pub fn unread_gradient(seed: u64) -> (f64, usize) {
    let (h, w, oh, ow) = (16, 16, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = normal(&mut rng, &[1, 2, h, w], 1.0);
    let key = KeyTriple::from_squashed(WINDOW);
    let mut tape = Tape::new();
    let m = tape.param(memory).unwrap();
    let k = tape.param(Tensor::new(&[1, 3], key.raw.to_vec()).unwrap()).unwrap();
    let out = read_traces_var(&mut tape, m, k, &[0], (oh, ow)).unwrap();
    let wts = normal(&mut rng, &[1, 2, oh, ow], 1.0);
    let wts = tape.constant(wts).unwrap();
    let prod = tape.mul(out, wts).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(m).unwrap();

    let sq = key.squashed();
    let span = |lo: f64, hi: f64, n: usize| {
        let to_px = |g: f64| (g + 1.0) / 2.0 * (n - 1) as f64;
        (to_px(lo).floor() as isize, to_px(hi).ceil() as isize)
    };
    let (c_lo, c_hi) = span(sq[1] - sq[0], sq[1] + sq[0], w);
    let (r_lo, r_hi) = span(sq[2] - sq[0], sq[2] + sq[0], h);
    let mut outside: f64 = 0.0;
    let mut inside = 0;
    for ch in 0..2 {
        for r in 0..h {
            for c in 0..w {
                let g = grad.data()[(ch * h + r) * w + c];
                let within = (r_lo..=r_hi).contains(&(r as isize)) && (c_lo..=c_hi).contains(&(c as isize));
                if within {
                    inside += usize::from(g != 0.0);
                } else {
                    outside = outside.max(g.abs());
                }
            }
        }
    }
    (outside, inside)
}
