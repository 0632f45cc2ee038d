//! Differentiable sub-block reads from a spatial memory.
//!
//! A key `(s, x, y)` is squashed by `tanh` into `(-1, 1)^3` and defines the
//! affine map from target coordinates `(u, v)` in `[-1, 1]^2` to source
//! coordinates `(s * u + x, s * v + y)`. `u` runs along the width axis and `v`
//! along the height axis. Source coordinates are converted to pixels with
//! `p = (c + 1) / 2 * (size - 1)` and sampled bilinearly with zero padding.

use thiserror::Error;

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StnError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("a read needs at least one key")]
    NoKeys,
    #[error("memory index {index} out of range for {memories} memories")]
    MemoryIndex { index: usize, memories: usize },
}

/// Unbounded key `(scale, x-shift, y-shift)` addressing one memory sub-block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyTriple {
    pub raw: [f64; 3],
}

impl KeyTriple {
    pub fn new(raw: [f64; 3]) -> Self {
        KeyTriple { raw }
    }

    /// Key whose squashed form is exactly `squashed`; each entry must lie in `(-1, 1)`.
    pub fn from_squashed(squashed: [f64; 3]) -> Self {
        KeyTriple {
            raw: squashed.map(f64::atanh),
        }
    }

    /// Key that squashes to exactly `(1, 0, 0)` in `f64`.
    pub fn identity() -> Self {
        KeyTriple {
            raw: [20.0, 0.0, 0.0],
        }
    }

    pub fn squashed(&self) -> [f64; 3] {
        self.raw.map(f64::tanh)
    }
}

/// K sub-blocks read for one sample, each `[channels, h_out, w_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub traces: Vec<Tensor>,
}

/// Normalized coordinate of index `i` on an axis of `n` samples.
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn grid_values(squashed: &[f64], out_h: usize, out_w: usize) -> Vec<f64> {
    let m = squashed.len() / 3;
    let mut data = Vec::with_capacity(m * out_h * out_w * 2);
    for k in squashed.chunks(3) {
        let (s, x, y) = (k[0], k[1], k[2]);
        for r in 0..out_h {
            let v = normalized_coord(r, out_h);
            for c in 0..out_w {
                let u = normalized_coord(c, out_w);
                data.push(s * u + x);
                data.push(s * v + y);
            }
        }
    }
    data
}

/// Source-coordinate grid `[out_h, out_w, 2]` (last axis: width, height) for one key.
pub fn affine_grid(key: &KeyTriple, out_h: usize, out_w: usize) -> Tensor {
    Tensor::new(&[out_h, out_w, 2], grid_values(&key.squashed(), out_h, out_w))
        .expect("grid length matches shape")
}

#[derive(Debug)]
struct AffineGridOp {
    out_h: usize,
    out_w: usize,
}

impl CustomOp for AffineGridOp {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let m = inputs[0].shape()[0];
        let plane = self.out_h * self.out_w * 2;
        let mut g = vec![0.0; m * 3];
        for k in 0..m {
            let go = &grad_out.data()[k * plane..(k + 1) * plane];
            let mut i = 0;
            for r in 0..self.out_h {
                let v = normalized_coord(r, self.out_h);
                for c in 0..self.out_w {
                    let u = normalized_coord(c, self.out_w);
                    let (gx, gy) = (go[i], go[i + 1]);
                    g[k * 3] += gx * u + gy * v;
                    g[k * 3 + 1] += gx;
                    g[k * 3 + 2] += gy;
                    i += 2;
                }
            }
        }
        vec![Some(Tensor::new(&[m, 3], g).expect("key gradient shape"))]
    }
}

/// Differentiable grid `[m, out_h, out_w, 2]` from squashed keys `[m, 3]`.
pub fn affine_grid_var(tape: &mut Tape, squashed: Var, out_h: usize, out_w: usize) -> Result<Var, DiffError> {
    let shape = tape.shape(squashed).to_vec();
    if shape.len() != 2 || shape[1] != 3 || out_h == 0 || out_w == 0 {
        return Err(DiffError::ShapeMismatch {
            op: "affine_grid",
            left: shape,
            right: vec![0, 3],
        });
    }
    let data = grid_values(tape.value(squashed).data(), out_h, out_w);
    let out = Tensor::new(&[shape[0], out_h, out_w, 2], data)?;
    tape.custom(Box::new(AffineGridOp { out_h, out_w }), &[squashed], out)
}

/// One bilinear tap: flat offset within a channel plane plus its weight.
#[derive(Clone, Copy)]
struct Tap {
    offset: usize,
    weight: f64,
}

struct Footprint {
    taps: [Option<Tap>; 4],
    // d(value)/d(px) and d(value)/d(py) need neighbour values, so keep geometry
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn to_pixel(c: f64, size: usize) -> f64 {
    (c + 1.0) * 0.5 * (size - 1) as f64
}

fn footprint(gx: f64, gy: f64, h: usize, w: usize) -> Footprint {
    let px = to_pixel(gx, w);
    let py = to_pixel(gy, h);
    let x0 = px.floor();
    let y0 = py.floor();
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut taps = [None; 4];
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (slot, &(yy, xx, wgt)) in taps.iter_mut().zip(&corners) {
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            *slot = Some(Tap {
                offset: yy as usize * w + xx as usize,
                weight: wgt,
            });
        }
    }
    Footprint { taps, x0, y0, fx, fy }
}

fn pixel(plane: &[f64], y: isize, x: isize, h: usize, w: usize) -> f64 {
    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

#[derive(Debug)]
struct GridSampleOp {
    mem_index: Vec<usize>,
}

fn check_sample_shapes(memories: &Tensor, grid: &Tensor, mem_index: &[usize]) -> Result<(), StnError> {
    let ms = memories.shape();
    let gs = grid.shape();
    if ms.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != mem_index.len() {
        return Err(DiffError::ShapeMismatch {
            op: "bilinear_sample",
            left: ms.to_vec(),
            right: gs.to_vec(),
        }
        .into());
    }
    if let Some(&index) = mem_index.iter().find(|&&i| i >= ms[0]) {
        return Err(StnError::MemoryIndex {
            index,
            memories: ms[0],
        });
    }
    Ok(())
}

fn sample_forward(memories: &Tensor, grid: &Tensor, mem_index: &[usize]) -> Tensor {
    let [_, c, h, w] = memories.shape().try_into().expect("rank 4");
    let (m, oh, ow) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let mut out = vec![0.0; m * c * oh * ow];
    let g = grid.data();
    for k in 0..m {
        let mem = &memories.data()[mem_index[k] * c * h * w..(mem_index[k] + 1) * c * h * w];
        for p in 0..oh * ow {
            let gi = (k * oh * ow + p) * 2;
            let fp = footprint(g[gi], g[gi + 1], h, w);
            for ch in 0..c {
                let plane = &mem[ch * h * w..(ch + 1) * h * w];
                out[(k * c + ch) * oh * ow + p] = fp
                    .taps
                    .iter()
                    .flatten()
                    .map(|t| plane[t.offset] * t.weight)
                    .sum();
            }
        }
    }
    Tensor::new(&[m, c, oh, ow], out).expect("sample shape")
}

impl CustomOp for GridSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (memories, grid) = (inputs[0], inputs[1]);
        let [_, c, h, w] = memories.shape().try_into().expect("rank 4");
        let (m, oh, ow) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
        let mut g_mem = vec![0.0; memories.numel()];
        let mut g_grid = vec![0.0; grid.numel()];
        let g = grid.data();
        let sx = 0.5 * (w - 1) as f64;
        let sy = 0.5 * (h - 1) as f64;
        for k in 0..m {
            let base = mem_index_base(self.mem_index[k], c, h, w);
            for p in 0..oh * ow {
                let gi = (k * oh * ow + p) * 2;
                let fp = footprint(g[gi], g[gi + 1], h, w);
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = grad_out.data()[(k * c + ch) * oh * ow + p];
                    if go == 0.0 {
                        continue;
                    }
                    let pbase = base + ch * h * w;
                    for t in fp.taps.iter().flatten() {
                        g_mem[pbase + t.offset] += go * t.weight;
                    }
                    let plane = &memories.data()[pbase..pbase + h * w];
                    let v00 = pixel(plane, fp.y0, fp.x0, h, w);
                    let v01 = pixel(plane, fp.y0, fp.x0 + 1, h, w);
                    let v10 = pixel(plane, fp.y0 + 1, fp.x0, h, w);
                    let v11 = pixel(plane, fp.y0 + 1, fp.x0 + 1, h, w);
                    dpx += go * ((1.0 - fp.fy) * (v01 - v00) + fp.fy * (v11 - v10));
                    dpy += go * ((1.0 - fp.fx) * (v10 - v00) + fp.fx * (v11 - v01));
                }
                g_grid[gi] += dpx * sx;
                g_grid[gi + 1] += dpy * sy;
            }
        }
        vec![
            Some(Tensor::new(memories.shape(), g_mem).expect("memory grad shape")),
            Some(Tensor::new(grid.shape(), g_grid).expect("grid grad shape")),
        ]
    }
}

fn mem_index_base(index: usize, c: usize, h: usize, w: usize) -> usize {
    index * c * h * w
}

/// Bilinear sampling of `image` `[c, h, w]` at `grid` `[out_h, out_w, 2]`.
pub fn bilinear_sample(image: &Tensor, grid: &Tensor) -> Result<Tensor, StnError> {
    if image.rank() != 3 || grid.rank() != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "bilinear_sample",
            left: image.shape().to_vec(),
            right: grid.shape().to_vec(),
        }
        .into());
    }
    let mut ms = vec![1];
    ms.extend_from_slice(image.shape());
    let mut gs = vec![1];
    gs.extend_from_slice(grid.shape());
    let memories = image.reshape(&ms)?;
    let grid = grid.reshape(&gs)?;
    check_sample_shapes(&memories, &grid, &[0])?;
    let out = sample_forward(&memories, &grid, &[0]);
    Ok(out.reshape(&out.shape()[1..])?)
}

/// Differentiable sampling: output row `k` reads memory `mem_index[k]` of
/// `memories` `[b, c, h, w]` at `grid` row `k`. Output `[m, c, out_h, out_w]`.
pub fn bilinear_sample_var(
    tape: &mut Tape,
    memories: Var,
    grid: Var,
    mem_index: &[usize],
) -> Result<Var, StnError> {
    check_sample_shapes(tape.value(memories), tape.value(grid), mem_index)?;
    let out = sample_forward(tape.value(memories), tape.value(grid), mem_index);
    let op = GridSampleOp {
        mem_index: mem_index.to_vec(),
    };
    Ok(tape.custom(Box::new(op), &[memories, grid], out)?)
}

/// Reads one trace per raw key row. `keys` is `[m, 3]` (unsquashed) and
/// `mem_index[k]` selects the memory each key addresses.
pub fn read_traces_var(
    tape: &mut Tape,
    memories: Var,
    keys: Var,
    mem_index: &[usize],
    out_size: (usize, usize),
) -> Result<Var, StnError> {
    if tape.shape(keys).first() == Some(&0) || mem_index.is_empty() {
        return Err(StnError::NoKeys);
    }
    let squashed = tape.tanh(keys)?;
    let grid = affine_grid_var(tape, squashed, out_size.0, out_size.1)?;
    bilinear_sample_var(tape, memories, grid, mem_index)
}

/// Reads `keys.len()` traces of size `out_size` from a `[c, h, w]` memory.
pub fn read_traces(memory: &Tensor, keys: &[KeyTriple], out_size: (usize, usize)) -> Result<TraceSet, StnError> {
    if keys.is_empty() {
        return Err(StnError::NoKeys);
    }
    let traces = keys
        .iter()
        .map(|k| bilinear_sample(memory, &affine_grid(k, out_size.0, out_size.1)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceSet { traces })
}
