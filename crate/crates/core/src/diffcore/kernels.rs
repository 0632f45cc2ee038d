//! Direct convolution and matrix kernels shared by the forward and backward rules.

/// Geometry of a 2-D convolution over an `[n, c_in, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]`, optionally transposing either operand.
pub fn matmul(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if b_t {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.c_in {
                let src = &input[(n * g.c_in + ci) * g.h * g.w..(n * g.c_in + ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.out_h {
                            let Some(iy) = src_index(oy, ky, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(ix) = src_index(ox, kx, g.stride, g.pad, g.w) {
                                    dst[oy * g.out_w + ox] += wv * src[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h * g.out_w;
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let base = (n * g.c_in + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let Some(iy) = src_index(oy, ky, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(ix) = src_index(ox, kx, g.stride, g.pad, g.w) {
                                    let gv = go[oy * g.out_w + ox];
                                    let src = base + iy * g.w + ix;
                                    acc += gv * input[src];
                                    gi[src] += gv * wv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

/// Transposed convolution; `weight` is laid out `[c_in, c_out, kh, kw]` and
/// `out_h = (h - 1) * stride - 2 * pad + kh`.
pub fn conv_transpose2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        if let Some(b) = bias {
            for co in 0..g.c_out {
                out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = b[co]);
            }
        }
        for ci in 0..g.c_in {
            let src = &input[(n * g.c_in + ci) * g.h * g.w..(n * g.c_in + ci + 1) * g.h * g.w];
            for co in 0..g.c_out {
                let dst_base = (n * g.c_out + co) * plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((ci * g.c_out + co) * g.kh + ky) * g.kw + kx];
                        for iy in 0..g.h {
                            let Some(oy) = src_index(iy, ky, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for ix in 0..g.w {
                                if let Some(ox) = src_index(ix, kx, g.stride, g.pad, g.out_w) {
                                    out[dst_base + oy * g.out_w + ox] += wv * src[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.out_h * g.out_w;
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            gb[co] += grad_out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        for ci in 0..g.c_in {
            let base = (n * g.c_in + ci) * g.h * g.w;
            for co in 0..g.c_out {
                let go_base = (n * g.c_out + co) * plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((ci * g.c_out + co) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for iy in 0..g.h {
                            let Some(oy) = src_index(iy, ky, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for ix in 0..g.w {
                                if let Some(ox) = src_index(ix, kx, g.stride, g.pad, g.out_w) {
                                    let gv = grad_out[go_base + oy * g.out_w + ox];
                                    let src = base + iy * g.w + ix;
                                    acc += gv * input[src];
                                    gi[src] += gv * wv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}
