#![allow(dead_code)]

use kpp_core::diffcore::Tensor;

/// Central finite difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// blowing up the ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst-case comparison of an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn compare(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Self {
        let mut check = GradCheck {
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let e = relative_error(a, n, floor);
            if e > check.max_rel_error {
                check = GradCheck {
                    max_rel_error: e,
                    worst_index: i,
                };
            }
        }
        check
    }
}
