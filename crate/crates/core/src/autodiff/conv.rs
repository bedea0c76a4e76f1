//! Stride-1 1-D convolution (cross-correlation) via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    /// Zero padding added on the (left, right) of the signal.
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub len: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub out_len: usize,
}

impl ConvDims {
    pub fn new(batch: usize, in_channels: usize, len: usize, out_channels: usize, kernel: usize, padding: Padding) -> Option<Self> {
        let (pad_left, pad_right) = padding.amounts(kernel);
        let padded = len + pad_left + pad_right;
        if kernel == 0 || padded < kernel {
            return None;
        }
        Some(ConvDims {
            batch,
            in_channels,
            len,
            out_channels,
            kernel,
            pad_left,
            pad_right,
            out_len: padded - kernel + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad_left == 0 && self.pad_right == 0
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel
    }

    /// Output positions `t` for which `t + tap - pad_left` lands inside the signal.
    pub(crate) fn valid_range(&self, tap: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(tap);
        let hi = (self.len + self.pad_left).saturating_sub(tap).min(self.out_len);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let out_len = d.out_len;
    for c in 0..d.in_channels {
        let row_src = &x[c * d.len..(c + 1) * d.len];
        for tap in 0..d.kernel {
            let row = &mut cols[(c * d.kernel + tap) * out_len..(c * d.kernel + tap + 1) * out_len];
            let (lo, hi) = d.valid_range(tap);
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if hi > lo {
                let start = lo + tap - d.pad_left;
                row[lo..hi].copy_from_slice(&row_src[start..start + (hi - lo)]);
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let out_len = d.out_len;
    for c in 0..d.in_channels {
        let row_dst = &mut dx[c * d.len..(c + 1) * d.len];
        for tap in 0..d.kernel {
            let row = &cols[(c * d.kernel + tap) * out_len..(c * d.kernel + tap + 1) * out_len];
            let (lo, hi) = d.valid_range(tap);
            if hi > lo {
                let start = lo + tap - d.pad_left;
                for (dst, &src) in row_dst[start..start + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                    *dst += src;
                }
            }
        }
    }
}

/// `x`: `[batch, in, len]`, `w`: `[out, in, kernel]`, `b`: `[out]`.
/// Returns `[batch, out, out_len]`.
pub fn forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let in_stride = d.in_channels * d.len;
    let out_stride = d.out_channels * d.out_len;
    let mut out = vec![T::zero(); d.batch * out_stride];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); d.patch() * d.out_len]
    };
    for n in 0..d.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let yn = &mut out[n * out_stride..(n + 1) * out_stride];
        let src: &[T] = if d.is_pointwise() {
            xn
        } else {
            im2col(xn, d, &mut cols);
            &cols
        };
        T::gemm(false, false, d.out_channels, d.out_len, d.patch(), T::one(), w, src, T::zero(), yn);
        if let Some(b) = b {
            for (o, row) in yn.chunks_exact_mut(d.out_len).enumerate() {
                let bias = b[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn backward<T: Real>(x: &[T], w: &[T], dy: &[T], d: &ConvDims, need: [bool; 3]) -> ConvGrads<T> {
    let [need_x, need_w, need_b] = need;
    let in_stride = d.in_channels * d.len;
    let out_stride = d.out_channels * d.out_len;
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut db = need_b.then(|| vec![T::zero(); d.out_channels]);
    let pointwise = d.is_pointwise();
    let mut cols = if pointwise || !need_w {
        Vec::new()
    } else {
        vec![T::zero(); d.patch() * d.out_len]
    };
    let mut dcols = if pointwise || !need_x {
        Vec::new()
    } else {
        vec![T::zero(); d.patch() * d.out_len]
    };
    for n in 0..d.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let dyn_ = &dy[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, d, &mut cols);
                &cols
            };
            T::gemm(false, true, d.out_channels, d.patch(), d.out_len, T::one(), dyn_, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            if pointwise {
                T::gemm(
                    true,
                    false,
                    d.in_channels,
                    d.out_len,
                    d.out_channels,
                    T::one(),
                    w,
                    dyn_,
                    T::one(),
                    dxn,
                );
            } else {
                T::gemm(
                    true,
                    false,
                    d.patch(),
                    d.out_len,
                    d.out_channels,
                    T::one(),
                    w,
                    dyn_,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, d, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, row) in dyn_.chunks_exact(d.out_len).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Direct-loop reference used by tests as an independent route.
#[cfg(test)]
pub(crate) fn naive_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.out_channels * d.out_len];
    for n in 0..d.batch {
        for o in 0..d.out_channels {
            for t in 0..d.out_len {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for c in 0..d.in_channels {
                    for k in 0..d.kernel {
                        let pos = t as isize + k as isize - d.pad_left as isize;
                        if pos >= 0 && (pos as usize) < d.len {
                            acc += w[(o * d.in_channels + c) * d.kernel + k] * x[(n * d.in_channels + c) * d.len + pos as usize];
                        }
                    }
                }
                out[(n * d.out_channels + o) * d.out_len + t] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 + 3) % 11) as f64 * scale - 0.4).collect()
    }

    #[test]
    fn identity_kernel_same_padding_is_identity() {
        let x = seq(10, 0.1);
        let d = ConvDims::new(1, 1, 10, 1, 1, Padding::Same).unwrap();
        assert_eq!(forward(&x, &[1.0], None, &d), x);
    }

    #[test]
    fn same_padding_keeps_length() {
        for k in 1..6 {
            let d = ConvDims::new(1, 2, 9, 3, k, Padding::Same).unwrap();
            assert_eq!(d.out_len, 9);
        }
        let d = ConvDims::new(1, 1, 3000, 1, 200, Padding::Valid).unwrap();
        assert_eq!(d.out_len, 2801);
        assert!(ConvDims::new(1, 1, 5, 1, 6, Padding::Valid).is_none());
    }

    #[test]
    fn gemm_route_matches_direct_loops() {
        for (k, pad) in [(1, Padding::Valid), (3, Padding::Same), (4, Padding::Same), (5, Padding::Valid)] {
            let d = ConvDims::new(2, 3, 17, 4, k, pad).unwrap();
            let x = seq(2 * 3 * 17, 0.13);
            let w = seq(4 * 3 * k, 0.07);
            let b = seq(4, 0.5);
            let fast = forward(&x, &w, Some(&b), &d);
            let slow = naive_forward(&x, &w, Some(&b), &d);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> must equal <conv^T(dy), x> for the input adjoint.
        let d = ConvDims::new(2, 3, 11, 2, 3, Padding::Same).unwrap();
        let x = seq(2 * 3 * 11, 0.21);
        let w = seq(2 * 3 * 3, 0.09);
        let dy = seq(2 * 2 * 11, 0.05);
        let y = forward(&x, &w, None, &d);
        let g = backward(&x, &w, &dy, &d, [true, true, true]);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.dx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = g.dw.unwrap().iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
