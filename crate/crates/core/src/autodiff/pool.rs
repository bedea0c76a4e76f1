use crate::tensor::Real;

/// Output length of a max pool; any trailing remainder shorter than the
/// window is dropped.
pub fn out_len(len: usize, window: usize, stride: usize) -> usize {
    if len < window || window == 0 || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// `x`: `[rows, len]` flattened. Returns pooled values and the flat input
/// index of each maximum (first occurrence wins ties).
pub fn forward<T: Real>(x: &[T], rows: usize, len: usize, window: usize, stride: usize) -> (Vec<T>, Vec<u32>) {
    let out = out_len(len, window, stride);
    let mut values = vec![T::zero(); rows * out];
    let mut argmax = vec![0u32; rows * out];
    for (r, row) in x.chunks_exact(len).take(rows).enumerate() {
        let (vals, idx) = (&mut values[r * out..(r + 1) * out], &mut argmax[r * out..(r + 1) * out]);
        for (j, (v, a)) in vals.iter_mut().zip(idx.iter_mut()).enumerate() {
            let start = j * stride;
            let win = &row[start..start + window];
            let (mut best, mut bv) = (0, win[0]);
            for (i, &w) in win.iter().enumerate().skip(1) {
                if w > bv {
                    best = i;
                    bv = w;
                }
            }
            *v = bv;
            *a = (r * len + start + best) as u32;
        }
    }
    (values, argmax)
}

pub fn backward<T: Real>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}
