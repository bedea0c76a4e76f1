//! One LSTM layer unrolled over a short sequence, with BPTT.
//!
//! Gate order in the stacked weights is input, forget, cell, output. Initial
//! hidden and cell states are zero.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct LstmDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

pub struct LstmCache<T> {
    /// Post-activation gates, `[batch, steps, 4 * hidden]`.
    gates: Vec<T>,
    /// Cell states, `[batch, steps, hidden]`.
    cells: Vec<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `x`: `[batch, steps, input]`; `w_ih`: `[4h, input]`; `w_hh`: `[4h, h]`;
/// `b`: `[4h]`. Returns the hidden sequence `[batch, steps, hidden]`.
pub fn forward<T: Real>(x: &[T], w_ih: &[T], w_hh: &[T], b: &[T], d: &LstmDims) -> (Vec<T>, LstmCache<T>) {
    let (h, g4) = (d.hidden, 4 * d.hidden);
    let mut out = vec![T::zero(); d.batch * d.steps * h];
    let mut gates = vec![T::zero(); d.batch * d.steps * g4];
    let mut cells = vec![T::zero(); d.batch * d.steps * h];
    let mut z = vec![T::zero(); g4];
    for n in 0..d.batch {
        for t in 0..d.steps {
            let xt = &x[(n * d.steps + t) * d.input..(n * d.steps + t + 1) * d.input];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = b[j];
                let wi = &w_ih[j * d.input..(j + 1) * d.input];
                acc += wi.iter().zip(xt).map(|(&w, &v)| w * v).sum::<T>();
                if t > 0 {
                    let hp = &out[(n * d.steps + t - 1) * h..(n * d.steps + t) * h];
                    let wh = &w_hh[j * h..(j + 1) * h];
                    acc += wh.iter().zip(hp).map(|(&w, &v)| w * v).sum::<T>();
                }
                *zj = acc;
            }
            let gbase = (n * d.steps + t) * g4;
            let sbase = (n * d.steps + t) * h;
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                let c_prev = if t > 0 { cells[sbase - h + k] } else { T::zero() };
                let c = f * c_prev + i * g;
                gates[gbase + k] = i;
                gates[gbase + h + k] = f;
                gates[gbase + 2 * h + k] = g;
                gates[gbase + 3 * h + k] = o;
                cells[sbase + k] = c;
                out[sbase + k] = o * c.tanh();
            }
        }
    }
    (out, LstmCache { gates, cells })
}

pub struct LstmGrads<T> {
    pub dx: Vec<T>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    pub db: Vec<T>,
}

pub fn backward<T: Real>(x: &[T], w_ih: &[T], w_hh: &[T], out: &[T], cache: &LstmCache<T>, dy: &[T], d: &LstmDims) -> LstmGrads<T> {
    let (h, g4) = (d.hidden, 4 * d.hidden);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw_ih = vec![T::zero(); w_ih.len()];
    let mut dw_hh = vec![T::zero(); w_hh.len()];
    let mut db = vec![T::zero(); g4];
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    let mut dz = vec![T::zero(); g4];
    for n in 0..d.batch {
        dh_next.fill(T::zero());
        dc_next.fill(T::zero());
        for t in (0..d.steps).rev() {
            let gbase = (n * d.steps + t) * g4;
            let sbase = (n * d.steps + t) * h;
            for k in 0..h {
                let i = cache.gates[gbase + k];
                let f = cache.gates[gbase + h + k];
                let g = cache.gates[gbase + 2 * h + k];
                let o = cache.gates[gbase + 3 * h + k];
                let c = cache.cells[sbase + k];
                let c_prev = if t > 0 { cache.cells[sbase - h + k] } else { T::zero() };
                let tc = c.tanh();
                let dh = dy[sbase + k] + dh_next[k];
                let dc = dc_next[k] + dh * o * (T::one() - tc * tc);
                dz[k] = dc * g * i * (T::one() - i);
                dz[h + k] = dc * c_prev * f * (T::one() - f);
                dz[2 * h + k] = dc * i * (T::one() - g * g);
                dz[3 * h + k] = dh * tc * o * (T::one() - o);
                dc_next[k] = dc * f;
            }
            let xt = &x[(n * d.steps + t) * d.input..(n * d.steps + t + 1) * d.input];
            let dxt = &mut dx[(n * d.steps + t) * d.input..(n * d.steps + t + 1) * d.input];
            dh_next.fill(T::zero());
            for (j, &gz) in dz.iter().enumerate() {
                db[j] += gz;
                for p in 0..d.input {
                    dw_ih[j * d.input + p] += gz * xt[p];
                    dxt[p] += gz * w_ih[j * d.input + p];
                }
                if t > 0 {
                    let hp = &out[(n * d.steps + t - 1) * h..(n * d.steps + t) * h];
                    for p in 0..h {
                        dw_hh[j * h + p] += gz * hp[p];
                        dh_next[p] += gz * w_hh[j * h + p];
                    }
                }
            }
        }
    }
    LstmGrads { dx, dw_ih, dw_hh, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let d = LstmDims {
            batch: 2,
            steps: 9,
            input: 5,
            hidden: 10,
        };
        let x: Vec<f64> = (0..2 * 9 * 5).map(|i| i as f64 * 0.1).collect();
        let (out, _) = forward(&x, &vec![0.0; 40 * 5], &vec![0.0; 40 * 10], &[0.0; 40], &d);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
