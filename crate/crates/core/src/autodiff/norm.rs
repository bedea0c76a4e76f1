//! Batch normalization over `[batch, channels, len]` (or `[batch, channels]`).
//!
//! Statistics are per channel, pooled over the batch and length axes.

use crate::tensor::Real;

pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct BnDims {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
}

impl BnDims {
    fn count(&self) -> usize {
        self.batch * self.len
    }

    fn for_each_channel<T: Real>(&self, x: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for n in 0..self.batch {
            let base = (n * self.channels + c) * self.len;
            for i in 0..self.len {
                f(base + i, x[base + i]);
            }
        }
    }
}

/// Batch statistics from a training-mode pass, used to update running stats.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct TrainCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn forward_train<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: &BnDims) -> (Vec<T>, TrainCache<T>, BatchStats<T>) {
    let m = T::of(d.count() as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); d.channels];
    let mut mean = vec![T::zero(); d.channels];
    let mut var_unbiased = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        let mut sum = T::zero();
        d.for_each_channel(x, c, |_, v| sum += v);
        let mu = sum / m;
        let mut sq = T::zero();
        d.for_each_channel(x, c, |_, v| sq += (v - mu) * (v - mu));
        let var = sq / m;
        let inv = T::one() / (var + T::of(EPS)).sqrt();
        d.for_each_channel(x, c, |i, v| {
            let h = (v - mu) * inv;
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        });
        inv_std[c] = inv;
        mean[c] = mu;
        var_unbiased[c] = if d.count() > 1 { sq / (m - T::one()) } else { T::zero() };
    }
    (y, TrainCache { xhat, inv_std }, BatchStats { mean, var: var_unbiased })
}

pub fn backward_train<T: Real>(dy: &[T], gamma: &[T], cache: &TrainCache<T>, d: &BnDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of(d.count() as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    let mut dbeta = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        d.for_each_channel(dy, c, |i, g| {
            sum_dy += g;
            sum_dy_xhat += g * cache.xhat[i];
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * cache.inv_std[c] / m;
        d.for_each_channel(dy, c, |i, g| {
            dx[i] = scale * (m * g - sum_dy - cache.xhat[i] * sum_dy_xhat);
        });
    }
    (dx, dgamma, dbeta)
}

pub fn inv_std<T: Real>(running_var: &[T]) -> Vec<T> {
    running_var.iter().map(|&v| T::one() / (v + T::of(EPS)).sqrt()).collect()
}

pub fn forward_eval<T: Real>(x: &[T], gamma: &[T], beta: &[T], mean: &[T], inv: &[T], d: &BnDims) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for c in 0..d.channels {
        d.for_each_channel(x, c, |i, v| y[i] = gamma[c] * (v - mean[c]) * inv[c] + beta[c]);
    }
    y
}

pub fn backward_eval<T: Real>(x: &[T], dy: &[T], gamma: &[T], mean: &[T], inv: &[T], d: &BnDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    let mut dbeta = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        let scale = gamma[c] * inv[c];
        d.for_each_channel(dy, c, |i, g| {
            dx[i] = g * scale;
            dgamma[c] += g * (x[i] - mean[c]) * inv[c];
            dbeta[c] += g;
        });
    }
    (dx, dgamma, dbeta)
}
