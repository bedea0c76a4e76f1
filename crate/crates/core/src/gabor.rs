//! Trainable Gabor kernels.
//!
//! A kernel is `G(t) = exp(-pi (t - u)^2 / |sigma|) * cos(2 pi f t)` sampled
//! on a fixed 200-tap grid `t_k = -1 + k / 100` seconds. A Gabor layer
//! cross-correlates each kernel with the input signal (valid mode), so a
//! 3000-sample epoch yields 2801 activation samples per kernel.
//!
//! The functions here are the direct, loop-based route. The network feeds the
//! synthesized waveforms into the generic convolution primitive instead; the
//! two routes are checked against each other in tests.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Kernel length in samples (2 s at 100 Hz).
pub const TAPS: usize = 200;
pub const SAMPLE_RATE_HZ: f64 = 100.0;
/// Lower bound on `|sigma|`; the envelope divides by it.
pub const SIGMA_MIN: f64 = 1e-3;
/// FFT length used for kernel spectra.
pub const SPECTRUM_LEN: usize = 1024;

/// Grid time of tap `k`, in seconds.
#[inline]
pub fn grid_time(k: usize) -> f64 {
    -1.0 + k as f64 / SAMPLE_RATE_HZ
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    /// Time offset of the envelope centre (s).
    pub u: f64,
    /// Envelope scale, used as `|sigma|` (s^2).
    pub sigma: f64,
    /// Carrier frequency (Hz).
    pub f: f64,
}

impl GaborParams {
    pub fn new(u: f64, sigma: f64, f: f64) -> Self {
        GaborParams { u, sigma, f }
    }

    pub fn waveform(&self) -> Vec<f64> {
        waveform(self.u, self.sigma, self.f)
    }
}

#[inline]
fn envelope<T: Real>(t: T, u: T, sigma: T) -> T {
    let pi = T::of(PI);
    (-pi * (t - u) * (t - u) / sigma.abs()).exp()
}

/// Samples one kernel on the 200-tap grid.
pub fn waveform<T: Real>(u: T, sigma: T, f: T) -> Vec<T> {
    let two_pi = T::of(2.0 * PI);
    (0..TAPS)
        .map(|k| {
            let t = T::of(grid_time(k));
            envelope(t, u, sigma) * (two_pi * f * t).cos()
        })
        .collect()
}

/// Chains a waveform adjoint `dg` (one value per tap) through the closed-form
/// partials of the kernel, returning `(d/du, d/dsigma, d/df)`.
pub fn param_grads<T: Real>(u: T, sigma: T, f: T, dg: &[T]) -> (T, T, T) {
    let pi = T::of(PI);
    let two_pi = T::of(2.0 * PI);
    let abs_s = sigma.abs();
    let sign = if sigma < T::zero() { -T::one() } else { T::one() };
    let (mut du, mut ds, mut df) = (T::zero(), T::zero(), T::zero());
    for (k, &g) in dg.iter().enumerate().take(TAPS) {
        let t = T::of(grid_time(k));
        let e = envelope(t, u, sigma);
        let phase = two_pi * f * t;
        let val = e * phase.cos();
        let dt = t - u;
        du += g * val * two_pi * dt / abs_s;
        ds += g * val * pi * dt * dt * sign / (sigma * sigma);
        df += g * (-e * two_pi * t * phase.sin());
    }
    (du, ds, df)
}

/// Zeroes a sigma gradient whose descent step would push `|sigma|` further
/// below the guard.
pub fn guard_sigma_grad(sigma: f64, grad: f64) -> f64 {
    let shrinking = sigma.signum() * grad > 0.0;
    if sigma.abs() <= SIGMA_MIN && shrinking {
        0.0
    } else {
        grad
    }
}

/// Clamps an updated sigma back onto the guard, keeping the pre-update sign.
pub fn clamp_sigma(previous: f64, updated: f64) -> f64 {
    let sign = if previous < 0.0 { -1.0 } else { 1.0 };
    if updated.abs() < SIGMA_MIN || updated.signum() != sign {
        sign * SIGMA_MIN
    } else {
        updated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Eog,
}

impl Modality {
    pub fn default_kernels(self) -> usize {
        match self {
            Modality::Eeg => 32,
            Modality::Eog => 8,
        }
    }

    /// Initial carrier-frequency range (Hz).
    pub fn frequency_range(self) -> (f64, f64) {
        match self {
            Modality::Eeg => (0.5, 25.0),
            Modality::Eog => (0.1, 5.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Eog => "eog",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborBank {
    pub modality: Modality,
    pub kernels: Vec<GaborParams>,
}

impl GaborBank {
    /// `u = 0`, log-spaced frequencies over the modality range, sigma drawn
    /// uniformly from `[0.05, 0.5]`.
    pub fn init(n_kernels: usize, modality: Modality, seed: u64) -> Result<Self> {
        if n_kernels == 0 {
            return Err(Error::Config("a Gabor bank needs at least one kernel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = modality.frequency_range();
        let kernels = (0..n_kernels)
            .map(|i| {
                let frac = if n_kernels == 1 { 0.0 } else { i as f64 / (n_kernels - 1) as f64 };
                let f = (lo.ln() + frac * (hi.ln() - lo.ln())).exp();
                let sigma = rng.random_range(0.05..=0.5);
                GaborParams::new(0.0, sigma, f)
            })
            .collect();
        Ok(GaborBank { modality, kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn waveforms(&self) -> Vec<Vec<f64>> {
        self.kernels.iter().map(GaborParams::waveform).collect()
    }
}

/// Per-kernel activation series of a Gabor layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborActivation {
    pub series: Vec<Vec<f64>>,
}

/// Direct valid-mode cross-correlation of every bank kernel with `x`.
pub fn gl_forward(x: &[f64], bank: &GaborBank) -> Result<GaborActivation> {
    if x.len() < TAPS {
        return Err(Error::Shape(format!(
            "Gabor layer input has {} samples, kernel needs {TAPS}",
            x.len()
        )));
    }
    let out_len = x.len() - TAPS + 1;
    let series = bank
        .waveforms()
        .iter()
        .map(|w| {
            (0..out_len)
                .map(|t| w.iter().zip(&x[t..t + TAPS]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(GaborActivation { series })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborLayerGrads {
    pub dx: Vec<f64>,
    /// `(d/du, d/dsigma, d/df)` per kernel.
    pub params: Vec<(f64, f64, f64)>,
}

/// Direct backward pass of [`gl_forward`] given the activation adjoint.
pub fn gl_backward(x: &[f64], bank: &GaborBank, adjoint: &GaborActivation) -> Result<GaborLayerGrads> {
    if adjoint.series.len() != bank.len() {
        return Err(Error::Shape("adjoint kernel count differs from bank".into()));
    }
    let out_len = x.len().saturating_sub(TAPS - 1);
    let mut dx = vec![0.0; x.len()];
    let mut params = Vec::with_capacity(bank.len());
    for (p, adj) in bank.kernels.iter().zip(&adjoint.series) {
        if adj.len() != out_len {
            return Err(Error::Shape("adjoint length differs from activation".into()));
        }
        let w = p.waveform();
        let mut dw = vec![0.0; TAPS];
        for (t, &g) in adj.iter().enumerate() {
            for k in 0..TAPS {
                dw[k] += g * x[t + k];
                dx[t + k] += g * w[k];
            }
        }
        params.push(param_grads(p.u, p.sigma, p.f, &dw));
    }
    Ok(GaborLayerGrads { dx, params })
}

/// Magnitude spectrum of a waveform zero-padded to [`SPECTRUM_LEN`]; returns
/// `(frequency_hz, magnitude)` for the non-negative bins.
pub fn magnitude_spectrum(wave: &[f64]) -> Vec<(f64, f64)> {
    let mut buf: Vec<Complex<f64>> = wave
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(SPECTRUM_LEN.max(wave.len()))
        .collect();
    let n = buf.len();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..=n / 2).map(|k| (k as f64 * SAMPLE_RATE_HZ / n as f64, buf[k].norm())).collect()
}

/// Frequency (Hz) of the largest spectral magnitude.
pub fn spectral_peak(wave: &[f64]) -> f64 {
    magnitude_spectrum(wave)
        .into_iter()
        .fold((0.0, f64::NEG_INFINITY), |best, (f, m)| if m > best.1 { (f, m) } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformRow {
    pub kernel: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub kernel: usize,
    pub frequency_hz: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelExport {
    pub params: Vec<(usize, Modality, GaborParams)>,
    pub waveforms: Vec<WaveformRow>,
    pub spectra: Vec<SpectrumRow>,
}

/// Waveform samples and spectra for a set of banks; kernel indices run
/// across banks in order (EEG first, then EOG).
pub fn export_banks(banks: &[&GaborBank]) -> KernelExport {
    let mut out = KernelExport {
        params: Vec::new(),
        waveforms: Vec::new(),
        spectra: Vec::new(),
    };
    let mut index = 0;
    for bank in banks {
        for p in &bank.kernels {
            let wave = p.waveform();
            out.params.push((index, bank.modality, *p));
            out.waveforms.extend(wave.iter().enumerate().map(|(k, &value)| WaveformRow {
                kernel: index,
                t: grid_time(k),
                value,
            }));
            out.spectra
                .extend(magnitude_spectrum(&wave).into_iter().map(|(frequency_hz, magnitude)| SpectrumRow {
                    kernel: index,
                    frequency_hz,
                    magnitude,
                }));
            index += 1;
        }
    }
    out
}

impl KernelExport {
    pub fn waveforms_csv(&self) -> String {
        let mut s = String::from("kernel,t,value\n");
        for r in &self.waveforms {
            s.push_str(&format!("{},{},{}\n", r.kernel, r.t, r.value));
        }
        s
    }

    pub fn spectra_csv(&self) -> String {
        let mut s = String::from("kernel,frequency_hz,magnitude\n");
        for r in &self.spectra {
            s.push_str(&format!("{},{},{}\n", r.kernel, r.frequency_hz, r.magnitude));
        }
        s
    }

    pub fn params_csv(&self) -> String {
        let mut s = String::from("kernel,modality,u,sigma,f,peak_hz\n");
        for (i, m, p) in &self.params {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                m.name(),
                p.u,
                p.sigma,
                p.f,
                spectral_peak(&p.waveform())
            ));
        }
        s
    }
}
