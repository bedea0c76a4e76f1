//! Band-limited resampling by spectral truncation / zero-padding.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Resamples a whole signal. Output length is `round(n * to_hz / from_hz)`.
///
/// The signal is treated as one period of a band-limited periodic sequence,
/// so content below the lower Nyquist frequency is carried over exactly and
/// everything above it is discarded.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(from_hz > 0.0 && to_hz > 0.0) || !from_hz.is_finite() || !to_hz.is_finite() {
        return Err(Error::Config(format!("sample rates must be positive, got {from_hz} -> {to_hz}")));
    }
    if from_hz == to_hz || signal.is_empty() {
        return Ok(signal.to_vec());
    }
    let n = signal.len();
    let m = (n as f64 * to_hz / from_hz).round() as usize;
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);

    let keep = n.min(m);
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let half = keep / 2;
    // Bins strictly below the kept Nyquist frequency, both signs.
    let pos = if keep.is_multiple_of(2) { half } else { half + 1 };
    out[..pos].copy_from_slice(&spec[..pos]);
    for k in 1..=(keep - 1) / 2 {
        out[m - k] = spec[n - k];
    }
    if keep.is_multiple_of(2) && keep > 0 {
        if m < n {
            // Both aliases of the new Nyquist bin fold onto one.
            out[half] = spec[half] + spec[n - half];
        } else {
            let split = spec[half] * 0.5;
            out[half] = split;
            out[m - half] += split;
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    Ok(out.into_iter().map(|c| c.re * scale).collect())
}
