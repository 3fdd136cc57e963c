//! Griffin-Lim phase recovery from mel magnitudes.
//!
//! Mel power is lifted back to the linear spectrum through the right
//! pseudo-inverse of the filterbank, then phases are refined iteratively
//! starting from all-zero phase, which keeps the whole inversion
//! deterministic.

use nalgebra::DMatrix;
use ndarray::Array2;
use rustfft::num_complex::Complex;

use super::mel::{mel_to_power, MelFilterbank};
use super::stft::{istft, stft, window_sum};
use super::{MelSpectrogram, Waveform, HOP, N_FFT, N_MELS};
use crate::error::{Error, Result};

/// Right pseudo-inverse `fb^T (fb fb^T)^-1`, `(bins, N_MELS)`.
fn filterbank_pinv(fb: &MelFilterbank) -> Array2<f64> {
    let bins = N_FFT / 2 + 1;
    let w = DMatrix::from_fn(N_MELS, bins, |r, c| fb.weights[[r, c]]);
    let gram = &w * w.transpose();
    let inv = gram
        .try_inverse()
        .expect("mel filterbank gram matrix is invertible");
    let pinv = w.transpose() * inv;
    Array2::from_shape_fn((bins, N_MELS), |(r, c)| pinv[(r, c)])
}

pub fn griffin_lim(m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    if iterations == 0 {
        return Err(Error::Audio("griffin_lim needs at least one iteration".into()));
    }
    for &v in m.frames().iter() {
        if !v.is_finite() {
            return Err(Error::Audio("non-finite mel entry".into()));
        }
    }
    let steps = m.num_steps();
    let bins = N_FFT / 2 + 1;
    let fb = MelFilterbank::build();
    let pinv = filterbank_pinv(&fb);
    let scale = 2.0 / window_sum();

    // Target linear-magnitude spectrum per frame (analysis scaling undone).
    let power = mel_to_power(m); // (steps, N_MELS)
    let mut mag = vec![vec![0.0f64; bins]; steps];
    for t in 0..steps {
        for k in 0..bins {
            let mut p = 0.0;
            for b in 0..N_MELS {
                p += pinv[[k, b]] * power[[t, b]];
            }
            mag[t][k] = p.max(0.0).sqrt() / scale;
        }
    }

    // Zero initial phase.
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|row| row.iter().map(|&a| Complex::new(a, 0.0)).collect())
        .collect();

    let mut signal = istft(&spec);
    for _ in 1..iterations {
        let est = stft(&signal);
        for t in 0..steps.min(est.len()) {
            for k in 0..bins {
                let c = est[t][k];
                let n = c.norm();
                spec[t][k] = if n > 1e-12 {
                    c / n * mag[t][k]
                } else {
                    Complex::new(mag[t][k], 0.0)
                };
            }
        }
        signal = istft(&spec);
    }

    debug_assert_eq!(signal.len(), steps * HOP);
    Waveform::new_normalized(signal)
}
