//! HTK-style mel filterbank and the normalized log-mel transform.

use ndarray::Array2;

use super::stft::{stft, window_sum};
use super::{MelSpectrogram, Waveform, LOG_CEIL, LOG_FLOOR, MEL_FMAX, MEL_FMIN, N_FFT, N_MELS, SAMPLE_RATE, WIN};
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank `(N_MELS, N_FFT/2+1)` with unit-peak filters.
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn build() -> Self {
        let bins = N_FFT / 2 + 1;
        let mel_lo = hz_to_mel(MEL_FMIN);
        let mel_hi = hz_to_mel(MEL_FMAX);
        let points: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();

        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut weights = Array2::<f64>::zeros((N_MELS, bins));
        for m in 0..N_MELS {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                weights[[m, k]] = w;
            }
        }
        Self { weights, centers_hz: points[1..=N_MELS].to_vec() }
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.centers_hz[band]
    }
}

/// Band whose triangular peak is closest to `freq`.
pub fn mel_band_for_freq(freq: f64) -> usize {
    let fb = MelFilterbank::build();
    (0..N_MELS)
        .min_by(|&a, &b| {
            (fb.center_hz(a) - freq)
                .abs()
                .partial_cmp(&(fb.center_hz(b) - freq).abs())
                .unwrap()
        })
        .unwrap()
}

/// Clamped affine map of ln(mel power) into [0, 1].
pub fn normalize_log_mel(ln_power: f64) -> f64 {
    ((ln_power - LOG_FLOOR) / (LOG_CEIL - LOG_FLOOR)).clamp(0.0, 1.0)
}

pub fn denormalize_log_mel(v: f64) -> f64 {
    v * (LOG_CEIL - LOG_FLOOR) + LOG_FLOOR
}

/// `(floor(len/160), 80)` normalized log-mel matrix.
pub fn melspectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.len() < WIN {
        return Err(Error::Audio(format!(
            "waveform shorter than one window ({} < {WIN} samples)",
            w.len()
        )));
    }
    let fb = MelFilterbank::build();
    let spec = stft(w.samples());
    let scale = 2.0 / window_sum();
    let bins = N_FFT / 2 + 1;

    let mut frames = Array2::<f64>::zeros((spec.len(), N_MELS));
    let mut power = vec![0.0f64; bins];
    for (t, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            let a = c.norm() * scale;
            power[k] = a * a;
        }
        for m in 0..N_MELS {
            let mut e = 0.0;
            for k in 0..bins {
                e += fb.weights[[m, k]] * power[k];
            }
            frames[[t, m]] = normalize_log_mel(e.max(f64::MIN_POSITIVE).ln());
        }
    }
    MelSpectrogram::new(frames)
}

/// Inverts the normalization back to linear mel power.
pub(super) fn mel_to_power(m: &MelSpectrogram) -> Array2<f64> {
    m.frames().mapv(|v| denormalize_log_mel(v).exp())
}
