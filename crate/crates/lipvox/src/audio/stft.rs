//! Short-time Fourier transform with fixed hop/window, reflect padding and
//! floor(len/hop) frames, so one second is exactly 100 steps.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{HOP, N_FFT, WIN};

pub fn hann_window() -> Vec<f64> {
    (0..WIN)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / WIN as f64).cos()))
        .collect()
}

pub fn window_sum() -> f64 {
    hann_window().iter().sum()
}

/// Reflect-pads by WIN/2 on each side (zero-pads if the signal is shorter
/// than the pad).
fn padded(signal: &[f64]) -> Vec<f64> {
    let pad = WIN / 2;
    let n = signal.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        let idx = pad - i;
        out.push(if idx < n { signal[idx] } else { 0.0 });
    }
    out.extend_from_slice(signal);
    for i in 0..pad {
        let idx = n.saturating_sub(2 + i);
        out.push(if n >= 2 { signal[idx] } else { 0.0 });
    }
    out
}

/// Complex STFT: `floor(len/HOP)` frames x `N_FFT/2 + 1` bins.
pub fn stft(signal: &[f64]) -> Vec<Vec<Complex<f64>>> {
    let frames = signal.len() / HOP;
    let win = hann_window();
    let padded = padded(signal);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let bins = N_FFT / 2 + 1;

    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for k in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < WIN {
                Complex::new(padded[k * HOP + i] * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    out
}

/// Inverse STFT by windowed overlap-add; returns exactly `frames * HOP`
/// samples aligned with the analysis framing.
pub fn istft(spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
    let frames = spec.len();
    if frames == 0 {
        return Vec::new();
    }
    let win = hann_window();
    let bins = N_FFT / 2 + 1;
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(N_FFT);

    let pad = WIN / 2;
    let total = (frames - 1) * HOP + WIN + pad;
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];

    for (k, frame) in spec.iter().enumerate() {
        debug_assert_eq!(frame.len(), bins);
        for i in 0..N_FFT {
            buf[i] = if i < bins {
                frame[i]
            } else {
                frame[N_FFT - i].conj()
            };
        }
        ifft.process(&mut buf);
        for i in 0..WIN {
            let v = buf[i].re / N_FFT as f64;
            acc[k * HOP + i] += v * win[i];
            norm[k * HOP + i] += win[i] * win[i];
        }
    }

    let out_len = frames * HOP;
    let mut out = vec![0.0f64; out_len];
    for i in 0..out_len {
        let j = i + pad;
        if norm[j] > 1e-9 {
            out[i] = acc[j] / norm[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_floor_len_over_hop() {
        for len in [400usize, 16000, 16159, 16160, 12345] {
            let sig = vec![0.25; len];
            assert_eq!(stft(&sig).len(), len / HOP, "len {len}");
        }
    }

    #[test]
    fn stft_istft_reconstructs_interior() {
        let sig: Vec<f64> = (0..16000)
            .map(|i| 0.7 * (std::f64::consts::TAU * 523.0 * i as f64 / 16000.0).sin())
            .collect();
        let rec = istft(&stft(&sig));
        assert_eq!(rec.len(), 16000);
        let mut err: f64 = 0.0;
        for i in 400..15600 {
            err = err.max((rec[i] - sig[i]).abs());
        }
        assert!(err < 1e-8, "interior reconstruction error {err}");
    }
}
