//! Waveform <-> melspectrogram conversion and Griffin-Lim inversion.
//!
//! Fixed pipeline constants: 16 kHz mono audio, 10 ms hop, 25 ms Hann
//! window, 512-point FFT, 80 mel bands spanning 55-7600 Hz. Log mel power is
//! clamped to [-11.5, 2.3] nats and affinely mapped to [0, 1], so train and
//! eval normalization are identical by construction.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::griffin_lim;
pub use mel::{denormalize_log_mel, mel_band_for_freq, melspectrogram, normalize_log_mel, MelFilterbank};
pub use wav::{load_wav, save_wav};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 160; // 10 ms
pub const WIN: usize = 400; // 25 ms
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const MEL_FMIN: f64 = 55.0;
pub const MEL_FMAX: f64 = 7_600.0;
/// Clamp range for ln(mel power); spans roughly 120 dB.
pub const LOG_FLOOR: f64 = -11.5;
pub const LOG_CEIL: f64 = 2.3;

/// Mel steps produced by one second of audio.
pub const STEPS_PER_SECOND: usize = SAMPLE_RATE as usize / HOP;

/// Mono 16 kHz waveform with samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Audio(format!("non-finite sample at {i}")));
            }
            if s.abs() > 1.0 + 1e-9 {
                return Err(Error::Audio(format!("sample {i} out of range: {s}")));
            }
        }
        Ok(Self { samples })
    }

    /// Scales down to peak 1 if needed, then constructs.
    pub fn new_normalized(mut samples: Vec<f64>) -> Result<Self> {
        let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        if !peak.is_finite() {
            return Err(Error::Audio("non-finite sample".into()));
        }
        if peak > 1.0 {
            for s in &mut samples {
                *s /= peak;
            }
        }
        Self::new(samples)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Contiguous slice as a new waveform.
    pub fn segment(&self, start: usize, len: usize) -> Result<Waveform> {
        if start + len > self.samples.len() {
            return Err(Error::Audio(format!(
                "segment [{start}, {}) out of range (len {})",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Waveform { samples: self.samples[start..start + len].to_vec() })
    }
}

/// Normalized log-mel matrix, `(num_steps, 80)` with entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.shape()[1] != N_MELS {
            return Err(Error::Audio(format!(
                "expected {N_MELS} mel bands, got {}",
                frames.shape()[1]
            )));
        }
        for &v in frames.iter() {
            if !v.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::Audio(format!("mel entry out of [0,1]: {v}")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn num_steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP as f64 / SAMPLE_RATE as f64
    }

    pub fn win_seconds(&self) -> f64 {
        WIN as f64 / SAMPLE_RATE as f64
    }
}

/// Contiguous `[start, start+len)` slice of the time axis, values unchanged.
pub fn mel_segment(m: &MelSpectrogram, start: usize, len: usize) -> Result<MelSpectrogram> {
    if start + len > m.num_steps() {
        return Err(Error::Audio(format!(
            "mel segment [{start}, {}) out of range (steps {})",
            start + len,
            m.num_steps()
        )));
    }
    Ok(MelSpectrogram {
        frames: m.frames.slice(ndarray::s![start..start + len, ..]).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sine(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let s: Vec<f64> = (0..n)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s).unwrap()
    }

    #[test]
    fn one_second_gives_100_steps() {
        let m = melspectrogram(&sine(440.0, 1.0, 0.8)).unwrap();
        assert_eq!(m.num_steps(), 100);
        assert_eq!(m.frames().shape(), &[100, 80]);
    }

    #[test]
    fn silence_maps_to_floor() {
        let w = Waveform::new(vec![0.0; 16000]).unwrap();
        let m = melspectrogram(&w).unwrap();
        for &v in m.frames().iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn sine_peaks_in_expected_band() {
        let m = melspectrogram(&sine(440.0, 1.0, 0.8)).unwrap();
        // Independent oracle: locate the band whose triangular peak is
        // closest to 440 Hz straight from the mel-scale formula.
        let expected = mel_band_for_freq(440.0);
        let mean_per_band: Vec<f64> = (0..N_MELS)
            .map(|b| m.frames().column(b).mean().unwrap())
            .collect();
        let argmax = mean_per_band
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            (argmax as isize - expected as isize).abs() <= 1,
            "argmax {argmax}, expected near {expected}"
        );
    }

    #[test]
    fn too_short_waveform_errors() {
        let w = Waveform::new(vec![0.1; 399]).unwrap();
        assert!(melspectrogram(&w).is_err());
    }

    #[test]
    fn length_covariance_under_concat() {
        for (a, b) in [(16000, 8000), (7013, 9241), (401, 12345)] {
            let wa = sine(300.0, a as f64 / 16000.0, 0.5);
            let wb = sine(700.0, b as f64 / 16000.0, 0.5);
            let mut cat = wa.samples().to_vec();
            cat.extend_from_slice(wb.samples());
            let mc = melspectrogram(&Waveform::new(cat).unwrap()).unwrap();
            let sa = melspectrogram(&wa).unwrap().num_steps();
            let sb = melspectrogram(&wb).unwrap().num_steps();
            let diff = mc.num_steps() as isize - (sa + sb) as isize;
            assert!(diff.abs() <= 1, "steps {} vs {} + {}", mc.num_steps(), sa, sb);
        }
    }

    #[test]
    fn normalization_is_order_preserving() {
        let mut prev = -1.0;
        for i in 0..2000 {
            let raw = -15.0 + i as f64 * 0.01; // sweep past both clamp edges
            let n = normalize_log_mel(raw);
            assert!((0.0..=1.0).contains(&n));
            assert!(n >= prev, "normalize must be monotone");
            prev = n;
        }
    }

    #[test]
    fn mel_segment_semantics() {
        let m = melspectrogram(&sine(500.0, 1.0, 0.6)).unwrap();
        let full = mel_segment(&m, 0, m.num_steps()).unwrap();
        assert_eq!(full.frames(), m.frames());

        assert!(mel_segment(&m, 90, 20).is_err());

        let s = mel_segment(&m, 10, 5).unwrap();
        for t in 0..5 {
            for b in 0..N_MELS {
                assert_eq!(s.frames()[[t, b]], m.frames()[[10 + t, b]]);
            }
        }
    }

    #[test]
    fn griffin_lim_recovers_tone_and_length() {
        let tone = sine(440.0, 1.0, 0.8);
        let m = melspectrogram(&tone).unwrap();
        let rec = griffin_lim(&m, 30).unwrap();
        assert_eq!(rec.len(), m.num_steps() * HOP);

        // FFT-peak oracle on the reconstruction.
        let n = 8192;
        let mut planner = rustfft::FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> = rec.samples()[..n]
            .iter()
            .map(|&s| rustfft::num_complex::Complex::new(s, 0.0))
            .collect();
        fft.process(&mut buf);
        let peak = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let peak_hz = peak as f64 * SAMPLE_RATE as f64 / n as f64;
        let bin_hz = SAMPLE_RATE as f64 / n as f64;
        assert!(
            (peak_hz - 440.0).abs() <= bin_hz + 1e-9,
            "dominant frequency {peak_hz} Hz"
        );
    }

    #[test]
    fn griffin_lim_deterministic() {
        let m = melspectrogram(&sine(300.0, 1.0, 0.5)).unwrap();
        let a = griffin_lim(&m, 15).unwrap();
        let b = griffin_lim(&m, 15).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn griffin_lim_rejects_bad_input() {
        let frames = Array2::from_elem((10, 80), 0.5);
        let m = MelSpectrogram::new(frames).unwrap();
        assert!(griffin_lim(&m, 0).is_err());
    }

    #[test]
    fn mel_roundtrip_error_is_small() {
        // melspectrogram(griffin_lim(m)) should stay close to m for tonal
        // material; the corpus-level bound lives in the acceptance suite.
        let mut samples = Vec::new();
        for (f, a) in [(220.0, 0.7), (880.0, 0.5), (1760.0, 0.6)] {
            samples.extend_from_slice(sine(f, 0.4, a).samples());
        }
        let m = melspectrogram(&Waveform::new(samples).unwrap()).unwrap();
        let rec = griffin_lim(&m, 60).unwrap();
        let m2 = melspectrogram(&rec).unwrap();
        let mae = (&m.frames().view() - &m2.frames().view())
            .mapv(f64::abs)
            .mean()
            .unwrap();
        assert!(mae < 0.15, "roundtrip MAE {mae}");
    }
}
