//! WAV file I/O. Input may be any PCM rate/channel count; output is always
//! 16-bit mono 16 kHz.

use std::path::Path;

use super::resample::resample;
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Loads a PCM WAV file, downmixes to mono, resamples to 16 kHz and
/// peak-normalizes to at most 1.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio("zero channels".into()));
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let max = (1i64 << (spec.bits_per_sample - 1)) as f64;
            let samples: std::result::Result<Vec<i32>, _> = reader.samples::<i32>().collect();
            samples
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
                .into_iter()
                .map(|s| s as f64 / max)
                .collect()
        }
        hound::SampleFormat::Float => {
            let samples: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
            samples
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
                .into_iter()
                .map(|s| s as f64)
                .collect()
        }
    };

    let frames = interleaved.len() / channels;
    let mono: Vec<f64> = (0..frames)
        .map(|i| {
            interleaved[i * channels..(i + 1) * channels].iter().sum::<f64>() / channels as f64
        })
        .collect();

    let at_rate = resample(&mono, spec.sample_rate, SAMPLE_RATE);
    Waveform::new_normalized(at_rate)
}

/// Writes 16-bit mono 16 kHz PCM.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(format!("{e}")))?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Audio(format!("{e}")))?;
    }
    writer.finalize().map_err(|e| Error::Audio(format!("{e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_test_wav(path: &Path, rate: u32, channels: u16, seconds: f64) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        let n = (seconds * rate as f64) as usize;
        for i in 0..n {
            let s = (std::f64::consts::TAU * 440.0 * i as f64 / rate as f64).sin();
            for _ in 0..channels {
                w.write_sample((s * 20000.0) as i16).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn mono_16k_loads_identity_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_test_wav(&p, 16_000, 1, 1.0);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
    }

    #[test]
    fn stereo_48k_downmixes_and_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_test_wav(&p, 48_000, 2, 1.0);
        let w = load_wav(&p).unwrap();
        // sample-count oracle: duration * target rate
        assert_eq!(w.len(), 16_000);
        assert!((w.duration_seconds() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_wav(Path::new("/nonexistent/nope.wav")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let samples: Vec<f64> = (0..16_000)
            .map(|i| 0.4 * (std::f64::consts::TAU * 330.0 * i as f64 / 16_000.0).sin())
            .collect();
        let w = Waveform::new(samples).unwrap();
        save_wav(&p, &w).unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.len(), w.len());
        let max_err = r
            .samples()
            .iter()
            .zip(w.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-3, "16-bit quantization error {max_err}");
    }
}
