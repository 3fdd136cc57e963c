//! Windowed-sinc resampling to the pipeline's fixed 16 kHz rate.

/// Resamples `input` from `from_rate` to `to_rate` with a Hann-windowed sinc
/// kernel (32 taps per side), low-passed below the narrower Nyquist.
pub fn resample(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = ((input.len() as f64) * ratio).round() as usize;
    let cutoff = 0.95 * ratio.min(1.0); // fraction of input Nyquist
    let taps = 32isize;

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let base = center.floor() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for i in (base - taps)..=(base + taps) {
            if i < 0 || i >= input.len() as isize {
                continue;
            }
            let d = center - i as f64;
            let sinc = if d.abs() < 1e-12 {
                1.0
            } else {
                let x = std::f64::consts::PI * d * cutoff;
                x.sin() / x
            };
            let win = 0.5 * (1.0 + (std::f64::consts::PI * d / (taps as f64 + 1.0)).cos());
            let w = sinc * cutoff * win;
            acc += w * input[i as usize];
            wsum += w;
        }
        out.push(if wsum.abs() > 1e-9 { acc / wsum } else { acc });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_3x_length() {
        let input = vec![0.1; 48_000];
        let out = resample(&input, 48_000, 16_000);
        assert_eq!(out.len(), 16_000);
    }

    #[test]
    fn tone_survives_downsampling() {
        let from = 48_000u32;
        let sig: Vec<f64> = (0..48_000)
            .map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / from as f64).sin())
            .collect();
        let out = resample(&sig, from, 16_000);
        // Compare against the directly synthesized 16 kHz tone away from edges.
        let mut max_err: f64 = 0.0;
        for (i, &v) in out.iter().enumerate().skip(100).take(out.len() - 200) {
            let want = (std::f64::consts::TAU * 440.0 * i as f64 / 16_000.0).sin();
            max_err = max_err.max((v - want).abs());
        }
        assert!(max_err < 0.05, "max deviation {max_err}");
    }
}
