//! Pseudo-phoneme alphabet plus the audio and face renderers.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{SpeakerParams, FRAME_SIZE, SAMPLES_PER_FRAME};
#[cfg(test)]
use super::FPS;
use crate::audio::{MEL_FMAX, SAMPLE_RATE};

pub const NUM_PHONEMES: usize = 12;
/// Index of the pause symbol (zero amplitude, near-closed mouth).
pub const PAUSE: u8 = 11;

/// (f1, f2, amplitude, mouth aperture key, mouth width key).
///
/// Symbols 0 and 1 share a mouth shape but differ in formants: visually
/// identical, acoustically distinct, which is the ambiguity the latent
/// matching has to absorb.
const PHONEMES: [(f64, f64, f64, f64, f64); NUM_PHONEMES] = [
    (280.0, 2300.0, 0.90, 0.98, 0.55),
    (700.0, 1100.0, 0.90, 0.98, 0.55), // homophene of symbol 0
    (320.0, 800.0, 0.80, 0.74, 0.90),
    (500.0, 1500.0, 1.00, 0.92, 0.70),
    (900.0, 2500.0, 0.85, 0.80, 0.45),
    (400.0, 1900.0, 0.75, 0.70, 0.75),
    (600.0, 950.0, 0.95, 0.95, 0.85),
    (250.0, 1700.0, 0.70, 0.76, 0.60),
    (800.0, 1300.0, 0.90, 0.85, 0.95),
    (350.0, 2100.0, 0.80, 0.72, 0.50),
    (550.0, 750.0, 0.85, 0.78, 0.80),
    (0.0, 0.0, 0.00, 0.05, 0.40), // pause
];

pub fn phoneme_amp(p: u8) -> f64 {
    PHONEMES[p as usize].2
}

/// Pixel box (rows, cols) used for the mouth-region intensity statistic.
pub const MOUTH_BOX: (std::ops::Range<usize>, std::ops::Range<usize>) = (50..82, 26..70);

/// Segment of consecutive frames uttering one phoneme.
#[derive(Clone, Debug)]
pub struct PhonemeSegment {
    pub phoneme: u8,
    pub frames: usize,
}

/// Draws segments (3..=8 frames each) until exactly `total_frames` are
/// covered, avoiding immediate repeats so mouth shapes keep moving.
pub fn random_script(total_frames: usize, rng: &mut ChaCha8Rng) -> Vec<PhonemeSegment> {
    let mut out: Vec<PhonemeSegment> = Vec::new();
    let mut covered = 0;
    let mut prev = NUM_PHONEMES as u8;
    while covered < total_frames {
        let mut p = rng.gen_range(0..NUM_PHONEMES) as u8;
        if p == prev {
            p = (p + 1) % NUM_PHONEMES as u8;
        }
        let len = rng.gen_range(3..=8).min(total_frames - covered);
        out.push(PhonemeSegment { phoneme: p, frames: len });
        covered += len;
        prev = p;
    }
    out
}

pub fn script_to_track(script: &[PhonemeSegment]) -> Vec<u8> {
    let mut track = Vec::new();
    for seg in script {
        track.extend(std::iter::repeat(seg.phoneme).take(seg.frames));
    }
    track
}

/// Raised-cosine attack/release within a segment, `u` in [0, 1].
fn segment_envelope(u: f64) -> f64 {
    let edge = 0.3;
    if u < edge {
        0.5 * (1.0 - (std::f64::consts::PI * (1.0 - u / edge)).cos())
    } else if u > 1.0 - edge {
        0.5 * (1.0 - (std::f64::consts::PI * (1.0 - (1.0 - u) / edge)).cos())
    } else {
        1.0
    }
}

/// Two-Gaussian formant envelope evaluated at `hz`.
fn formant_gain(hz: f64, f1: f64, f2: f64) -> f64 {
    let bw = 130.0;
    let g = |c: f64| (-((hz - c) * (hz - c)) / (2.0 * bw * bw)).exp();
    0.05 + g(f1) + 0.7 * g(f2)
}

/// Renders utterance audio: harmonics of the speaker fundamental shaped by
/// the phoneme formants, amplitude-enveloped per segment, phase-continuous
/// across segment boundaries. Returns samples (peak about 0.85) and the
/// per-frame drive (mean squared envelope, i.e. the frame's acoustic
/// energy fraction) that the mouth aperture tracks.
pub fn render_audio(speaker: &SpeakerParams, script: &[PhonemeSegment]) -> (Vec<f64>, Vec<f64>) {
    let total_frames: usize = script.iter().map(|s| s.frames).sum();
    let total_samples = total_frames * SAMPLES_PER_FRAME;
    let f0 = speaker.f0_hz;
    let n_harm = ((MEL_FMAX / f0).floor() as usize).max(1);

    // Per-harmonic phase accumulators keep boundaries click-free.
    let mut phases = vec![0.0f64; n_harm];
    let dphi: Vec<f64> = (0..n_harm)
        .map(|h| std::f64::consts::TAU * f0 * (h + 1) as f64 / SAMPLE_RATE as f64)
        .collect();

    let mut samples = vec![0.0f64; total_samples];
    let mut frame_env = vec![0.0f64; total_frames];

    // The envelope is a per-frame staircase (attack/release sampled at frame
    // centers) with a 10 ms blend into each frame, so video frames and mel
    // steps see the same loudness.
    let blend = SAMPLES_PER_FRAME / 4;
    let mut prev_e = 0.0f64;
    let mut cursor = 0usize; // in samples
    for seg in script {
        let (f1, f2, amp, _, _) = PHONEMES[seg.phoneme as usize];
        let gains: Vec<f64> = (0..n_harm)
            .map(|h| {
                let hz = f0 * (h + 1) as f64;
                formant_gain(hz, f1, f2) / ((h + 1) as f64).powf(speaker.tilt)
            })
            .collect();
        let gain_norm: f64 = gains.iter().sum::<f64>().max(1e-9);

        for lf in 0..seg.frames {
            let e = amp * segment_envelope((lf as f64 + 0.5) / seg.frames as f64);
            let frame = cursor / SAMPLES_PER_FRAME;
            for i in 0..SAMPLES_PER_FRAME {
                let mix = (i as f64 / blend as f64).min(1.0);
                let env = prev_e + (e - prev_e) * mix;
                let mut v = 0.0;
                for h in 0..n_harm {
                    phases[h] += dphi[h];
                    v += gains[h] * phases[h].sin();
                }
                samples[cursor + i] = 0.85 * env * v / gain_norm;
                frame_env[frame] += env * env / SAMPLES_PER_FRAME as f64;
            }
            prev_e = e;
            cursor += SAMPLES_PER_FRAME;
        }
    }

    let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    if peak > 1.0 {
        for s in &mut samples {
            *s /= peak;
        }
    }
    (samples, frame_env)
}

fn inside_ellipse(r: f64, c: f64, cr: f64, cc: f64, ry: f64, rx: f64) -> bool {
    let dy = (r - cr) / ry.max(1e-6);
    let dx = (c - cc) / rx.max(1e-6);
    dy * dy + dx * dx <= 1.0
}

/// Renders one face frame; `aperture_key`/`width_key` come from the phoneme,
/// `env` from the audio envelope of the frame.
pub fn render_frame(
    speaker: &SpeakerParams,
    aperture_key: f64,
    width_key: f64,
    env: f64,
) -> Array3<u8> {
    let n = FRAME_SIZE;
    let mut img = Array3::<u8>::zeros((n, n, 3));
    let (face_cr, face_cc) = (44.0, 48.0);
    let (mouth_cr, mouth_cc) = (66.0, 48.0);
    let mouth_ry = 1.0 + 16.0 * aperture_key * env;
    let mouth_rx = 7.0 + 13.0 * width_key;

    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f64, c as f64);
            let (mut red, mut green, mut blue) = if inside_ellipse(
                rf,
                cf,
                face_cr,
                face_cc,
                speaker.face_ry,
                speaker.face_rx,
            ) {
                let shade = speaker.skin * (1.0 - 0.15 * (rf / n as f64));
                (shade, shade * 0.82, shade * 0.72)
            } else {
                (speaker.background, speaker.background, speaker.background * 1.1)
            };

            // eyes
            if inside_ellipse(rf, cf, 32.0, 31.0, 3.5, 4.5)
                || inside_ellipse(rf, cf, 32.0, 65.0, 3.5, 4.5)
            {
                red = 0.08;
                green = 0.08;
                blue = 0.10;
            }

            // mouth: bright interior so aperture raises local intensity
            if inside_ellipse(rf, cf, mouth_cr, mouth_cc, mouth_ry, mouth_rx) {
                red = 0.92;
                green = 0.62;
                blue = 0.55;
            }

            img[[r, c, 0]] = (red.clamp(0.0, 1.0) * 255.0).round() as u8;
            img[[r, c, 1]] = (green.clamp(0.0, 1.0) * 255.0).round() as u8;
            img[[r, c, 2]] = (blue.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Renders the full frame stack `(F, 96, 96, 3)` for a script.
pub fn render_frames(
    speaker: &SpeakerParams,
    script: &[PhonemeSegment],
    frame_env: &[f64],
) -> Array4<u8> {
    let total_frames: usize = script.iter().map(|s| s.frames).sum();
    debug_assert_eq!(frame_env.len(), total_frames);
    let mut out = Array4::<u8>::zeros((total_frames, FRAME_SIZE, FRAME_SIZE, 3));
    let mut fi = 0usize;
    for seg in script {
        let (_, _, _, ap, wd) = PHONEMES[seg.phoneme as usize];
        for _ in 0..seg.frames {
            let frame = render_frame(speaker, ap, wd, frame_env[fi]);
            out.slice_mut(ndarray::s![fi, .., .., ..]).assign(&frame);
            fi += 1;
        }
    }
    out
}

/// Mean pixel intensity over the mouth box of one `(96, 96, 3)` frame
/// (u8 scale), the statistic used by the audio-video alignment checks.
pub fn mouth_region_mean(frame: &ndarray::ArrayView3<u8>) -> f64 {
    let (rows, cols) = MOUTH_BOX;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in rows {
        for c in cols.clone() {
            for ch in 0..3 {
                total += frame[[r, c, ch]] as f64 / 255.0;
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Speaker parameters for index `k` of `n` speakers. Fundamentals are
/// stratified over [90, 280] Hz so any two speakers stay well separated.
pub fn speaker_params(k: usize, n: usize, rng: &mut ChaCha8Rng, id: String) -> SpeakerParams {
    let stratum = (280.0 - 90.0) / n as f64;
    let f0 = 90.0 + stratum * (k as f64 + rng.gen_range(0.3..0.7));
    SpeakerParams {
        id,
        f0_hz: f0,
        tilt: rng.gen_range(0.8..1.4),
        skin: rng.gen_range(0.45..0.70),
        background: rng.gen_range(0.10..0.22),
        face_rx: rng.gen_range(30.0..36.0),
        face_ry: rng.gen_range(36.0..42.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn speaker(seed: u64) -> SpeakerParams {
        speaker_params(1, 4, &mut rng_from(seed), "s".into())
    }

    #[test]
    fn script_covers_exactly() {
        let mut rng = rng_from(5);
        for total in [25usize, 50, 75, 77] {
            let script = random_script(total, &mut rng);
            assert_eq!(script.iter().map(|s| s.frames).sum::<usize>(), total);
            assert_eq!(script_to_track(&script).len(), total);
        }
    }

    #[test]
    fn audio_length_and_peak() {
        let mut rng = rng_from(6);
        let script = random_script(50, &mut rng);
        let sp = speaker(3);
        let (samples, env) = render_audio(&sp, &script);
        assert_eq!(samples.len(), 50 * SAMPLES_PER_FRAME);
        assert_eq!(env.len(), 50);
        let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        assert!(peak <= 1.0 && peak > 0.2, "peak {peak}");
    }

    #[test]
    fn pause_is_silent_and_mouth_nearly_closed() {
        let sp = speaker(4);
        let script = vec![PhonemeSegment { phoneme: PAUSE, frames: 10 }];
        let (samples, env) = render_audio(&sp, &script);
        assert!(samples.iter().all(|&s| s == 0.0));
        let f = render_frames(&sp, &script, &env);
        let open = render_frame(&sp, 0.9, 0.6, 1.0);
        let closed_mean = mouth_region_mean(&f.slice(ndarray::s![5, .., .., ..]));
        let open_mean = mouth_region_mean(&open.view());
        assert!(open_mean > closed_mean + 0.05, "{open_mean} vs {closed_mean}");
    }

    #[test]
    fn homophene_pair_same_mouth_different_audio() {
        let sp = speaker(9);
        let seg = |p| vec![PhonemeSegment { phoneme: p, frames: 8 }];
        let (a0, e0) = render_audio(&sp, &seg(0));
        let (a1, e1) = render_audio(&sp, &seg(1));
        let f0 = render_frames(&sp, &seg(0), &e0);
        let f1 = render_frames(&sp, &seg(1), &e1);
        assert_eq!(f0, f1, "homophene frames must be pixel-identical");
        let diff: f64 = a0.iter().zip(&a1).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1.0, "homophene audio must differ");
    }

    #[test]
    fn fundamental_frequencies_separated() {
        let mut rng = rng_from(7);
        let sps: Vec<SpeakerParams> = (0..4)
            .map(|k| speaker_params(k, 4, &mut rng, format!("spk{k}")))
            .collect();
        for i in 0..4 {
            for j in 0..i {
                assert!(
                    (sps[i].f0_hz - sps[j].f0_hz).abs() > 10.0,
                    "speakers {i}/{j} too close: {} vs {}",
                    sps[i].f0_hz,
                    sps[j].f0_hz
                );
            }
            assert!((90.0..=280.0).contains(&sps[i].f0_hz));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let sp = speaker(8);
        let mut r1 = rng_from(42);
        let mut r2 = rng_from(42);
        let s1 = random_script(30, &mut r1);
        let s2 = random_script(30, &mut r2);
        let (a1, e1) = render_audio(&sp, &s1);
        let (a2, e2) = render_audio(&sp, &s2);
        assert_eq!(a1, a2);
        assert_eq!(render_frames(&sp, &s1, &e1), render_frames(&sp, &s2, &e2));
    }

    /// FPS is fixed by the frame/sample ratio.
    #[test]
    fn frame_rate_constant() {
        assert_eq!(SAMPLES_PER_FRAME * FPS, SAMPLE_RATE as usize);
    }
}
