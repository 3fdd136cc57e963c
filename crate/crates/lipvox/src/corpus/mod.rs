//! Deterministic synthetic audio-visual corpus.
//!
//! Each utterance is a pseudo-phoneme sequence rendered two ways from the
//! same script: audio as harmonic two-formant tones on a per-speaker
//! fundamental, video as a face whose mouth aperture tracks the amplitude
//! envelope and whose shape keys on the phoneme. Two phonemes share a mouth
//! shape by construction, so lip input is genuinely ambiguous about content.

mod generate;
mod sampling;
pub mod synth;

pub use generate::{generate_corpus, load_frames_dir, load_manifest, load_utterance, save_manifest, split_manifest};
pub use sampling::{
    batch_iterator, lips_to_tensor, mels_to_tensor, sample_window, sample_window_precomputed,
    BatchStream, CorpusCache, LoadedUtterance,
};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::audio::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

pub const FPS: usize = 25;
pub const FRAME_SIZE: usize = 96;
/// Frames per training window (one second of video).
pub const WINDOW_FRAMES: usize = 25;
/// Mel steps per training window (one second of audio).
pub const WINDOW_STEPS: usize = 100;
pub const SAMPLES_PER_FRAME: usize = 640;

/// One-second lip crop sequence, `(25, 96, 96, 3)` in [0, 1].
#[derive(Clone, Debug)]
pub struct LipWindow {
    frames: Array4<f64>,
}

impl LipWindow {
    pub fn new(frames: Array4<f64>) -> Result<Self> {
        let s = frames.shape();
        if s != [WINDOW_FRAMES, FRAME_SIZE, FRAME_SIZE, 3] {
            return Err(Error::Corpus(format!("bad lip window shape {s:?}")));
        }
        for &v in frames.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Corpus(format!("lip pixel out of [0,1]: {v}")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn fps(&self) -> usize {
        FPS
    }
}

/// A loaded utterance: frames kept as u8 (lossless w.r.t. the PNG files).
#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker_id: String,
    pub frames: Array4<u8>, // (F, 96, 96, 3)
    pub audio: Waveform,
    pub phoneme_track: Vec<u8>, // one symbol per frame
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.num_frames();
        if self.phoneme_track.len() != f {
            return Err(Error::Corpus("phoneme track length mismatch".into()));
        }
        let audio_frames = self.audio.len() as f64 / SAMPLES_PER_FRAME as f64;
        if (audio_frames - f as f64).abs() > 1.0 {
            return Err(Error::Corpus(format!(
                "audio duration {audio_frames} frames vs {f} video frames"
            )));
        }
        Ok(())
    }

    /// Frames `[start, start+25)` as a normalized lip window.
    pub fn lip_window(&self, start: usize) -> Result<LipWindow> {
        if start + WINDOW_FRAMES > self.num_frames() {
            return Err(Error::Corpus(format!(
                "window at {start} out of range ({} frames)",
                self.num_frames()
            )));
        }
        let slice = self
            .frames
            .slice(ndarray::s![start..start + WINDOW_FRAMES, .., .., ..])
            .mapv(|v| v as f64 / 255.0);
        LipWindow::new(slice)
    }
}

/// Per-speaker synthesis parameters; fully determined by the corpus seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub id: String,
    /// Fundamental frequency in Hz, in [90, 280].
    pub f0_hz: f64,
    /// Spectral rolloff exponent for harmonic amplitudes.
    pub tilt: f64,
    pub skin: f64,
    pub background: f64,
    pub face_rx: f64,
    pub face_ry: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub speaker_id: String,
    pub rel_path: String,
    pub frames: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(skip, default)]
    pub root: PathBuf,
    pub seed: u64,
    pub speakers: Vec<SpeakerParams>,
    pub utterances: Vec<UtteranceEntry>,
}

impl CorpusManifest {
    pub fn speaker(&self, id: &str) -> Option<&SpeakerParams> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn utterance_dir(&self, entry: &UtteranceEntry) -> PathBuf {
        self.root.join(&entry.rel_path)
    }
}

/// One training sample: lips and mel cut from the same utterance at the same
/// start, plus an independently placed one-second voice reference.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub lips: LipWindow,
    pub mel: MelSpectrogram,
    pub speaker_ref: Waveform,
    pub speaker_id: String,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.mel.num_steps() != WINDOW_STEPS {
            return Err(Error::Corpus(format!(
                "training mel must have {WINDOW_STEPS} steps, got {}",
                self.mel.num_steps()
            )));
        }
        if self.speaker_ref.len() != crate::audio::SAMPLE_RATE as usize {
            return Err(Error::Corpus("speaker reference must be one second".into()));
        }
        Ok(())
    }
}
