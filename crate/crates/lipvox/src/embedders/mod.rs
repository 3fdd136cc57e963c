//! Frozen surrogate networks: a content encoder that yields per-step
//! 1024-dim features carrying "what is being said", and a speaker embedder
//! that maps one second of mel to a unit-norm 256-dim voice vector.
//!
//! Both are small convolutional nets pretrained on the synthetic corpus
//! (phoneme classification and speaker classification respectively), then
//! frozen. They operate on melspectrograms rather than waveforms so the
//! voice loss can backpropagate straight into a generated mel.

mod pretrain;

pub use pretrain::{pretrain_surrogates, PretrainConfig, PretrainReport};

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::audio::MelSpectrogram;
use crate::corpus::synth::NUM_PHONEMES;
use crate::error::{Error, Result};
use crate::nn::{Conv1dLayer, Linear, ParamStore};
use crate::tensor::{no_grad, Arr, Tensor};

pub const CONTENT_DIM: usize = 1024;
pub const SPEAKER_DIM: usize = 256;
/// Accepted step counts for speaker embedding inputs (one second +/- 5).
pub const SPEAKER_STEPS: std::ops::RangeInclusive<usize> = 95..=105;

/// Per-timestep content features, `(num_steps, 1024)`.
#[derive(Clone, Debug)]
pub struct ContentEmbedding {
    pub values: Array2<f64>,
}

impl ContentEmbedding {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.shape()[1] != CONTENT_DIM {
            return Err(Error::Model(format!(
                "content embedding dim {} != {CONTENT_DIM}",
                values.shape()[1]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite content embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn num_steps(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Unit-norm 256-dim voice vector.
#[derive(Clone, Debug)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != SPEAKER_DIM {
            return Err(Error::Model(format!("speaker embedding dim {}", values.len())));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Model(format!("speaker embedding norm {norm}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn negated(&self) -> SpeakerEmbedding {
        SpeakerEmbedding { values: self.values.iter().map(|v| -v).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(Arr::from_shape_vec(IxDyn(&[1, SPEAKER_DIM]), self.values.clone()).unwrap())
    }
}

/// Cosine similarity with the epsilon-guarded denominator.
pub fn voice_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-8)
}

/// Temporal conv stack over mel: 80 -> 256 -> 512 -> 1024 channels, plus a
/// phoneme classification head used only during pretraining.
pub struct ContentEncoder {
    c1: Conv1dLayer,
    c2: Conv1dLayer,
    c3: Conv1dLayer,
    pub head: Linear,
}

impl ContentEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let p = "surrogate.content";
        Self {
            c1: Conv1dLayer::new(store, &format!("{p}.c1"), 80, 256, 5, 1, 2, rng),
            c2: Conv1dLayer::new(store, &format!("{p}.c2"), 256, 512, 5, 1, 2, rng),
            c3: Conv1dLayer::new(store, &format!("{p}.c3"), 512, CONTENT_DIM, 3, 1, 1, rng),
            head: Linear::new(store, &format!("{p}.head"), CONTENT_DIM, NUM_PHONEMES, rng),
        }
    }

    /// `(B, T, 80) -> (B, T, 1024)`
    pub fn features(&self, mel: &Tensor) -> Tensor {
        let h = self.c1.forward(mel).relu();
        let h = self.c2.forward(&h).relu();
        self.c3.forward(&h).relu()
    }

    /// Per-step phoneme logits for pretraining, `(B*T, NUM_PHONEMES)`.
    pub fn logits(&self, mel: &Tensor) -> Tensor {
        let f = self.features(mel);
        let (b, t, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        self.head.forward(&f.reshape(&[b * t, d]))
    }

    /// Single-spectrogram encoding (no gradients).
    pub fn encode(&self, m: &MelSpectrogram) -> Result<ContentEmbedding> {
        let out = no_grad(|| {
            let x = crate::corpus::mels_to_tensor(&[m]);
            self.features(&x)
        });
        let t = m.num_steps();
        let flat: Vec<f64> = out.value().iter().copied().collect();
        ContentEmbedding::new(Array2::from_shape_vec((t, CONTENT_DIM), flat).expect("shape"))
    }
}

/// Strided conv stack, mean pool over time, projection, L2 normalization.
pub struct SpeakerEmbedder {
    c1: Conv1dLayer,
    c2: Conv1dLayer,
    proj: Linear,
    pub head: Linear,
}

impl SpeakerEmbedder {
    pub fn new(store: &mut ParamStore, num_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = "surrogate.speaker";
        Self {
            c1: Conv1dLayer::new(store, &format!("{p}.c1"), 80, 128, 5, 2, 2, rng),
            c2: Conv1dLayer::new(store, &format!("{p}.c2"), 128, 256, 5, 2, 2, rng),
            proj: Linear::new(store, &format!("{p}.proj"), 256, SPEAKER_DIM, rng),
            head: Linear::new(store, &format!("{p}.head"), SPEAKER_DIM, num_speakers, rng),
        }
    }

    /// `(B, ~100, 80) -> (B, 256)` unit rows; differentiable w.r.t. the mel.
    pub fn embed_tensor(&self, mel: &Tensor) -> Tensor {
        let h = self.c1.forward(mel).relu();
        let h = self.c2.forward(&h).relu();
        let pooled = h.mean_axis(1); // (B, 256)
        let e = self.proj.forward(&pooled);
        let norm = e
            .square()
            .sum_axis(1)
            .add_scalar(1e-12)
            .sqrt()
            .reshape(&[e.shape()[0], 1])
            .broadcast_as(&[e.shape()[0], SPEAKER_DIM]);
        e.div(&norm)
    }

    pub fn class_logits(&self, mel: &Tensor) -> Tensor {
        self.head.forward(&self.embed_tensor(mel))
    }

    /// Embeds a one-second melspectrogram (100 +/- 5 steps).
    pub fn embed(&self, m: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        if !SPEAKER_STEPS.contains(&m.num_steps()) {
            return Err(Error::Model(format!(
                "speaker embedding needs about one second of mel, got {} steps",
                m.num_steps()
            )));
        }
        let out = no_grad(|| {
            let x = crate::corpus::mels_to_tensor(&[m]);
            self.embed_tensor(&x)
        });
        SpeakerEmbedding::new(out.value().iter().copied().collect())
    }
}

/// The two frozen networks as one unit (they share the checkpoint section
/// prefix `surrogate.`).
pub struct Surrogates {
    pub content: ContentEncoder,
    pub speaker: SpeakerEmbedder,
    pub num_speakers: usize,
}

impl Surrogates {
    pub fn new(store: &mut ParamStore, num_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            content: ContentEncoder::new(store, rng),
            speaker: SpeakerEmbedder::new(store, num_speakers, rng),
            num_speakers,
        }
    }
}
