//! Inference: decode speech from the lip distribution of a silent frame
//! sequence, conditioned on a voice reference.

use ndarray::Array4;

use crate::audio::{griffin_lim, melspectrogram, MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::{reparam_sample, temporal_upsample, LatentDistribution};
use crate::rng::rng_from;
use crate::tensor::{no_grad, Arr, Tensor};
use crate::train::{apply_crop_mode, LoadedModel};

pub const GRIFFIN_LIM_ITERS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisMode {
    /// Decode the per-step mean of the lip distribution (deterministic).
    Mean,
    /// Decode one reparameterized draw, seeded.
    Sample,
}

pub struct SynthesisRequest {
    /// `(F, 96, 96, 3)` frames in [0, 1], F >= 5.
    pub frames: Array4<f64>,
    /// At least one second; the speaker embedding comes from its first second.
    pub voice_reference: Waveform,
    pub mode: SynthesisMode,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s[1] != 96 || s[2] != 96 || s[3] != 3 {
            return Err(Error::Model(format!("frames must be (F,96,96,3), got {s:?}")));
        }
        if s[0] < 5 {
            return Err(Error::Model(format!("need at least 5 frames, got {}", s[0])));
        }
        if self.voice_reference.len() < SAMPLE_RATE as usize {
            return Err(Error::Model("voice reference shorter than one second".into()));
        }
        for &v in self.frames.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Model(format!("frame pixel out of [0,1]: {v}")));
            }
        }
        Ok(())
    }
}

/// Lip distribution of a frame sequence under a loaded model (crop mode from
/// the checkpoint config).
pub fn lip_distribution(lm: &LoadedModel, frames: &Array4<f64>) -> Result<LatentDistribution> {
    let s = frames.shape();
    let mut arr = Arr::zeros(ndarray::IxDyn(&[1, s[0], 96, 96, 3]));
    arr.slice_mut(ndarray::s![0, .., .., .., ..]).assign(frames);
    let lips = apply_crop_mode(&Tensor::constant(arr), lm.checkpoint.config.crop_mode);
    let feats = temporal_upsample(&lm.model.visual.forward(&lips)?);
    Ok(lm.model.proj_lip.forward(&feats))
}

/// Speaker embedding of the first second of a reference waveform.
pub fn reference_embedding(lm: &LoadedModel, voice_reference: &Waveform) -> Result<Tensor> {
    let second = voice_reference.segment(0, SAMPLE_RATE as usize)?;
    let mel = melspectrogram(&second)?;
    Ok(no_grad(|| {
        lm.model.surrogates.speaker.embed_tensor(&crate::corpus::mels_to_tensor(&[&mel]))
    })
    .detach())
}

/// Decodes a mel `(4F, 80)` and its Griffin-Lim waveform for the request.
pub fn synthesize(lm: &LoadedModel, req: &SynthesisRequest) -> Result<(MelSpectrogram, Waveform)> {
    req.validate()?;
    let mel = no_grad(|| -> Result<MelSpectrogram> {
        let d = lip_distribution(lm, &req.frames)?;
        let v = reference_embedding(lm, &req.voice_reference)?;
        let z = match req.mode {
            SynthesisMode::Mean => d.mu.clone(),
            SynthesisMode::Sample => reparam_sample(&d, &mut rng_from(req.seed)),
        };
        let out = lm.model.decoder.forward(&z, &v)?;
        let steps = out.shape()[1];
        let flat: Vec<f64> = out.value().iter().copied().collect();
        MelSpectrogram::new(ndarray::Array2::from_shape_vec((steps, 80), flat).expect("shape"))
    })?;
    let wave = griffin_lim(&mel, GRIFFIN_LIM_ITERS)?;
    Ok((mel, wave))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bad_frames(f: usize, h: usize) -> Array4<f64> {
        Array4::zeros((f, h, 96, 3))
    }

    #[test]
    fn request_validation() {
        let wav = Waveform::new(vec![0.0; 16_000]).unwrap();
        let ok = SynthesisRequest {
            frames: Array4::zeros((5, 96, 96, 3)),
            voice_reference: wav.clone(),
            mode: SynthesisMode::Mean,
            seed: 0,
        };
        assert!(ok.validate().is_ok());

        let too_few = SynthesisRequest {
            frames: Array4::zeros((4, 96, 96, 3)),
            voice_reference: wav.clone(),
            mode: SynthesisMode::Mean,
            seed: 0,
        };
        assert!(too_few.validate().is_err());

        let wrong_size = SynthesisRequest {
            frames: bad_frames(6, 64),
            voice_reference: wav.clone(),
            mode: SynthesisMode::Mean,
            seed: 0,
        };
        assert!(wrong_size.validate().is_err());

        let short_ref = SynthesisRequest {
            frames: Array4::zeros((5, 96, 96, 3)),
            voice_reference: Waveform::new(vec![0.0; 8_000]).unwrap(),
            mode: SynthesisMode::Sample,
            seed: 1,
        };
        assert!(short_ref.validate().is_err());
    }
}
