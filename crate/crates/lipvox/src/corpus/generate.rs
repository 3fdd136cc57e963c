//! Corpus generation, manifest persistence, utterance loading.
//!
//! Layout: `root/manifest.json`, `root/spk{k}/utt{j}/frames/{00000..}.png`,
//! `root/spk{k}/utt{j}/audio.wav`, plus `phonemes.json` per utterance with the
//! per-frame pseudo-phoneme labels the surrogate pretraining consumes.

use ndarray::Array4;
use std::fs;
use std::path::Path;

use super::synth::{random_script, render_audio, render_frames, script_to_track, speaker_params};
use super::{CorpusManifest, SpeakerParams, Utterance, UtteranceEntry, FPS, FRAME_SIZE, WINDOW_FRAMES};
use crate::audio::{load_wav, save_wav, Waveform};
use crate::error::{Error, Result};
use crate::rng::{rng_from, subseed};

fn write_png(path: &Path, frame: ndarray::ArrayView3<u8>) -> Result<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            buf.extend_from_slice(&[frame[[r, c, 0]], frame[[r, c, 1]], frame[[r, c, 2]]]);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Corpus(format!("png write {}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<ndarray::Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Corpus(format!("png read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ndarray::Array3::<u8>::zeros((h, w, 3));
    for (c, r, px) in img.enumerate_pixels() {
        out[[r as usize, c as usize, 0]] = px[0];
        out[[r as usize, c as usize, 1]] = px[1];
        out[[r as usize, c as usize, 2]] = px[2];
    }
    Ok(out)
}

/// Generates `num_speakers * utts_per_speaker` utterances of `utt_seconds`
/// seconds under `root` and writes the manifest. Byte-identical for equal
/// arguments.
pub fn generate_corpus(
    num_speakers: usize,
    utts_per_speaker: usize,
    utt_seconds: u32,
    seed: u64,
    root: &Path,
) -> Result<CorpusManifest> {
    if num_speakers == 0 || utts_per_speaker == 0 {
        return Err(Error::Corpus("speaker and utterance counts must be positive".into()));
    }
    if utt_seconds == 0 {
        return Err(Error::Corpus("utterances must be at least one second".into()));
    }
    fs::create_dir_all(root)?;

    let speakers: Vec<SpeakerParams> = (0..num_speakers)
        .map(|k| {
            let mut rng = rng_from(subseed(seed, 0x5eed_5bea_ce5, k as u64));
            speaker_params(k, num_speakers, &mut rng, format!("spk{k}"))
        })
        .collect();

    let frames_per_utt = FPS * utt_seconds as usize;
    let mut utterances = Vec::new();
    for (k, sp) in speakers.iter().enumerate() {
        for j in 0..utts_per_speaker {
            // All randomness of utterance (k, j) comes from this stream, so
            // generation order (or parallelism) cannot change the output.
            let mut rng = rng_from(subseed(seed, k as u64 + 1, j as u64));
            let script = random_script(frames_per_utt, &mut rng);
            let (samples, env) = render_audio(sp, &script);
            let frames = render_frames(sp, &script, &env);
            let track = script_to_track(&script);

            let rel = format!("spk{k}/utt{j}");
            let dir = root.join(&rel);
            let frames_dir = dir.join("frames");
            fs::create_dir_all(&frames_dir)?;
            for (fi, frame) in frames.outer_iter().enumerate() {
                write_png(&frames_dir.join(format!("{fi:05}.png")), frame)?;
            }
            save_wav(&dir.join("audio.wav"), &Waveform::new(samples)?)?;
            let track_json = serde_json::to_vec(&track)?;
            fs::write(dir.join("phonemes.json"), track_json)?;

            utterances.push(UtteranceEntry {
                speaker_id: sp.id.clone(),
                rel_path: rel,
                frames: frames_per_utt,
            });
        }
    }

    let manifest = CorpusManifest {
        root: root.to_path_buf(),
        seed,
        speakers,
        utterances,
    };
    save_manifest(&manifest)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &CorpusManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(manifest.root.join("manifest.json"), json)?;
    Ok(())
}

/// Loads and validates a manifest; `root` becomes the manifest's directory so
/// corpora are relocatable.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let data = fs::read_to_string(path)?;
    let mut manifest: CorpusManifest = serde_json::from_str(&data)?;
    manifest.root = path
        .parent()
        .ok_or_else(|| Error::Corpus("manifest has no parent directory".into()))?
        .to_path_buf();
    for entry in &manifest.utterances {
        let dir = manifest.utterance_dir(entry);
        if !dir.join("audio.wav").exists() {
            return Err(Error::Corpus(format!("missing audio for {}", entry.rel_path)));
        }
        if entry.frames < WINDOW_FRAMES {
            return Err(Error::Corpus(format!(
                "utterance {} shorter than one window",
                entry.rel_path
            )));
        }
    }
    Ok(manifest)
}

pub fn load_utterance(manifest: &CorpusManifest, index: usize) -> Result<Utterance> {
    let entry = manifest
        .utterances
        .get(index)
        .ok_or_else(|| Error::Corpus(format!("utterance index {index} out of range")))?;
    let dir = manifest.utterance_dir(entry);

    let mut frames = Array4::<u8>::zeros((entry.frames, FRAME_SIZE, FRAME_SIZE, 3));
    for fi in 0..entry.frames {
        let img = read_png(&dir.join("frames").join(format!("{fi:05}.png")))?;
        frames.slice_mut(ndarray::s![fi, .., .., ..]).assign(&img);
    }
    let audio = load_wav(&dir.join("audio.wav"))?;
    let track: Vec<u8> = serde_json::from_str(&fs::read_to_string(dir.join("phonemes.json"))?)?;

    let utt = Utterance {
        speaker_id: entry.speaker_id.clone(),
        frames,
        audio,
        phoneme_track: track,
    };
    utt.validate()?;
    Ok(utt)
}

/// Loads a directory of PNG frames (sorted by filename) as a normalized
/// `(F, 96, 96, 3)` array, e.g. for the synthesis CLI.
pub fn load_frames_dir(dir: &Path) -> Result<ndarray::Array4<f64>> {
    if !dir.exists() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Corpus(format!("no .png frames under {}", dir.display())));
    }
    let mut out = ndarray::Array4::<f64>::zeros((paths.len(), FRAME_SIZE, FRAME_SIZE, 3));
    for (i, p) in paths.iter().enumerate() {
        let img = read_png(p)?;
        if img.shape() != [FRAME_SIZE, FRAME_SIZE, 3] {
            return Err(Error::Corpus(format!(
                "frame {} is {:?}, expected 96x96 RGB",
                p.display(),
                img.shape()
            )));
        }
        out.slice_mut(ndarray::s![i, .., .., ..])
            .assign(&img.mapv(|v| v as f64 / 255.0));
    }
    Ok(out)
}

/// Splits every speaker's utterances at `train_utts_per_speaker` (by
/// generation order) into train and held-out manifests sharing the root.
pub fn split_manifest(
    manifest: &CorpusManifest,
    train_utts_per_speaker: usize,
) -> (CorpusManifest, CorpusManifest) {
    let mut train = manifest.clone();
    let mut heldout = manifest.clone();
    train.utterances.clear();
    heldout.utterances.clear();
    let mut seen: std::collections::HashMap<String, usize> = Default::default();
    for entry in &manifest.utterances {
        let n = seen.entry(entry.speaker_id.clone()).or_insert(0);
        if *n < train_utts_per_speaker {
            train.utterances.push(entry.clone());
        } else {
            heldout.utterances.push(entry.clone());
        }
        *n += 1;
    }
    (train, heldout)
}
