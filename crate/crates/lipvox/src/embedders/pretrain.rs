//! Surrogate pretraining on the synthetic corpus.
//!
//! The content encoder classifies the per-step pseudo-phoneme; the speaker
//! embedder classifies the speaker from one second of mel. Utterances are
//! split per speaker into train/validation so the reported quality numbers
//! are held-out. Both nets are frozen afterwards.

use rand::Rng;

use super::Surrogates;
use crate::corpus::{CorpusCache, CorpusManifest, WINDOW_STEPS};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, cross_entropy_logits, ParamStore, RmsProp};
use crate::rng::{rng_from, subseed};
use crate::tensor::{backward, no_grad, Arr, Tensor};
use ndarray::IxDyn;

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub content_epochs: usize,
    pub speaker_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mel steps per content-training window.
    pub content_window: usize,
    /// Windows sampled per utterance per task.
    pub windows_per_utt: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            content_epochs: 15,
            speaker_epochs: 12,
            batch_size: 8,
            learning_rate: 1e-3,
            content_window: 50,
            windows_per_utt: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct PretrainReport {
    pub content_val_accuracy: f64,
    pub speaker_val_accuracy: f64,
    pub same_speaker_cosine: f64,
    pub diff_speaker_cosine: f64,
}

struct Windows {
    mels: Vec<Arr>,          // (steps, 80) each
    phonemes: Vec<Vec<usize>>, // per step
    speakers: Vec<usize>,
    is_val: Vec<bool>,
}

fn collect_windows(
    cache: &CorpusCache,
    steps: usize,
    per_utt: usize,
    speaker_index: &dyn Fn(&str) -> usize,
    seed: u64,
) -> Result<Windows> {
    let mut w = Windows { mels: Vec::new(), phonemes: Vec::new(), speakers: Vec::new(), is_val: Vec::new() };
    let n_utts = cache.len();
    for idx in 0..n_utts {
        let loaded = cache.get(idx)?;
        let total = loaded.mel.num_steps();
        if total < steps {
            continue;
        }
        let mut rng = rng_from(subseed(seed, 0xc0_11ec7, idx as u64));
        // last utterance of each speaker serves as validation
        let val = {
            let entry = &cache.manifest().utterances[idx];
            let same: Vec<usize> = cache
                .manifest()
                .utterances
                .iter()
                .enumerate()
                .filter(|(_, e)| e.speaker_id == entry.speaker_id)
                .map(|(i, _)| i)
                .collect();
            same.last() == Some(&idx) && same.len() > 1
        };
        for _ in 0..per_utt {
            let start = rng.gen_range(0..=total - steps);
            let mel = loaded.mel.frames().slice(ndarray::s![start..start + steps, ..]).to_owned();
            let labels: Vec<usize> = (0..steps)
                .map(|t| loaded.utt.phoneme_track[(start + t) / 4] as usize)
                .collect();
            w.mels.push(mel.into_dyn());
            w.phonemes.push(labels);
            w.speakers.push(speaker_index(&loaded.utt.speaker_id));
            w.is_val.push(val);
        }
    }
    Ok(w)
}

fn stack_mels(windows: &Windows, idxs: &[usize]) -> Tensor {
    let steps = windows.mels[idxs[0]].shape()[0];
    let mut arr = Arr::zeros(IxDyn(&[idxs.len(), steps, 80]));
    for (i, &j) in idxs.iter().enumerate() {
        arr.slice_mut(ndarray::s![i, .., ..]).assign(&windows.mels[j]);
    }
    Tensor::constant(arr)
}

/// Trains both surrogates and freezes them in `store`. Returns held-out
/// quality numbers.
pub fn pretrain_surrogates(
    manifest: &CorpusManifest,
    config: &PretrainConfig,
    store: &mut ParamStore,
    surrogates: &Surrogates,
) -> Result<PretrainReport> {
    if manifest.speakers.len() < 2 {
        return Err(Error::Corpus(
            "surrogate pretraining needs at least two speakers".into(),
        ));
    }
    let cache = CorpusCache::new(manifest.clone());
    let speaker_ids: Vec<String> = manifest.speakers.iter().map(|s| s.id.clone()).collect();
    let spk_index = |id: &str| speaker_ids.iter().position(|s| s == id).expect("known speaker");

    // ---- content encoder: per-step phoneme classification ----
    let content = collect_windows(&cache, config.content_window, config.windows_per_utt, &spk_index, config.seed)?;
    let train_idx: Vec<usize> = (0..content.mels.len()).filter(|&i| !content.is_val[i]).collect();
    let val_idx: Vec<usize> = (0..content.mels.len()).filter(|&i| content.is_val[i]).collect();

    let mut opt = RmsProp::new(
        store.trainable_with_prefix("surrogate.content."),
        config.learning_rate,
        0.9,
        1e-8,
    );
    let mut order_rng = rng_from(subseed(config.seed, 0xc0, 0));
    for _epoch in 0..config.content_epochs {
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let x = stack_mels(&content, chunk);
            let labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| content.phonemes[i].iter().copied())
                .collect();
            let snap = opt.snapshot();
            let logits = surrogates.content.logits(&x);
            let loss = cross_entropy_logits(&logits, &labels);
            let refs: Vec<&Tensor> = snap.iter().collect();
            let grads = backward(&loss, &refs, false);
            opt.step(&snap, &grads);
        }
    }
    let content_val_accuracy = no_grad(|| {
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in val_idx.chunks(config.batch_size) {
            let x = stack_mels(&content, chunk);
            let logits = surrogates.content.logits(&x);
            let pred = argmax_rows(&logits);
            let labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| content.phonemes[i].iter().copied())
                .collect();
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            total += labels.len();
        }
        correct as f64 / total.max(1) as f64
    });

    // ---- speaker embedder: speaker classification on 1 s windows ----
    let speaker = collect_windows(&cache, WINDOW_STEPS, config.windows_per_utt, &spk_index, config.seed ^ 0x5bea0)?;
    let strain: Vec<usize> = (0..speaker.mels.len()).filter(|&i| !speaker.is_val[i]).collect();
    let sval: Vec<usize> = (0..speaker.mels.len()).filter(|&i| speaker.is_val[i]).collect();

    let mut opt = RmsProp::new(
        store.trainable_with_prefix("surrogate.speaker."),
        config.learning_rate,
        0.9,
        1e-8,
    );
    let mut order_rng = rng_from(subseed(config.seed, 0x5b, 1));
    for _epoch in 0..config.speaker_epochs {
        let mut order = strain.clone();
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let x = stack_mels(&speaker, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| speaker.speakers[i]).collect();
            let snap = opt.snapshot();
            let logits = surrogates.speaker.class_logits(&x).scale(10.0);
            let loss = cross_entropy_logits(&logits, &labels);
            let refs: Vec<&Tensor> = snap.iter().collect();
            let grads = backward(&loss, &refs, false);
            opt.step(&snap, &grads);
        }
    }

    let (speaker_val_accuracy, same_cos, diff_cos) = no_grad(|| {
        let idxs = if sval.is_empty() { &strain } else { &sval };
        let x = stack_mels(&speaker, idxs);
        let pred = argmax_rows(&surrogates.speaker.class_logits(&x));
        let labels: Vec<usize> = idxs.iter().map(|&i| speaker.speakers[i]).collect();
        let acc =
            pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;

        let emb = surrogates.speaker.embed_tensor(&x);
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for i in 0..idxs.len() {
            for j in 0..i {
                let dot: f64 = (0..super::SPEAKER_DIM)
                    .map(|d| emb.value()[[i, d]] * emb.value()[[j, d]])
                    .sum();
                if labels[i] == labels[j] {
                    same.push(dot);
                } else {
                    diff.push(dot);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (acc, mean(&same), mean(&diff))
    });

    store.freeze_prefix("surrogate.");

    Ok(PretrainReport {
        content_val_accuracy,
        speaker_val_accuracy,
        same_speaker_cosine: same_cos,
        diff_speaker_cosine: diff_cos,
    })
}
