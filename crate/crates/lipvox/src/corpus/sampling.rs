//! Training-window sampling and the epoch batch stream.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{CorpusManifest, TrainingExample, Utterance, WINDOW_FRAMES, WINDOW_STEPS};
use crate::audio::{mel_segment, melspectrogram, MelSpectrogram, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{rng_from, subseed};
use crate::tensor::{Arr, Tensor};

/// Utterance plus its precomputed full-length melspectrogram.
pub struct LoadedUtterance {
    pub utt: Utterance,
    pub mel: MelSpectrogram,
}

/// Lazily loads utterances of one manifest and keeps them in memory.
pub struct CorpusCache {
    manifest: CorpusManifest,
    cache: RefCell<HashMap<usize, Rc<LoadedUtterance>>>,
}

impl CorpusCache {
    pub fn new(manifest: CorpusManifest) -> Self {
        Self { manifest, cache: RefCell::new(HashMap::new()) }
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.utterances.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Rc<LoadedUtterance>> {
        if let Some(u) = self.cache.borrow().get(&index) {
            return Ok(u.clone());
        }
        let utt = super::load_utterance(&self.manifest, index)?;
        let mel = melspectrogram(&utt.audio)?;
        let loaded = Rc::new(LoadedUtterance { utt, mel });
        self.cache.borrow_mut().insert(index, loaded.clone());
        Ok(loaded)
    }
}

/// Samples a training window: uniform start frame, lips and mel aligned at
/// 4 mel steps per frame, voice reference placed independently.
pub fn sample_window(u: &Utterance, rng: &mut ChaCha8Rng) -> Result<TrainingExample> {
    let mel = melspectrogram(&u.audio)?;
    sample_window_precomputed(u, &mel, rng)
}

/// Same as [`sample_window`] but reuses the utterance's full melspectrogram;
/// the window's mel is a slice of it, `[4*start, 4*start + 100)`.
pub fn sample_window_precomputed(
    u: &Utterance,
    full_mel: &MelSpectrogram,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let f = u.num_frames();
    if f < WINDOW_FRAMES {
        return Err(Error::Corpus(format!(
            "utterance has {f} frames; a window needs {WINDOW_FRAMES}"
        )));
    }
    let start = rng.gen_range(0..=f - WINDOW_FRAMES);
    let lips = u.lip_window(start)?;
    let mel = mel_segment(full_mel, 4 * start, WINDOW_STEPS)?;

    let one_sec = SAMPLE_RATE as usize;
    let max_ref = u.audio.len().checked_sub(one_sec).ok_or_else(|| {
        Error::Corpus("utterance audio shorter than one second".into())
    })?;
    let ref_start = rng.gen_range(0..=max_ref);
    let speaker_ref = u.audio.segment(ref_start, one_sec)?;

    let ex = TrainingExample {
        lips,
        mel,
        speaker_ref,
        speaker_id: u.speaker_id.clone(),
    };
    ex.validate()?;
    Ok(ex)
}

/// Epoch-structured batch stream: each epoch shuffles the utterances with a
/// seed derived from (seed, epoch), samples one window per utterance, chunks
/// into `batch_size` and drops the final partial batch.
pub struct BatchStream {
    cache: Rc<CorpusCache>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iterator(manifest: &CorpusManifest, batch_size: usize, seed: u64) -> Result<BatchStream> {
    BatchStream::new(Rc::new(CorpusCache::new(manifest.clone())), batch_size, seed)
}

impl BatchStream {
    pub fn new(cache: Rc<CorpusCache>, batch_size: usize, seed: u64) -> Result<Self> {
        if cache.is_empty() {
            return Err(Error::Corpus("empty manifest".into()));
        }
        if batch_size == 0 {
            return Err(Error::Corpus("batch size must be positive".into()));
        }
        let mut s = Self { cache, batch_size, seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.cache.len() / self.batch_size
    }

    /// Epoch index (0-based) the next batch belongs to.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut rng = rng_from(subseed(self.seed, 0xe9_0c4, self.epoch as u64));
        let n = self.cache.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        self.order = order;
        self.pos = 0;
    }

    /// Next batch of `batch_size` examples, rolling into the next epoch when
    /// the current one has fewer than `batch_size` utterances left.
    pub fn next_batch(&mut self) -> Result<Vec<TrainingExample>> {
        if self.batches_per_epoch() == 0 {
            return Err(Error::Corpus(format!(
                "batch size {} exceeds corpus size {}",
                self.batch_size,
                self.cache.len()
            )));
        }
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        for i in 0..self.batch_size {
            let utt_index = self.order[self.pos + i];
            let loaded = self.cache.get(utt_index)?;
            let mut rng = rng_from(subseed(self.seed, self.epoch as u64 + 1, utt_index as u64));
            batch.push(sample_window_precomputed(&loaded.utt, &loaded.mel, &mut rng)?);
        }
        self.pos += self.batch_size;
        Ok(batch)
    }
}

/// `(B, 25, 96, 96, 3)` tensor from a batch's lip windows.
pub fn lips_to_tensor(batch: &[TrainingExample]) -> Tensor {
    let b = batch.len();
    let mut arr = Arr::zeros(IxDyn(&[b, WINDOW_FRAMES, 96, 96, 3]));
    for (i, ex) in batch.iter().enumerate() {
        arr.slice_mut(ndarray::s![i, .., .., .., ..]).assign(ex.lips.frames());
    }
    Tensor::constant(arr)
}

/// `(B, steps, 80)` tensor from melspectrograms (all must share a step count).
pub fn mels_to_tensor(mels: &[&MelSpectrogram]) -> Tensor {
    let b = mels.len();
    let steps = mels[0].num_steps();
    let mut arr = Arr::zeros(IxDyn(&[b, steps, 80]));
    for (i, m) in mels.iter().enumerate() {
        debug_assert_eq!(m.num_steps(), steps);
        arr.slice_mut(ndarray::s![i, .., ..]).assign(m.frames());
    }
    Tensor::constant(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    fn tiny_corpus(dir: &std::path::Path) -> CorpusManifest {
        generate_corpus(2, 4, 2, 21, dir).unwrap()
    }

    #[test]
    fn window_alignment_matches_full_mel_slice() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_corpus(dir.path());
        let u = super::super::load_utterance(&m, 1).unwrap();
        let full = melspectrogram(&u.audio).unwrap();
        for seed in 0..5 {
            let mut rng = rng_from(seed);
            let ex = sample_window(&u, &mut rng).unwrap();
            // recover the start from the lips by matching frames
            let mut found = None;
            for start in 0..=u.num_frames() - WINDOW_FRAMES {
                let w = u.lip_window(start).unwrap();
                if w.frames() == ex.lips.frames() {
                    found = Some(start);
                    break;
                }
            }
            let start = found.expect("window must come from the utterance");
            let oracle = mel_segment(&full, 4 * start, WINDOW_STEPS).unwrap();
            assert_eq!(ex.mel.frames(), oracle.frames());
        }
    }

    #[test]
    fn exactly_25_frame_utterance_has_single_window() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(1, 1, 1, 3, dir.path()).unwrap();
        let u = super::super::load_utterance(&m, 0).unwrap();
        assert_eq!(u.num_frames(), 25);
        let w0 = u.lip_window(0).unwrap();
        for seed in 0..4 {
            let ex = sample_window(&u, &mut rng_from(seed)).unwrap();
            assert_eq!(ex.lips.frames(), w0.frames());
        }
    }

    #[test]
    fn stream_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_corpus(dir.path()); // 8 utterances
        let mut s1 = batch_iterator(&m, 3, 99).unwrap();
        assert_eq!(s1.batches_per_epoch(), 2); // 8/3 -> 2, partial dropped

        let mut ids1 = Vec::new();
        for _ in 0..6 {
            let b = s1.next_batch().unwrap();
            ids1.push(b.iter().map(|e| e.speaker_id.clone()).collect::<Vec<_>>());
        }
        assert_eq!(s1.epoch(), 2);

        let mut s2 = batch_iterator(&m, 3, 99).unwrap();
        for old in &ids1 {
            let b = s2.next_batch().unwrap();
            let ids: Vec<String> = b.iter().map(|e| e.speaker_id.clone()).collect();
            assert_eq!(&ids, old);
        }
    }

    #[test]
    fn oversized_batch_yields_zero_batches() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(1, 7, 1, 5, dir.path()).unwrap();
        let mut s = batch_iterator(&m, 8, 1).unwrap();
        assert_eq!(s.batches_per_epoch(), 0);
        assert!(s.next_batch().is_err());
    }

    #[test]
    fn tensor_conversion_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_corpus(dir.path());
        let mut s = batch_iterator(&m, 2, 5).unwrap();
        let b = s.next_batch().unwrap();
        assert_eq!(lips_to_tensor(&b).shape(), &[2, 25, 96, 96, 3]);
        let mels: Vec<&MelSpectrogram> = b.iter().map(|e| &e.mel).collect();
        assert_eq!(mels_to_tensor(&mels).shape(), &[2, 100, 80]);
    }
}
