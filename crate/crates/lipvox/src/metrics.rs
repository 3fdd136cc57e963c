//! Evaluation metrics: speaker-embedding distance, Frechet and kernel
//! distances on surrogate content features, generative strength, and the
//! corpus-level evaluation report.
//!
//! The feature extractor behind the Frechet/kernel distances is the frozen
//! content encoder (mean-pooled, d = 1024). Values are therefore comparable
//! only between runs of this artifact, never against numbers computed with
//! other extractors.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_segment, melspectrogram, MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::corpus::{CorpusManifest, WINDOW_FRAMES, WINDOW_STEPS};
use crate::error::{Error, Result};
use crate::infer::{lip_distribution, reference_embedding};
use crate::model::reparam_sample;
use crate::rng::rng_from;
use crate::tensor::no_grad;
use crate::train::LoadedModel;

/// `(N, d)` feature matrix for the distribution distances.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    features: Array2<f64>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Metric("non-finite feature".into()));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.features
    }
}

/// Mean-pooled frozen content features of one melspectrogram (d = 1024).
pub fn content_feature(lm: &LoadedModel, m: &MelSpectrogram) -> Result<Vec<f64>> {
    let emb = lm.model.surrogates.content.encode(m)?;
    let d = emb.values.shape()[1];
    let t = emb.values.shape()[0] as f64;
    Ok((0..d).map(|k| emb.values.column(k).sum() / t).collect())
}

pub fn feature_set(lm: &LoadedModel, mels: &[&MelSpectrogram]) -> Result<FeatureSet> {
    let mut rows = Array2::zeros((mels.len(), crate::embedders::CONTENT_DIM));
    for (i, m) in mels.iter().enumerate() {
        let f = content_feature(lm, m)?;
        for (k, v) in f.into_iter().enumerate() {
            rows[[i, k]] = v;
        }
    }
    FeatureSet::new(rows)
}

/// L1 distance between the speaker embeddings of two roughly one-second
/// melspectrograms (longer inputs use their first 100 steps).
pub fn sed(lm: &LoadedModel, generated: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    let cut = |m: &MelSpectrogram| -> Result<MelSpectrogram> {
        if m.num_steps() > WINDOW_STEPS {
            mel_segment(m, 0, WINDOW_STEPS)
        } else {
            Ok(m.clone())
        }
    };
    let a = lm.model.surrogates.speaker.embed(&cut(generated)?)?;
    let b = lm.model.surrogates.speaker.embed(&cut(reference)?)?;
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum())
}

fn mean_and_cov(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.len(), set.dim());
    let x = set.rows();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for k in 0..d {
            mean[k] += x[[i, k]];
        }
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            centered[(i, k)] = x[[i, k]] - mean[k];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root with an eigenvalue floor.
fn sqrtm_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    let q = eig.eigenvectors;
    &q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Frechet distance between Gaussian fits of the two sets:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn fdsd(gen: &FeatureSet, reference: &FeatureSet) -> Result<f64> {
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::Metric("fdsd needs at least 2 samples per set".into()));
    }
    if gen.dim() != reference.dim() {
        return Err(Error::Metric("fdsd feature dims differ".into()));
    }
    let (m1, s1) = mean_and_cov(gen);
    let (m2, s2) = mean_and_cov(reference);
    let dmu = &m1 - &m2;

    // Tr((S1 S2)^(1/2)) computed on the symmetric form S1h S2 S1h.
    let s1h = sqrtm_psd(&s1, 1e-10);
    let inner = &s1h * &s2 * &s1h;
    let eig = inner.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();

    let value = dmu.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Metric("degenerate covariance in fdsd".into()));
    }
    Ok(value)
}

fn poly_kernel(x: &[f64], y: &[f64], d: f64) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d + 1.0;
    v * v * v
}

/// Unbiased squared MMD with the cubic polynomial kernel, reported x1000.
pub fn kdsd(gen: &FeatureSet, reference: &FeatureSet) -> Result<f64> {
    let (m, n) = (gen.len(), reference.len());
    if m < 2 || n < 2 {
        return Err(Error::Metric("kdsd needs at least 2 samples per set".into()));
    }
    if gen.dim() != reference.dim() {
        return Err(Error::Metric("kdsd feature dims differ".into()));
    }
    let d = gen.dim() as f64;
    let row = |s: &FeatureSet, i: usize| s.rows().row(i).to_vec();

    let mut xx = 0.0;
    for i in 0..m {
        let xi = row(gen, i);
        for j in 0..m {
            if i != j {
                xx += poly_kernel(&xi, &row(gen, j), d);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        let yi = row(reference, i);
        for j in 0..n {
            if i != j {
                yy += poly_kernel(&yi, &row(reference, j), d);
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        let xi = row(gen, i);
        for j in 0..n {
            xy += poly_kernel(&xi, &row(reference, j), d);
        }
    }
    let mmd2 = xx / (m as f64 * (m as f64 - 1.0)) + yy / (n as f64 * (n as f64 - 1.0))
        - 2.0 * xy / (m as f64 * n as f64);
    Ok(mmd2 * 1e3)
}

/// Percentage of mutually distinct outputs among `n` stochastic syntheses of
/// one input: a sample is unique iff its minimum L2 distance to every other
/// sample (flattened normalized mels) is at least `delta`.
pub fn generative_strength(
    lm: &LoadedModel,
    frames: &ndarray::Array4<f64>,
    voice_reference: &Waveform,
    n: usize,
    delta: f64,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::Metric("generative strength needs N >= 2".into()));
    }
    let mels = no_grad(|| -> Result<Vec<Vec<f64>>> {
        let d = lip_distribution(lm, frames)?;
        let v = reference_embedding(lm, voice_reference)?;
        let mut out = Vec::with_capacity(n);
        for seed in 0..n as u64 {
            let z = reparam_sample(&d, &mut rng_from(seed));
            let m = lm.model.decoder.forward(&z, &v)?;
            out.push(m.value().iter().copied().collect());
        }
        Ok(out)
    })?;
    Ok(unique_percentage(&mels, delta))
}

/// The min-pairwise-distance uniqueness rule on flattened spectrograms.
pub fn unique_percentage(flat: &[Vec<f64>], delta: f64) -> f64 {
    let n = flat.len();
    let mut unique = 0usize;
    for i in 0..n {
        let mut min_d = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = flat[i]
                .iter()
                .zip(&flat[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            min_d = min_d.min(d2.sqrt());
        }
        if min_d >= delta {
            unique += 1;
        }
    }
    100.0 * unique as f64 / n as f64
}

/// Corpus-level evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub sed_mean: f64,
    pub fdsd: f64,
    pub kdsd_x1000: f64,
    pub recon_l1_mean: f64,
    pub windows: usize,
    pub seed: u64,
    pub checkpoint: String,
}

/// Synthesizes mean-mode speech for every non-overlapping 25-frame window of
/// every utterance in `manifest` and reports mean SED, Frechet and kernel
/// distances on content features, and mean reconstruction L1.
pub fn eval_corpus(
    lm: &LoadedModel,
    manifest: &CorpusManifest,
    seed: u64,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if manifest.utterances.is_empty() {
        return Err(Error::Corpus("empty manifest".into()));
    }
    let mut gen_mels: Vec<MelSpectrogram> = Vec::new();
    let mut gt_mels: Vec<MelSpectrogram> = Vec::new();
    let mut sed_sum = 0.0;
    let mut l1_sum = 0.0;

    for idx in 0..manifest.utterances.len() {
        let utt = crate::corpus::load_utterance(manifest, idx)?;
        let full_mel = melspectrogram(&utt.audio)?;
        let windows = utt.num_frames() / WINDOW_FRAMES;
        for w in 0..windows {
            let start = w * WINDOW_FRAMES;
            let lips = utt.lip_window(start)?;
            let gt = mel_segment(&full_mel, 4 * start, WINDOW_STEPS)?;
            let voice = utt.audio.segment(start * crate::corpus::SAMPLES_PER_FRAME, SAMPLE_RATE as usize)?;

            let d = no_grad(|| lip_distribution(lm, lips.frames()))?;
            let v = reference_embedding(lm, &voice)?;
            let gen = no_grad(|| -> Result<MelSpectrogram> {
                let out = lm.model.decoder.forward(&d.mu, &v)?;
                let steps = out.shape()[1];
                let flat: Vec<f64> = out.value().iter().copied().collect();
                Ok(MelSpectrogram::new(Array2::from_shape_vec((steps, 80), flat).expect("shape"))?)
            })?;

            sed_sum += sed(lm, &gen, &gt)?;
            let l1 = gen
                .frames()
                .iter()
                .zip(gt.frames().iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / (WINDOW_STEPS * 80) as f64;
            l1_sum += l1;
            gen_mels.push(gen);
            gt_mels.push(gt);
        }
    }

    let n = gen_mels.len();
    let gen_refs: Vec<&MelSpectrogram> = gen_mels.iter().collect();
    let gt_refs: Vec<&MelSpectrogram> = gt_mels.iter().collect();
    let gen_set = feature_set(lm, &gen_refs)?;
    let gt_set = feature_set(lm, &gt_refs)?;

    Ok(EvalReport {
        sed_mean: sed_sum / n as f64,
        fdsd: fdsd(&gen_set, &gt_set)?,
        kdsd_x1000: kdsd(&gen_set, &gt_set)?,
        recon_l1_mean: l1_sum / n as f64,
        windows: n,
        seed,
        checkpoint: checkpoint_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};

    fn gaussian_set(n: usize, d: usize, mean: f64, rng: &mut rand_chacha::ChaCha8Rng) -> FeatureSet {
        let mut rows = Array2::zeros((n, d));
        for i in 0..n {
            for k in 0..d {
                rows[[i, k]] = mean + normal(rng);
            }
        }
        FeatureSet::new(rows).unwrap()
    }

    #[test]
    fn fdsd_identity_and_symmetry() {
        let mut rng = rng_from(1);
        let a = gaussian_set(64, 6, 0.0, &mut rng);
        let same = fdsd(&a, &a).unwrap();
        assert!(same.abs() < 1e-6, "fdsd(a,a) = {same}");

        let b = gaussian_set(64, 6, 0.5, &mut rng);
        let ab = fdsd(&a, &b).unwrap();
        let ba = fdsd(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab >= -1e-6);
    }

    #[test]
    fn fdsd_matches_analytic_gaussian() {
        // N(0, I) vs N(m, I): Frechet distance is ||m||^2.
        let mut rng = rng_from(2);
        let d = 8;
        let shift = 0.7;
        let a = gaussian_set(10_000, d, 0.0, &mut rng);
        let b = gaussian_set(10_000, d, shift, &mut rng);
        let analytic = shift * shift * d as f64;
        let est = fdsd(&a, &b).unwrap();
        assert!(
            (est - analytic).abs() < 0.05 * analytic + 0.05,
            "fdsd {est} vs analytic {analytic}"
        );
    }

    #[test]
    fn kdsd_matches_double_loop_oracle() {
        let mut rng = rng_from(3);
        let a = gaussian_set(50, 5, 0.0, &mut rng);
        let b = gaussian_set(50, 5, 0.3, &mut rng);
        let fast = kdsd(&a, &b).unwrap();

        // independent oracle: plain double loops over the definition
        let d = 5f64;
        let k = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            (dot / d + 1.0).powi(3)
        };
        let (m, n) = (50f64, 50f64);
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                if i != j {
                    xx += k(&a.rows().row(i).to_vec(), &a.rows().row(j).to_vec());
                    yy += k(&b.rows().row(i).to_vec(), &b.rows().row(j).to_vec());
                }
                xy += k(&a.rows().row(i).to_vec(), &b.rows().row(j).to_vec());
            }
        }
        let oracle = (xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)) * 1e3;
        assert!((fast - oracle).abs() < 1e-9, "{fast} vs {oracle}");
    }

    #[test]
    fn kdsd_scale_and_same_distribution() {
        let mut rng = rng_from(4);
        // same-distribution halves stay within 3 standard errors of zero
        let mut vals = Vec::new();
        for _ in 0..100 {
            let a = gaussian_set(24, 4, 0.0, &mut rng);
            let b = gaussian_set(24, 4, 0.0, &mut rng);
            vals.push(kdsd(&a, &b).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let se = (var / vals.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn kdsd_rejects_tiny_sets() {
        let mut rng = rng_from(5);
        let a = gaussian_set(1, 4, 0.0, &mut rng);
        let b = gaussian_set(10, 4, 0.0, &mut rng);
        assert!(kdsd(&a, &b).is_err());
        assert!(fdsd(&a, &b).is_err());
    }

    #[test]
    fn unique_percentage_rules() {
        // all identical: 0%
        let same = vec![vec![0.5; 10]; 5];
        assert_eq!(unique_percentage(&same, 0.5), 0.0);

        // constructed pairwise >= delta apart: 100%
        let mut apart = Vec::new();
        for i in 0..5 {
            let mut v = vec![0.0; 10];
            v[i] = 1.0;
            apart.push(v);
        }
        assert_eq!(unique_percentage(&apart, 0.5), 100.0);

        // monotone in delta
        let mut rng = rng_from(6);
        let noisy: Vec<Vec<f64>> =
            (0..20).map(|_| (0..10).map(|_| normal(&mut rng)).collect()).collect();
        let mut prev = 101.0;
        for delta in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let u = unique_percentage(&noisy, delta);
            assert!(u <= prev, "uniqueness must not increase with delta");
            prev = u;
        }

        // matches an independent recomputation
        let brute = |flat: &[Vec<f64>], delta: f64| {
            let n = flat.len();
            let mut count = 0;
            for i in 0..n {
                let mut ok = true;
                for j in 0..n {
                    if i != j {
                        let d: f64 = flat[i]
                            .iter()
                            .zip(&flat[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        if d < delta {
                            ok = false;
                        }
                    }
                }
                if ok {
                    count += 1;
                }
            }
            100.0 * count as f64 / n as f64
        };
        for delta in [0.5, 1.5, 3.0] {
            assert_eq!(unique_percentage(&noisy, delta), brute(&noisy, delta));
        }
    }
}
