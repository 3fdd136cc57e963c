//! Trainable networks: visual encoder, the two projection modules, the
//! speaker-conditioned speech decoder, and the critic body.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BiGru, BiLstm, Conv1dLayer, Conv3dLayer, Linear, ParamStore};
use crate::rng::normal_arr;
use crate::tensor::{concat, no_grad, Tensor};

pub const LATENT_DIM: usize = 256;
pub const VISUAL_DIM: usize = 512;
/// Nearest-neighbor temporal upsampling factor (25 fps -> 100 mel steps/s).
pub const UPSAMPLE: usize = 4;
/// Hard bounds on latent sigmas.
pub const SIGMA_FLOOR: f64 = 1e-4;
pub const SIGMA_CEIL: f64 = 10.0;
/// Log-variance clamp used by the projection heads: sigma in [1e-2, 10].
pub const LOGVAR_MIN: f64 = -9.210340371976182; // 2 ln 1e-2
pub const LOGVAR_MAX: f64 = 4.605170185988092; // 2 ln 10

/// Per-timestep diagonal Gaussian over the shared latent space,
/// `mu`/`sigma` of shape `(B, T, 256)`.
#[derive(Clone)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LatentDistribution {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::Model(format!(
                "latent mu {:?} vs sigma {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        for &v in sigma.value().iter() {
            if !v.is_finite() || !(SIGMA_FLOOR - 1e-12..=SIGMA_CEIL + 1e-12).contains(&v) {
                return Err(Error::Model(format!("sigma out of range: {v}")));
            }
        }
        Ok(Self { mu, sigma })
    }

    pub fn num_steps(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    /// Time slice `[start, start+len)` of both parameters.
    pub fn slice_steps(&self, start: usize, len: usize) -> LatentDistribution {
        LatentDistribution {
            mu: self.mu.narrow(1, start, len),
            sigma: self.sigma.narrow(1, start, len),
        }
    }

    /// Batch row `i` as a 1-sample distribution.
    pub fn slice_batch(&self, i: usize) -> LatentDistribution {
        LatentDistribution {
            mu: self.mu.narrow(0, i, 1),
            sigma: self.sigma.narrow(0, i, 1),
        }
    }
}

/// `z = mu + sigma * eps`, `eps ~ N(0, I)` from the given stream; gradients
/// flow into both parameters.
pub fn reparam_sample(d: &LatentDistribution, rng: &mut ChaCha8Rng) -> Tensor {
    let eps = Tensor::constant(normal_arr(d.mu.shape(), rng));
    d.mu.add(&d.sigma.mul(&eps))
}

/// Repeats every timestep 4x: `(B, T, D) -> (B, 4T, D)`.
pub fn temporal_upsample(features: &Tensor) -> Tensor {
    features.repeat_interleave(1, UPSAMPLE)
}

/// Stack of 3D convolutions over `(B, T, 96, 96, 3)`; only the first layer
/// has a temporal extent (5 frames), later blocks are temporally pointwise.
/// Spatial side: 96 -> 48 -> 24 -> 12 -> 6 -> 3 -> 3, then global average.
pub struct VisualEncoder {
    blocks: Vec<Conv3dLayer>,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let p = "visual";
        let dims = [3usize, 32, 64, 128, 256, 512, 512];
        let mut blocks = Vec::new();
        for i in 0..6 {
            let (kernel, stride, pad) = if i == 0 {
                ([5, 3, 3], [1, 2, 2], [2, 1, 1])
            } else if i < 5 {
                ([1, 3, 3], [1, 2, 2], [0, 1, 1])
            } else {
                ([1, 3, 3], [1, 1, 1], [0, 1, 1])
            };
            blocks.push(Conv3dLayer::new(
                store,
                &format!("{p}.b{}", i + 1),
                dims[i],
                dims[i + 1],
                kernel,
                stride,
                pad,
                rng,
            ));
        }
        Self { blocks }
    }

    /// `(B, T, 96, 96, 3) -> (B, T, 512)`, any T >= 5.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 5 || s[2] != 96 || s[3] != 96 || s[4] != 3 {
            return Err(Error::Model(format!("visual input must be (B,T,96,96,3), got {s:?}")));
        }
        if s[1] < 5 {
            return Err(Error::Model(format!(
                "visual encoder needs at least 5 frames, got {}",
                s[1]
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h).relu();
        }
        // global spatial average over the 3x3 map
        Ok(h.mean_axis(2).mean_axis(2))
    }
}

/// Projection module: bi-GRU, ReLU fully-connected layer, then per-step mu
/// and log-variance heads.
pub struct Projection {
    gru: BiGru,
    fc: Linear,
    mu: Linear,
    logvar: Linear,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gru: BiGru::new(store, &format!("{name}.gru"), input_dim, LATENT_DIM, rng),
            fc: Linear::new(store, &format!("{name}.fc"), 2 * LATENT_DIM, 512, rng),
            mu: Linear::new(store, &format!("{name}.mu"), 512, LATENT_DIM, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), 512, LATENT_DIM, rng),
        }
    }

    /// `(B, T, input_dim) -> (mu, sigma)` each `(B, T, 256)`.
    pub fn forward(&self, x: &Tensor) -> LatentDistribution {
        let h = self.gru.forward_seq(x);
        let h = self.fc.forward_seq(&h).relu();
        let mu = self.mu.forward_seq(&h);
        let logvar = self.logvar.forward_seq(&h).clamp(LOGVAR_MIN, LOGVAR_MAX);
        let sigma = logvar.scale(0.5).exp();
        LatentDistribution { mu, sigma }
    }
}

/// Speech decoder: speaker vector through a ReLU dense layer, broadcast and
/// concatenated with the latent sample, bi-LSTM, then four dense layers with
/// a sigmoid output into the normalized mel range.
pub struct Decoder {
    spk_fc: Linear,
    lstm: BiLstm,
    dense: Vec<Linear>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let p = "decoder";
        let widths = [512usize, 512, 512, 256, 80];
        let dense = (0..4)
            .map(|i| Linear::new(store, &format!("{p}.d{}", i + 1), widths[i], widths[i + 1], rng))
            .collect();
        Self {
            spk_fc: Linear::new(store, &format!("{p}.spk_fc"), 256, 256, rng),
            lstm: BiLstm::new(store, &format!("{p}.lstm"), 512, 256, rng),
            dense,
        }
    }

    /// `z: (B, T, 256)`, `v: (B, 256)` -> mel `(B, T, 80)` in [0, 1].
    pub fn forward(&self, z: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        if d != LATENT_DIM || v.shape() != [b, LATENT_DIM] {
            return Err(Error::Model(format!(
                "decoder inputs z {:?}, v {:?}",
                z.shape(),
                v.shape()
            )));
        }
        let spk = self.spk_fc.forward(v).relu(); // (B, 256)
        let spk_seq = spk.reshape(&[b, 1, LATENT_DIM]).broadcast_as(&[b, t, LATENT_DIM]);
        let h = concat(2, &[z.clone(), spk_seq]); // (B, T, 512)
        let mut h = self.lstm.forward_seq(&h); // (B, T, 512)
        for (i, layer) in self.dense.iter().enumerate() {
            h = layer.forward_seq(&h);
            if i + 1 < self.dense.len() {
                h = h.relu();
            }
        }
        Ok(h.sigmoid())
    }
}

/// Wasserstein critic: six 1-D convolutions over time (mel bands as
/// channels), kernel 5, stride 2 on alternating layers, global average and a
/// linear head. No output nonlinearity, no normalization layers.
pub struct Critic {
    convs: Vec<Conv1dLayer>,
    head: Linear,
}

impl Critic {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let p = "critic";
        let dims = [80usize, 128, 128, 256, 256, 512, 512];
        let convs = (0..6)
            .map(|i| {
                let stride = if i % 2 == 1 { 2 } else { 1 };
                Conv1dLayer::new(
                    store,
                    &format!("{p}.c{}", i + 1),
                    dims[i],
                    dims[i + 1],
                    5,
                    stride,
                    2,
                    rng,
                )
            })
            .collect();
        Self { convs, head: Linear::new(store, &format!("{p}.head"), 512, 1, rng) }
    }

    /// `(B, T', 80) -> (B,)` scores.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        if mel.shape().len() != 3 || mel.shape()[2] != 80 {
            return Err(Error::Model(format!(
                "critic input must be (B, T', 80), got {:?}",
                mel.shape()
            )));
        }
        let mut h = mel.clone();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(0.2);
        }
        let pooled = h.mean_axis(1); // (B, 512)
        let b = pooled.shape()[0];
        Ok(self.head.forward(&pooled).reshape(&[b]))
    }
}

/// Scalar critic score of one melspectrogram (no gradients).
#[derive(Clone, Copy, Debug)]
pub struct CriticScore {
    pub value: f64,
}

pub fn critic_score(critic: &Critic, m: &crate::audio::MelSpectrogram) -> Result<CriticScore> {
    let out = no_grad(|| critic.forward(&crate::corpus::mels_to_tensor(&[m])))?;
    let value = out.value()[[0]];
    if !value.is_finite() {
        return Err(Error::Model("non-finite critic score".into()));
    }
    Ok(CriticScore { value })
}

/// All trainable networks plus the frozen surrogates, sharing one parameter
/// store so checkpoints capture everything by section prefix.
pub struct Model {
    pub visual: VisualEncoder,
    pub proj_lip: Projection,
    pub proj_content: Projection,
    pub decoder: Decoder,
    pub critic: Critic,
    pub surrogates: crate::embedders::Surrogates,
}

pub const GENERATOR_PREFIXES: [&str; 4] = ["visual.", "proj_lip.", "proj_content.", "decoder."];
pub const CRITIC_PREFIX: &str = "critic.";

impl Model {
    pub fn new(store: &mut ParamStore, num_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            visual: VisualEncoder::new(store, rng),
            proj_lip: Projection::new(store, "proj_lip", VISUAL_DIM, rng),
            proj_content: Projection::new(store, "proj_content", crate::embedders::CONTENT_DIM, rng),
            decoder: Decoder::new(store, rng),
            critic: Critic::new(store, rng),
            surrogates: crate::embedders::Surrogates::new(store, num_speakers, rng),
        }
    }

    pub fn generator_params(&self, store: &ParamStore) -> Vec<crate::nn::Param> {
        GENERATOR_PREFIXES
            .iter()
            .flat_map(|p| store.trainable_with_prefix(p))
            .collect()
    }

    pub fn critic_params(&self, store: &ParamStore) -> Vec<crate::nn::Param> {
        store.trainable_with_prefix(CRITIC_PREFIX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::{rng_from, uniform_arr};
    use crate::tensor::{backward, finite_diff, Arr};

    fn small_model() -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut rng = rng_from(11);
        let model = Model::new(&mut store, 2, &mut rng);
        (store, model)
    }

    #[test]
    fn upsample_repeats_rows_and_quadruples_sum() {
        let mut rng = rng_from(1);
        let x = Tensor::constant(uniform_arr(&[1, 3, 4], -1.0, 1.0, &mut rng));
        let y = temporal_upsample(&x);
        assert_eq!(y.shape(), &[1, 12, 4]);
        for t in 0..3 {
            for k in 0..4 {
                for d in 0..4 {
                    assert_eq!(y.value()[[0, 4 * t + k, d]], x.value()[[0, t, d]]);
                }
            }
        }
        let sx: f64 = x.value().sum();
        let sy: f64 = y.value().sum();
        assert!((sy - 4.0 * sx).abs() < 1e-12);
    }

    #[test]
    fn projection_shapes_and_sigma_bounds() {
        let (_store, model) = small_model();
        let mut rng = rng_from(2);
        for _ in 0..5 {
            let x = Tensor::constant(uniform_arr(&[2, 16, VISUAL_DIM], -2.0, 2.0, &mut rng));
            let d = model.proj_lip.forward(&x);
            assert_eq!(d.mu.shape(), &[2, 16, LATENT_DIM]);
            assert_eq!(d.sigma.shape(), &[2, 16, LATENT_DIM]);
            for &s in d.sigma.value().iter() {
                assert!((1e-2 - 1e-12..=10.0 + 1e-12).contains(&s), "sigma {s}");
            }
        }
    }

    #[test]
    fn projections_have_distinct_parameters() {
        let (store, _model) = small_model();
        assert_ne!(store.checksum_prefix("proj_lip."), store.checksum_prefix("proj_content."));
    }

    #[test]
    fn projection_is_bidirectional() {
        // gradient of an early mu w.r.t. a late input step must be nonzero
        let (_store, model) = small_model();
        let mut rng = rng_from(3);
        let x = Tensor::leaf(uniform_arr(&[1, 12, VISUAL_DIM], -1.0, 1.0, &mut rng));
        let d = model.proj_lip.forward(&x);
        let probe = d.mu.narrow(1, 1, 1).sum_all();
        let g = backward(&probe, &[&x], false).get_or_zeros(&x);
        let late: f64 = g.value().slice(ndarray::s![0, 10, ..]).iter().map(|v| v.abs()).sum();
        assert!(late > 1e-9, "late input must influence early mu");
    }

    #[test]
    fn reparam_degenerate_and_moments() {
        let mut rng = rng_from(4);
        let mu = Tensor::constant(Arr::from_elem(ndarray::IxDyn(&[1, 2, 3]), 0.7));
        let sigma = Tensor::constant(Arr::from_elem(ndarray::IxDyn(&[1, 2, 3]), SIGMA_FLOOR));
        let d = LatentDistribution::new(mu, sigma).unwrap();
        let z = reparam_sample(&d, &mut rng);
        for &v in z.value().iter() {
            assert!((v - 0.7).abs() < 1e-3, "degenerate sample {v}");
        }

        // Monte-Carlo moments at one cell
        let mu = Tensor::constant(Arr::from_elem(ndarray::IxDyn(&[1, 1, 1]), -0.3));
        let sigma = Tensor::constant(Arr::from_elem(ndarray::IxDyn(&[1, 1, 1]), 0.8));
        let d = LatentDistribution::new(mu, sigma).unwrap();
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| reparam_sample(&d, &mut rng).value()[[0, 0, 0]]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se_mean = 0.8 / (n as f64).sqrt();
        assert!((mean + 0.3).abs() < 3.0 * se_mean, "mean {mean}");
        let se_sd = 0.8 / (2.0f64 * n as f64).sqrt();
        assert!((var.sqrt() - 0.8).abs() < 3.0 * se_sd, "std {}", var.sqrt());

        // determinism under the same stream
        let z1 = reparam_sample(&d, &mut rng_from(99));
        let z2 = reparam_sample(&d, &mut rng_from(99));
        assert_eq!(z1.value(), z2.value());
    }

    #[test]
    fn reparam_gradients_are_identity_and_eps() {
        let mut rng = rng_from(5);
        let mu = Tensor::leaf(uniform_arr(&[1, 2, 2], -1.0, 1.0, &mut rng));
        let sigma = Tensor::leaf(uniform_arr(&[1, 2, 2], 0.3, 0.9, &mut rng));
        let d = LatentDistribution { mu: mu.clone(), sigma: sigma.clone() };
        let mut rng2 = rng_from(31);
        let z = reparam_sample(&d, &mut rng2);
        let eps = z.sub(&mu).div(&sigma).detach();
        let loss = z.sum_all();
        let g = backward(&loss, &[&mu, &sigma], false);
        for &v in g.get_or_zeros(&mu).value().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let gs = g.get_or_zeros(&sigma);
        for (a, b) in gs.value().iter().zip(eps.value().iter()) {
            assert!((a - b).abs() < 1e-9, "d z / d sigma must equal eps");
        }
    }

    #[test]
    fn decoder_shapes_and_gradient() {
        let (_store, model) = small_model();
        let mut rng = rng_from(6);
        for t in [10usize, 20] {
            let z = Tensor::constant(uniform_arr(&[1, t, LATENT_DIM], -1.0, 1.0, &mut rng));
            let v = Tensor::constant(uniform_arr(&[1, LATENT_DIM], -1.0, 1.0, &mut rng));
            let y = model.decoder.forward(&z, &v).unwrap();
            assert_eq!(y.shape(), &[1, t, 80]);
            for &val in y.value().iter() {
                assert!((0.0..=1.0).contains(&val));
            }
        }

        // finite-difference check of d(sum output)/d(latent cell)
        let z = Tensor::leaf(uniform_arr(&[1, 6, LATENT_DIM], -1.0, 1.0, &mut rng));
        let v = Tensor::constant(uniform_arr(&[1, LATENT_DIM], -1.0, 1.0, &mut rng));
        let loss = model.decoder.forward(&z, &v).unwrap().sum_all();
        let g = backward(&loss, &[&z], false).get_or_zeros(&z);
        let cells = [0usize, 300, 777, 1203];
        let mut f = |a: &Arr| {
            model.decoder.forward(&Tensor::constant(a.clone()), &v).unwrap().sum_all().item()
        };
        for (c, num) in finite_diff(&mut f, z.value(), &cells, 1e-5) {
            let an = g.value().as_slice().unwrap()[c];
            let denom = num.abs().max(an.abs()).max(1e-10);
            assert!((an - num).abs() / denom < 1e-3, "cell {c}: {an} vs {num}");
        }
    }

    #[test]
    fn critic_scalar_deterministic_finite_gradients() {
        let (_store, model) = small_model();
        let mut rng = rng_from(7);
        for _ in 0..10 {
            let x = Tensor::leaf(uniform_arr(&[1, 40, 80], 0.0, 1.0, &mut rng));
            let s = model.critic.forward(&x).unwrap();
            assert_eq!(s.shape(), &[1]);
            assert!(s.value()[[0]].is_finite());

            let g = backward(&s.sum_all(), &[&x], true).get_or_zeros(&x);
            assert!(g.value().iter().all(|v| v.is_finite()));
        }
        let x = Tensor::constant(uniform_arr(&[2, 100, 80], 0.0, 1.0, &mut rng));
        let a = model.critic.forward(&x).unwrap();
        let b = model.critic.forward(&x).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn visual_encoder_rejects_bad_inputs() {
        let (_store, model) = small_model();
        assert!(model.visual.forward(&Tensor::zeros(&[1, 4, 96, 96, 3])).is_err());
        assert!(model.visual.forward(&Tensor::zeros(&[1, 8, 64, 64, 3])).is_err());
    }
}
