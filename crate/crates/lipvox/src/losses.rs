//! Training objectives: reconstruction, global and local KL matching,
//! WGAN-GP pair, voice loss, and the weighted generator total.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedders::SpeakerEmbedder;
use crate::error::{Error, Result};
use crate::model::LatentDistribution;
use crate::tensor::{backward, Arr, Tensor};
use ndarray::IxDyn;

/// Loss weights; the KL, reconstruction and voice weights follow the
/// training recipe, the adversarial weight and gradient-penalty weight are
/// exposed here with conventional defaults.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_kl_global: f64,
    pub lambda_kl_local: f64,
    pub lambda_voice: f64,
    pub lambda_gp: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 10.0,
            lambda_kl_global: 5.0,
            lambda_kl_local: 5.0,
            lambda_voice: 5.0,
            lambda_gp: 10.0,
            lambda_adv: 1.0,
        }
    }
}

/// Named scalar record of every term plus the weighted generator total.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_kl_global: f64,
    pub l_kl_local: f64,
    pub l_voice: f64,
    pub l_adv_gen: f64,
    pub l_adv_critic: f64,
    pub l_gp: f64,
    pub total_gen: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> Option<&'static str> {
        let checks = [
            (self.l_r, "l_r"),
            (self.l_kl_global, "l_kl_global"),
            (self.l_kl_local, "l_kl_local"),
            (self.l_voice, "l_voice"),
            (self.l_adv_gen, "l_adv_gen"),
            (self.l_adv_critic, "l_adv_critic"),
            (self.l_gp, "l_gp"),
        ];
        for (v, name) in checks {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// Weighted generator total. The gradient penalty belongs to the critic's
/// own objective and is not part of this sum.
pub fn total_generator_loss(parts: &LossBreakdown, w: &LossWeights) -> f64 {
    w.lambda_r * parts.l_r
        + w.lambda_kl_global * parts.l_kl_global
        + w.lambda_kl_local * parts.l_kl_local
        + w.lambda_voice * parts.l_voice
        + w.lambda_adv * parts.l_adv_gen
}

/// Closed-form diagonal-Gaussian `KL(p || q)`: summed over latent dims,
/// averaged over timesteps and batch.
pub fn kl_gaussian(p: &LatentDistribution, q: &LatentDistribution) -> Result<Tensor> {
    if p.mu.shape() != q.mu.shape() {
        return Err(Error::Model(format!(
            "kl shape mismatch: {:?} vs {:?}",
            p.mu.shape(),
            q.mu.shape()
        )));
    }
    let var_p = p.sigma.square();
    let var_q = q.sigma.square();
    let dmu = p.mu.sub(&q.mu);
    let term = q
        .sigma
        .ln()
        .sub(&p.sigma.ln())
        .add(&var_p.add(&dmu.square()).div(&var_q.scale(2.0)))
        .add_scalar(-0.5);
    Ok(term.sum_axis(2).mean_axis(1).mean_axis(0))
}

/// Global KL over the full sequences, content distribution as the reference.
pub fn kl_global(content: &LatentDistribution, lip: &LatentDistribution) -> Result<Tensor> {
    kl_gaussian(content, lip)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlLocalConfig {
    pub segments: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for KlLocalConfig {
    fn default() -> Self {
        Self { segments: 10, min_len: 5, max_len: 20 }
    }
}

/// Draws the per-sample segment list for the local KL: length uniform in
/// `[min_len, max_len]` (capped at T), start uniform over valid positions.
pub fn draw_segments(
    steps: usize,
    cfg: &KlLocalConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if steps < cfg.min_len {
        return Err(Error::Model(format!(
            "sequence of {steps} steps shorter than minimum segment {}",
            cfg.min_len
        )));
    }
    Ok((0..batch)
        .map(|_| {
            (0..cfg.segments)
                .map(|_| {
                    let len = rng.gen_range(cfg.min_len..=cfg.max_len).min(steps);
                    let start = rng.gen_range(0..=steps - len);
                    (start, len)
                })
                .collect()
        })
        .collect())
}

/// Local KL on explicit `(start, len)` segments per batch sample; the same
/// positions slice both distributions.
pub fn kl_local_with_segments(
    content: &LatentDistribution,
    lip: &LatentDistribution,
    segments: &[Vec<(usize, usize)>],
) -> Result<Tensor> {
    let batch = content.batch();
    if segments.len() != batch {
        return Err(Error::Model("one segment list per batch sample".into()));
    }
    let mut total = Tensor::scalar(0.0);
    let mut count = 0usize;
    for (i, segs) in segments.iter().enumerate() {
        let c_i = content.slice_batch(i);
        let l_i = lip.slice_batch(i);
        for &(start, len) in segs {
            let kl = kl_gaussian(&c_i.slice_steps(start, len), &l_i.slice_steps(start, len))?;
            total = total.add(&kl);
            count += 1;
        }
    }
    Ok(total.scale(1.0 / count.max(1) as f64))
}

/// Local KL with randomly drawn corresponding segments.
pub fn kl_local(
    content: &LatentDistribution,
    lip: &LatentDistribution,
    cfg: &KlLocalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let segments = draw_segments(content.num_steps(), cfg, content.batch(), rng)?;
    kl_local_with_segments(content, lip, &segments)
}

/// Mean absolute difference over all cells and the batch.
pub fn recon_l1(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    if generated.shape() != target.shape() {
        return Err(Error::Model(format!(
            "recon shape mismatch {:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    Ok(generated.sub(target).abs().mean_all())
}

/// The Wasserstein pair plus gradient penalty.
pub struct WganLosses {
    /// What the critic minimizes (before adding the weighted penalty).
    pub critic: Tensor,
    /// What the generator minimizes.
    pub generator: Tensor,
    pub gradient_penalty: Tensor,
}

/// Computes `mean D(fake) - mean D(real)`, `-mean D(fake)` and the penalty
/// `mean (||grad_xhat D(xhat)|| - 1)^2` at per-sample random interpolates
/// `xhat = eps * real + (1 - eps) * fake`.
pub fn wgan_losses(
    critic: &dyn Fn(&Tensor) -> Result<Tensor>,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<WganLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::Model("real/fake batches must share a shape".into()));
    }
    let batch = real.shape()[0];
    let d_real = critic(real)?;
    let d_fake = critic(fake)?;
    for t in [&d_real, &d_fake] {
        if t.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite critic output".into()));
        }
    }
    let critic_loss = d_fake.mean_all().sub(&d_real.mean_all());
    let generator_loss = d_fake.mean_all().neg();

    // one interpolation point per sample
    let mut xh_val = Arr::zeros(IxDyn(real.shape()));
    for i in 0..batch {
        let eps: f64 = rng.gen_range(0.0..1.0);
        let r = real.value().index_axis(ndarray::Axis(0), i);
        let f = fake.value().index_axis(ndarray::Axis(0), i);
        let mut slot = xh_val.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut slot)
            .and(&r)
            .and(&f)
            .for_each(|o, &rv, &fv| *o = eps * rv + (1.0 - eps) * fv);
    }
    let xh = Tensor::leaf(xh_val);
    let d_hat = critic(&xh)?.sum_all();
    let grad = backward(&d_hat, &[&xh], true).get_or_zeros(&xh);
    let mut flat_norm = grad.square();
    while flat_norm.shape().len() > 1 {
        let last = flat_norm.shape().len() - 1;
        flat_norm = flat_norm.sum_axis(last);
    }
    let gp = flat_norm.sqrt().add_scalar(-1.0).square().mean_all();

    Ok(WganLosses { critic: critic_loss, generator: generator_loss, gradient_penalty: gp })
}

/// `1 - cosine(speaker_embed(generated), target)`, averaged over the batch.
/// Longer windows are embedded on a random aligned 100-step slice. Gradients
/// reach `generated` through the frozen embedder.
pub fn voice_loss(
    embedder: &SpeakerEmbedder,
    generated: &Tensor,
    target: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, t) = (generated.shape()[0], generated.shape()[1]);
    if t < 100 {
        return Err(Error::Model(format!("voice loss needs at least 100 steps, got {t}")));
    }
    if target.shape() != [b, crate::embedders::SPEAKER_DIM] {
        return Err(Error::Model("voice target must be (B, 256)".into()));
    }
    let window = if t == 100 {
        generated.clone()
    } else {
        let start = rng.gen_range(0..=t - 100);
        generated.narrow(1, start, 100)
    };
    let emb = embedder.embed_tensor(&window); // (B, 256) unit rows
    let cos = emb.mul(target).sum_axis(1); // (B,)
    Ok(cos.neg().add_scalar(1.0).mean_all())
}
