//! Training protocol: RMSProp for generator and critic, several critic
//! updates per generator update, train-time latent sampling from a
//! configurable source, early stopping on the critic objective, and
//! per-epoch checkpoints plus a JSONL metrics log.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_config, save_checkpoint, Checkpoint, RngState,
    FORMAT_VERSION,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::corpus::{lips_to_tensor, mels_to_tensor, BatchStream, CorpusManifest, TrainingExample};
use crate::error::{Error, Result};
use crate::losses::{
    kl_global, kl_local, recon_l1, voice_loss, wgan_losses, KlLocalConfig,
    LossBreakdown, LossWeights,
};
use crate::model::{reparam_sample, temporal_upsample, LatentDistribution, Model, SIGMA_FLOOR};
use crate::nn::{ParamStore, RmsProp};
use crate::rng::{rng_from, subseed};
use crate::tensor::{backward, no_grad, Tensor};

/// Which latent distribution feeds the decoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingSource {
    Content,
    Lip,
    /// Alternates per generator step: first step content, next lip.
    Alternate,
}

/// Visual-input ablation: full face crops or only the lower half
/// (stretched back to 96x96).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    FullFace,
    LowerHalf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_iters_per_gen: usize,
    pub sampling_source: SamplingSource,
    pub variational: bool,
    pub crop_mode: CropMode,
    pub weights: LossWeights,
    pub kl_local: KlLocalConfig,
    pub patience_epochs: usize,
    /// Minimum decrease of the epoch-mean critic objective that counts as
    /// improvement for the stopping rule.
    pub min_improvement: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 5e-5,
            critic_iters_per_gen: 5,
            sampling_source: SamplingSource::Content,
            variational: true,
            crop_mode: CropMode::FullFace,
            weights: LossWeights::default(),
            kl_local: KlLocalConfig::default(),
            patience_epochs: 10,
            min_improvement: 1e-4,
            seed: 0,
            max_epochs: 100,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.critic_iters_per_gen == 0 {
            return Err(Error::Config("critic_iters_per_gen must be at least 1".into()));
        }
        if self.patience_epochs == 0 {
            return Err(Error::Config("patience_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Early stopping: the best epoch-mean critic objective must decrease by at
/// least `min_improvement` within `patience` epochs.
pub struct StoppingRule {
    patience: usize,
    min_improvement: f64,
    best: Option<f64>,
    epochs_since: usize,
}

impl StoppingRule {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        Self { patience, min_improvement, best: None, epochs_since: 0 }
    }

    /// Observes one epoch value; true means training stops after this epoch.
    pub fn observe(&mut self, value: f64) -> bool {
        match self.best {
            None => {
                self.best = Some(value);
                self.epochs_since = 0;
                false
            }
            Some(best) if best - value >= self.min_improvement => {
                self.best = Some(value);
                self.epochs_since = 0;
                false
            }
            Some(_) => {
                self.epochs_since += 1;
                self.epochs_since >= self.patience
            }
        }
    }

    /// Whether the last observed epoch set a new best.
    pub fn just_improved(&self) -> bool {
        self.epochs_since == 0 && self.best.is_some()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub critic_objective: f64,
    pub critic_steps: usize,
    pub gen_steps: usize,
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_path(&self) -> PathBuf {
        self.out_dir.join("best.ckpt")
    }
    pub fn last_path(&self) -> PathBuf {
        self.out_dir.join("last.ckpt")
    }
    pub fn first_path(&self) -> PathBuf {
        self.out_dir.join("first.ckpt")
    }
}

/// A model assembly restored from a checkpoint.
pub struct LoadedModel {
    pub store: ParamStore,
    pub model: Model,
    pub checkpoint: Checkpoint,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let checkpoint = load_checkpoint(path)?;
    let mut store = ParamStore::new();
    let mut rng = rng_from(0);
    let model = Model::new(&mut store, checkpoint.num_speakers, &mut rng);
    checkpoint.apply_to_store(&store)?;
    store.freeze_prefix("surrogate.");
    Ok(LoadedModel { store, model, checkpoint })
}

/// Applies the crop-mode ablation to a `(B, T, 96, 96, 3)` lips tensor.
pub fn apply_crop_mode(lips: &Tensor, mode: CropMode) -> Tensor {
    match mode {
        CropMode::FullFace => lips.clone(),
        CropMode::LowerHalf => lips.narrow(2, 48, 48).repeat_interleave(2, 2),
    }
}

fn speaker_targets(model: &Model, batch: &[TrainingExample]) -> Result<Tensor> {
    let mels: Vec<crate::audio::MelSpectrogram> = batch
        .iter()
        .map(|ex| crate::audio::melspectrogram(&ex.speaker_ref))
        .collect::<Result<_>>()?;
    let refs: Vec<&crate::audio::MelSpectrogram> = mels.iter().collect();
    Ok(no_grad(|| model.surrogates.speaker.embed_tensor(&mels_to_tensor(&refs))).detach())
}

/// Projection output with the variational ablation applied: with
/// `variational` off the sigmas are forced to the clamp floor.
fn latent_for(dist: LatentDistribution, variational: bool) -> LatentDistribution {
    if variational {
        dist
    } else {
        let floor = Tensor::constant(crate::tensor::Arr::from_elem(
            ndarray::IxDyn(dist.sigma.shape()),
            SIGMA_FLOOR,
        ));
        LatentDistribution { mu: dist.mu, sigma: floor }
    }
}

fn pick_source(
    source: SamplingSource,
    gen_step_index: usize,
    d_content: &LatentDistribution,
    d_lip: &LatentDistribution,
) -> LatentDistribution {
    match source {
        SamplingSource::Content => d_content.clone(),
        SamplingSource::Lip => d_lip.clone(),
        SamplingSource::Alternate => {
            if gen_step_index % 2 == 0 {
                d_content.clone()
            } else {
                d_lip.clone()
            }
        }
    }
}

/// Decoder input sample: reparameterized draw, or the mean when the
/// variational path is ablated away.
fn sample_from(d: &LatentDistribution, variational: bool, rng: &mut ChaCha8Rng) -> Tensor {
    if variational {
        reparam_sample(d, rng)
    } else {
        d.mu.clone()
    }
}

/// Computes the latent distribution feeding the critic-step fake batch.
/// Lip-path sources need the visual encoder even on critic steps.
fn fake_batch(
    model: &Model,
    batch: &[TrainingExample],
    config: &TrainConfig,
    gen_step_index: usize,
    v: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    no_grad(|| -> Result<Tensor> {
        let mels: Vec<&crate::audio::MelSpectrogram> = batch.iter().map(|ex| &ex.mel).collect();
        let real = mels_to_tensor(&mels);
        let source = config.sampling_source;
        let need_lip = matches!(source, SamplingSource::Lip)
            || (matches!(source, SamplingSource::Alternate) && gen_step_index % 2 == 1);
        let d = if need_lip {
            let lips = apply_crop_mode(&lips_to_tensor(batch), config.crop_mode);
            let feats = temporal_upsample(&model.visual.forward(&lips)?);
            latent_for(model.proj_lip.forward(&feats), config.variational)
        } else {
            let content = model.surrogates.content.features(&real);
            latent_for(model.proj_content.forward(&content), config.variational)
        };
        let z = sample_from(&d, config.variational, rng);
        model.decoder.forward(&z, v)
    })
}

enum InitFrom<'a> {
    /// Fresh trainable parameters; frozen surrogates from this checkpoint.
    SurrogatesOnly(&'a Checkpoint),
    /// Everything (trainables included) from this checkpoint.
    FullCheckpoint(&'a Checkpoint),
}

/// Trains on `manifest` with pretrained surrogates taken from
/// `surrogates` (a checkpoint containing `surrogate.*` blobs).
pub fn train(
    manifest: &CorpusManifest,
    config: &TrainConfig,
    surrogates: &Checkpoint,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_from(manifest, config, InitFrom::SurrogatesOnly(surrogates), out_dir)
}

/// Fine-tunes all trainable parameters starting from `base`; surrogates stay
/// frozen. Warns (does not fail) when the manifest has several speakers.
pub fn finetune(
    base: &Checkpoint,
    manifest: &CorpusManifest,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let distinct: std::collections::BTreeSet<&str> =
        manifest.utterances.iter().map(|u| u.speaker_id.as_str()).collect();
    if distinct.len() > 1 {
        log::warn!("fine-tuning manifest has {} speakers; expected one", distinct.len());
    }
    train_from(manifest, config, InitFrom::FullCheckpoint(base), out_dir)
}

fn train_from(
    manifest: &CorpusManifest,
    config: &TrainConfig,
    init: InitFrom,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let init_ckpt = match &init {
        InitFrom::SurrogatesOnly(c) | InitFrom::FullCheckpoint(c) => *c,
    };
    if !init_ckpt.has_prefix("surrogate.") {
        return Err(Error::Checkpoint(
            "initial checkpoint carries no pretrained surrogates".into(),
        ));
    }

    let mut store = ParamStore::new();
    let mut init_rng = rng_from(subseed(config.seed, 0x1217, 0));
    let model = Model::new(&mut store, init_ckpt.num_speakers, &mut init_rng);
    match &init {
        InitFrom::SurrogatesOnly(c) => c.apply_prefix(&store, "surrogate.")?,
        InitFrom::FullCheckpoint(c) => c.apply_to_store(&store)?,
    }
    store.freeze_prefix("surrogate.");

    let mut gen_opt = RmsProp::new(
        model.generator_params(&store),
        config.learning_rate,
        config.rmsprop_decay,
        config.rmsprop_eps,
    );
    let mut critic_opt = RmsProp::new(
        model.critic_params(&store),
        config.learning_rate,
        config.rmsprop_decay,
        config.rmsprop_eps,
    );

    let mut stream =
        BatchStream::new(std::rc::Rc::new(crate::corpus::CorpusCache::new(manifest.clone())), config.batch_size, subseed(config.seed, 0xda7a, 0))?;
    let batches_per_epoch = stream.batches_per_epoch();
    if batches_per_epoch == 0 {
        return Err(Error::Corpus(format!(
            "batch size {} larger than corpus ({} utterances)",
            config.batch_size,
            manifest.utterances.len()
        )));
    }

    let trainer_seed = subseed(config.seed, 0x7277, 0);
    let mut rng = rng_from(trainer_seed);

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut stopping = StoppingRule::new(config.patience_epochs, config.min_improvement);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut stopped_early = false;

    let write_ckpt = |store: &ParamStore,
                      name: &str,
                      epoch: usize,
                      rng: &ChaCha8Rng,
                      history: &[EpochRecord],
                      opt_state: Vec<(String, crate::tensor::Arr)>|
     -> Result<()> {
        let losses: Vec<LossBreakdown> = history.iter().map(|r| r.losses).collect();
        let ckpt = Checkpoint::from_store(
            store,
            opt_state,
            config.clone(),
            init_ckpt.num_speakers,
            epoch,
            RngState { seed: trainer_seed, word_pos: rng.get_word_pos() },
            losses,
        );
        save_checkpoint(&ckpt, &out_dir.join(name))
    };

    if config.max_epochs == 0 {
        // zero-step run: emit the initial state unchanged
        for name in ["first.ckpt", "best.ckpt", "last.ckpt"] {
            write_ckpt(&store, name, 0, &rng, &history, Vec::new())?;
        }
        metrics.flush()?;
        return Ok(TrainOutcome {
            out_dir: out_dir.to_path_buf(),
            history,
            best_epoch: 0,
            epochs_run: 0,
            stopped_early: false,
        });
    }

    let mut critic_counter = 0usize; // critic updates since last generator update
    let mut gen_step_index = 0usize;
    let mut carry_gen = LossBreakdown::default();

    for epoch in 0..config.max_epochs {
        let mut sums = LossBreakdown::default();
        let mut critic_steps = 0usize;
        let mut gen_steps = 0usize;

        for _ in 0..batches_per_epoch {
            let batch = stream.next_batch()?;
            let mels: Vec<&crate::audio::MelSpectrogram> = batch.iter().map(|ex| &ex.mel).collect();
            let real = mels_to_tensor(&mels);
            let v = speaker_targets(&model, &batch)?;

            if critic_counter < config.critic_iters_per_gen {
                // ---- critic update ----
                let fake = fake_batch(&model, &batch, config, gen_step_index, &v, &mut rng)?
                    .detach();
                let snap = critic_opt.snapshot();
                let critic_fn = |x: &Tensor| model.critic.forward(x);
                let w = wgan_losses(&critic_fn, &real, &fake, &mut rng)?;
                let l_adv_critic = w.critic.item();
                let l_gp = w.gradient_penalty.item();
                if !l_adv_critic.is_finite() {
                    return Err(Error::NonFinite { term: "l_adv_critic".into(), epoch });
                }
                if !l_gp.is_finite() {
                    return Err(Error::NonFinite { term: "l_gp".into(), epoch });
                }
                let total = w.critic.add(&w.gradient_penalty.scale(config.weights.lambda_gp));
                let refs: Vec<&Tensor> = snap.iter().collect();
                let grads = backward(&total, &refs, false);
                critic_opt.step(&snap, &grads);

                sums.l_adv_critic += l_adv_critic;
                sums.l_gp += l_gp;
                critic_steps += 1;
                critic_counter += 1;
            } else {
                // ---- generator update ----
                let lips = apply_crop_mode(&lips_to_tensor(&batch), config.crop_mode);
                let snap = gen_opt.snapshot();

                let content = model.surrogates.content.features(&real);
                let d_content = latent_for(model.proj_content.forward(&content), config.variational);
                let feats = temporal_upsample(&model.visual.forward(&lips)?);
                let d_lip = latent_for(model.proj_lip.forward(&feats), config.variational);

                let source = pick_source(config.sampling_source, gen_step_index, &d_content, &d_lip);
                let z = sample_from(&source, config.variational, &mut rng);
                let fake = model.decoder.forward(&z, &v)?;

                let l_r = recon_l1(&fake, &real)?;
                let (l_kl_g, l_kl_l) = if config.variational {
                    (
                        kl_global(&d_content, &d_lip)?,
                        kl_local(&d_content, &d_lip, &config.kl_local, &mut rng)?,
                    )
                } else {
                    (Tensor::scalar(0.0), Tensor::scalar(0.0))
                };
                let l_voice = voice_loss(&model.surrogates.speaker, &fake, &v, &mut rng)?;
                let l_adv_gen = model.critic.forward(&fake)?.mean_all().neg();

                let w = &config.weights;
                let total = l_r
                    .scale(w.lambda_r)
                    .add(&l_kl_g.scale(w.lambda_kl_global))
                    .add(&l_kl_l.scale(w.lambda_kl_local))
                    .add(&l_voice.scale(w.lambda_voice))
                    .add(&l_adv_gen.scale(w.lambda_adv));

                let parts = LossBreakdown {
                    l_r: l_r.item(),
                    l_kl_global: l_kl_g.item(),
                    l_kl_local: l_kl_l.item(),
                    l_voice: l_voice.item(),
                    l_adv_gen: l_adv_gen.item(),
                    l_adv_critic: 0.0,
                    l_gp: 0.0,
                    total_gen: total.item(),
                };
                if let Some(term) = parts.all_finite() {
                    return Err(Error::NonFinite { term: term.into(), epoch });
                }

                let refs: Vec<&Tensor> = snap.iter().collect();
                let grads = backward(&total, &refs, false);
                gen_opt.step(&snap, &grads);

                sums.l_r += parts.l_r;
                sums.l_kl_global += parts.l_kl_global;
                sums.l_kl_local += parts.l_kl_local;
                sums.l_voice += parts.l_voice;
                sums.l_adv_gen += parts.l_adv_gen;
                sums.total_gen += parts.total_gen;
                gen_steps += 1;
                gen_step_index += 1;
                critic_counter = 0;
            }
        }

        // epoch means; generator terms carry over when no generator step ran
        let mut losses = LossBreakdown::default();
        if critic_steps > 0 {
            losses.l_adv_critic = sums.l_adv_critic / critic_steps as f64;
            losses.l_gp = sums.l_gp / critic_steps as f64;
        }
        if gen_steps > 0 {
            losses.l_r = sums.l_r / gen_steps as f64;
            losses.l_kl_global = sums.l_kl_global / gen_steps as f64;
            losses.l_kl_local = sums.l_kl_local / gen_steps as f64;
            losses.l_voice = sums.l_voice / gen_steps as f64;
            losses.l_adv_gen = sums.l_adv_gen / gen_steps as f64;
            losses.total_gen = sums.total_gen / gen_steps as f64;
            carry_gen = losses;
        } else {
            losses.l_r = carry_gen.l_r;
            losses.l_kl_global = carry_gen.l_kl_global;
            losses.l_kl_local = carry_gen.l_kl_local;
            losses.l_voice = carry_gen.l_voice;
            losses.l_adv_gen = carry_gen.l_adv_gen;
            losses.total_gen = carry_gen.total_gen;
        }

        let critic_objective = losses.l_adv_critic + config.weights.lambda_gp * losses.l_gp;
        if !critic_objective.is_finite() {
            return Err(Error::NonFinite { term: "critic_objective".into(), epoch });
        }
        let record = EpochRecord { epoch, losses, critic_objective, critic_steps, gen_steps };
        serde_json::to_writer(&mut metrics, &record)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        history.push(record);
        log::info!(
            "epoch {epoch}: l_r {:.4} critic {:.4} gp {:.4} total {:.4}",
            losses.l_r,
            losses.l_adv_critic,
            losses.l_gp,
            losses.total_gen
        );

        let opt_state = || {
            let mut v: Vec<(String, crate::tensor::Arr)> = Vec::new();
            for (name, arr) in gen_opt.state() {
                v.push((format!("opt.gen.{name}"), arr));
            }
            for (name, arr) in critic_opt.state() {
                v.push((format!("opt.critic.{name}"), arr));
            }
            v
        };

        if epoch == 0 {
            write_ckpt(&store, "first.ckpt", epoch, &rng, &history, Vec::new())?;
        }
        let stop = stopping.observe(critic_objective);
        if stopping.just_improved() {
            best_epoch = epoch;
            write_ckpt(&store, "best.ckpt", epoch, &rng, &history, Vec::new())?;
        }
        write_ckpt(&store, "last.ckpt", epoch, &rng, &history, opt_state())?;

        if stop {
            stopped_early = true;
            log::info!("stopping: critic objective flat for {} epochs", config.patience_epochs);
            break;
        }
    }

    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        epochs_run: history.len(),
        history,
        best_epoch,
        stopped_early,
    })
}
