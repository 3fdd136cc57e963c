//! Command-line interface: gen-data, pretrain-surrogates, train, finetune,
//! synth, eval, gstrength. Every command honors `--seed` (falling back to
//! the config file, then `LIPVOX_SEED`), echoes the resolved configuration,
//! and produces byte-identical artifacts for identical invocations.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::corpus::{generate_corpus, load_frames_dir, load_manifest};
use crate::embedders::{pretrain_surrogates, Surrogates};
use crate::error::{Error, Result};
use crate::infer::{synthesize, SynthesisMode, SynthesisRequest};
use crate::metrics::{eval_corpus, generative_strength};
use crate::nn::ParamStore;
use crate::rng::{rng_from, subseed};
use crate::train::{
    finetune, load_model, save_checkpoint, train, Checkpoint, CropMode, RngState, SamplingSource,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "lipvox",
    version,
    about = "Lip-to-speech synthesis on a deterministic synthetic corpus"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplingSourceArg {
    Content,
    Lip,
    Alternate,
}

impl From<SamplingSourceArg> for SamplingSource {
    fn from(v: SamplingSourceArg) -> Self {
        match v {
            SamplingSourceArg::Content => SamplingSource::Content,
            SamplingSourceArg::Lip => SamplingSource::Lip,
            SamplingSourceArg::Alternate => SamplingSource::Alternate,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CropModeArg {
    FullFace,
    LowerHalf,
}

impl From<CropModeArg> for CropMode {
    fn from(v: CropModeArg) -> Self {
        match v {
            CropModeArg::FullFace => CropMode::FullFace,
            CropModeArg::LowerHalf => CropMode::LowerHalf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mean,
    Sample,
}

/// Flag overrides shared by `train` and `finetune`.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// Maximum number of epochs
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Critic updates per generator update
    #[arg(long)]
    critic_iters: Option<usize>,
    /// Latent source the decoder trains on
    #[arg(long, value_enum)]
    sampling_source: Option<SamplingSourceArg>,
    /// Variational sampling on/off (off = plain autoencoder ablation)
    #[arg(long)]
    variational: Option<bool>,
    /// Visual input ablation
    #[arg(long, value_enum)]
    crop_mode: Option<CropModeArg>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.critic_iters {
            cfg.critic_iters_per_gen = v;
        }
        if let Some(v) = self.sampling_source {
            cfg.sampling_source = v.into();
        }
        if let Some(v) = self.variational {
            cfg.variational = v;
        }
        if let Some(v) = self.crop_mode {
            cfg.crop_mode = v.into();
        }
        if let Some(v) = self.patience {
            cfg.patience_epochs = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual corpus
    GenData {
        #[arg(long)]
        speakers: Option<usize>,
        /// Utterances per speaker
        #[arg(long)]
        utts: Option<usize>,
        /// Utterance length in whole seconds
        #[arg(long)]
        seconds: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the content encoder and speaker embedder
    PretrainSurrogates {
        /// Corpus directory (containing manifest.json)
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full system
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint with pretrained surrogates
        #[arg(long)]
        surrogates: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Fine-tune a trained checkpoint on (typically) one speaker
    Finetune {
        /// Base checkpoint to start from
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Synthesize speech for a directory of silent face frames
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of 96x96 PNG frames
        #[arg(long)]
        frames: PathBuf,
        /// Voice reference WAV (at least one second)
        #[arg(long)]
        voice: PathBuf,
        /// Output WAV path (a .mel.json lands next to it)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out corpus
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output report JSON
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generative strength: percentage of unique sampled outputs
    Gstrength {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        voice: PathBuf,
        /// Number of stochastic syntheses
        #[arg(long)]
        n: Option<usize>,
        /// Uniqueness threshold on flattened normalized mels
        #[arg(long)]
        delta: Option<f64>,
        /// Output report JSON
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.to_toml());
    println!("# ---");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { speakers, utts, seconds, seed, config, out } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            cfg.seed = Some(seed);
            let mut c = cfg.corpus_resolved();
            if let Some(v) = speakers {
                c.speakers = v;
            }
            if let Some(v) = utts {
                c.utts_per_speaker = v;
            }
            if let Some(v) = seconds {
                c.seconds = v;
            }
            cfg.corpus = c.clone();
            echo_config(&cfg);
            let manifest = generate_corpus(c.speakers, c.utts_per_speaker, c.seconds, seed, &out)?;
            println!("manifest: {}", out.join("manifest.json").display());
            println!("utterances: {}", manifest.utterances.len());
            Ok(())
        }
        Command::PretrainSurrogates { corpus, config, seed, out } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            cfg.seed = Some(seed);
            echo_config(&cfg);
            let manifest = load_manifest(&corpus.join("manifest.json"))?;
            let mut store = ParamStore::new();
            let surrogates = Surrogates::new(
                &mut store,
                manifest.speakers.len(),
                &mut rng_from(subseed(seed, 0x5042, 0)),
            );
            let report =
                pretrain_surrogates(&manifest, &cfg.surrogates.to_pretrain(seed), &mut store, &surrogates)?;
            let ckpt = Checkpoint::from_store(
                &store,
                [],
                cfg.train.clone(),
                manifest.speakers.len(),
                0,
                RngState { seed, word_pos: 0 },
                Vec::new(),
            );
            save_checkpoint(&ckpt, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("surrogates: {}", out.display());
            Ok(())
        }
        Command::Train { corpus, surrogates, config, seed, out, overrides } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            cfg.seed = Some(seed);
            cfg.train.seed = seed;
            overrides.apply(&mut cfg.train);
            echo_config(&cfg);
            let manifest = load_manifest(&corpus.join("manifest.json"))?;
            let surr = crate::train::load_checkpoint(&surrogates)?;
            let outcome = train(&manifest, &cfg.train, &surr, &out)?;
            println!("epochs: {}", outcome.epochs_run);
            println!("best epoch: {}", outcome.best_epoch);
            println!("checkpoint: {}", outcome.best_path().display());
            println!("metrics: {}", out.join("metrics.jsonl").display());
            Ok(())
        }
        Command::Finetune { base, corpus, config, seed, out, overrides } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            cfg.seed = Some(seed);
            cfg.train.seed = seed;
            overrides.apply(&mut cfg.train);
            echo_config(&cfg);
            let manifest = load_manifest(&corpus.join("manifest.json"))?;
            let base_ckpt = crate::train::load_checkpoint(&base)?;
            let outcome = finetune(&base_ckpt, &manifest, &cfg.train, &out)?;
            println!("epochs: {}", outcome.epochs_run);
            println!("checkpoint: {}", outcome.best_path().display());
            Ok(())
        }
        Command::Synth { ckpt, frames, voice, out, mode, seed, config } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            let lm = load_model(&ckpt)?;
            let req = SynthesisRequest {
                frames: load_frames_dir(&frames)?,
                voice_reference: crate::audio::load_wav(&voice)?,
                mode: match mode {
                    ModeArg::Mean => SynthesisMode::Mean,
                    ModeArg::Sample => SynthesisMode::Sample,
                },
                seed,
            };
            let (mel, wave) = synthesize(&lm, &req)?;
            crate::audio::save_wav(&out, &wave)?;
            let mel_path = out.with_extension("mel.json");
            let mel_json = serde_json::json!({
                "steps": mel.num_steps(),
                "bands": 80,
                "values": mel.frames().iter().copied().collect::<Vec<f64>>(),
            });
            std::fs::write(&mel_path, serde_json::to_string(&mel_json)?)?;
            println!("wav: {}", out.display());
            println!("mel: {}", mel_path.display());
            Ok(())
        }
        Command::Eval { ckpt, corpus, out, seed, config } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            let lm = load_model(&ckpt)?;
            let manifest = load_manifest(&corpus.join("manifest.json"))?;
            let report = eval_corpus(&lm, &manifest, seed, &ckpt.display().to_string())?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("report: {}", out.display());
            Ok(())
        }
        Command::Gstrength { ckpt, frames, voice, n, delta, out, seed, config } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let seed = cfg.resolve_seed(seed);
            cfg.seed = Some(seed);
            if let Some(v) = n {
                cfg.gstrength.n = v;
            }
            if let Some(v) = delta {
                cfg.gstrength.delta = v;
            }
            echo_config(&cfg);
            let lm = load_model(&ckpt)?;
            let frames = load_frames_dir(&frames)?;
            let voice = crate::audio::load_wav(&voice)?;
            let percent =
                generative_strength(&lm, &frames, &voice, cfg.gstrength.n, cfg.gstrength.delta)?;
            let report = serde_json::json!({
                "generative_strength_percent": percent,
                "n": cfg.gstrength.n,
                "delta": cfg.gstrength.delta,
                "seed": seed,
                "checkpoint": ckpt.display().to_string(),
            });
            std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

/// Entry point used by the `lipvox` binary. Exit codes: 0 success, 2 usage
/// (via clap), 1 runtime error.
pub fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) | Error::MissingFile(_) => 1,
            _ => 1,
        };
        std::process::exit(code);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_has_help() {
        let cmd = Cli::command();
        let subs: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        for expected in [
            "gen-data",
            "pretrain-surrogates",
            "train",
            "finetune",
            "synth",
            "eval",
            "gstrength",
        ] {
            assert!(subs.iter().any(|s| s == expected), "missing subcommand {expected}");
        }
    }
}
