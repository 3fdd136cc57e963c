//! Single-file checkpoint container.
//!
//! Layout: magic `LVOXCKPT`, little-endian u64 header length, a JSON header
//! (format version, config snapshot, epoch, rng state, loss history, blob
//! index), then raw little-endian f64 blob data. Every blob carries a
//! SHA-256 checksum; loading verifies all of them before returning anything.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::nn::ParamStore;
use crate::tensor::Arr;
use ndarray::IxDyn;

pub const MAGIC: &[u8; 8] = b"LVOXCKPT";
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    config: TrainConfig,
    num_speakers: usize,
    epoch: usize,
    rng: RngState,
    loss_history: Vec<LossBreakdown>,
    blobs: Vec<BlobEntry>,
}

/// In-memory checkpoint: everything needed to rebuild the model assembly,
/// resume training, or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: String,
    pub config: TrainConfig,
    pub num_speakers: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub loss_history: Vec<LossBreakdown>,
    pub blobs: BTreeMap<String, Arr>,
}

impl Checkpoint {
    /// Collects all parameters of `store` (plus any extra named arrays such
    /// as optimizer state) into a checkpoint.
    pub fn from_store(
        store: &ParamStore,
        extra: impl IntoIterator<Item = (String, Arr)>,
        config: TrainConfig,
        num_speakers: usize,
        epoch: usize,
        rng: RngState,
        loss_history: Vec<LossBreakdown>,
    ) -> Self {
        let mut blobs = BTreeMap::new();
        for p in store.iter() {
            blobs.insert(p.name().to_string(), p.tensor().value().clone());
        }
        for (name, arr) in extra {
            blobs.insert(name, arr);
        }
        Self {
            format_version: FORMAT_VERSION.to_string(),
            config,
            num_speakers,
            epoch,
            rng,
            loss_history,
            blobs,
        }
    }

    /// Writes parameter values into an existing store; every parameter must
    /// have a matching blob.
    pub fn apply_to_store(&self, store: &ParamStore) -> Result<()> {
        for p in store.iter() {
            let blob = self
                .blobs
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing blob {}", p.name())))?;
            if blob.shape() != p.tensor().shape() {
                return Err(Error::Checkpoint(format!(
                    "blob {} shape {:?} vs parameter {:?}",
                    p.name(),
                    blob.shape(),
                    p.tensor().shape()
                )));
            }
            p.set(blob.clone());
        }
        Ok(())
    }

    /// Applies only blobs under `prefix` (e.g. the frozen surrogates).
    pub fn apply_prefix(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        for p in store.iter() {
            if !p.name().starts_with(prefix) {
                continue;
            }
            let blob = self
                .blobs
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing blob {}", p.name())))?;
            p.set(blob.clone());
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blobs.keys().any(|k| k.starts_with(prefix))
    }

    /// Blobs under `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Vec<(String, Arr)> {
        self.blobs
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))
            })
            .collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, arr) in &ckpt.blobs {
        let offset = data.len() as u64;
        let mut hasher = Sha256::new();
        for v in arr.iter() {
            let b = v.to_le_bytes();
            hasher.update(b);
            data.extend_from_slice(&b);
        }
        entries.push(BlobEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            len: (arr.len() * 8) as u64,
            sha256: hex_string(&hasher.finalize()),
        });
    }
    let header = Header {
        format_version: ckpt.format_version.clone(),
        config: ckpt.config.clone(),
        num_speakers: ckpt.num_speakers,
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        loss_history: ckpt.loss_history.clone(),
        blobs: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated file (magic)".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated file (header length)".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated file (header)".into()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let major = header.format_version.split('.').next().unwrap_or("");
    let expected_major = FORMAT_VERSION.split('.').next().unwrap_or("!");
    if major != expected_major {
        return Err(Error::Checkpoint(format!(
            "format version {} incompatible with {}",
            header.format_version, FORMAT_VERSION
        )));
    }

    let mut data = Vec::new();
    f.read_to_end(&mut data)?;

    let mut blobs = BTreeMap::new();
    for e in &header.blobs {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > data.len() {
            return Err(Error::Checkpoint(format!("truncated blob {}", e.name)));
        }
        let bytes = &data[start..end];
        let digest = hex_string(&Sha256::digest(bytes));
        if digest != e.sha256 {
            return Err(Error::Checkpoint(format!("corrupt blob {} (checksum)", e.name)));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let expected: usize = e.shape.iter().product();
        if vals.len() != expected {
            return Err(Error::Checkpoint(format!("blob {} length mismatch", e.name)));
        }
        let arr = Arr::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|e2| Error::Checkpoint(format!("blob {}: {e2}", e.name)))?;
        blobs.insert(e.name.clone(), arr);
    }

    Ok(Checkpoint {
        format_version: header.format_version,
        config: header.config,
        num_speakers: header.num_speakers,
        epoch: header.epoch,
        rng: header.rng,
        loss_history: header.loss_history,
        blobs,
    })
}

/// Loads a checkpoint and reconciles a requested config against the stored
/// snapshot: the file wins, with a warning, per documented precedence.
pub fn load_checkpoint_with_config(
    path: &Path,
    requested: Option<&TrainConfig>,
) -> Result<(Checkpoint, bool)> {
    let ckpt = load_checkpoint(path)?;
    let mut warned = false;
    if let Some(req) = requested {
        let a = serde_json::to_string(req)?;
        let b = serde_json::to_string(&ckpt.config)?;
        if a != b {
            log::warn!(
                "requested config differs from checkpoint snapshot; the checkpoint config wins"
            );
            warned = true;
        }
    }
    Ok((ckpt, warned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, uniform_arr};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = rng_from(5);
        let mut store = ParamStore::new();
        store.create("m.w", uniform_arr(&[3, 4], 0.0, 1.0, &mut rng));
        store.create("m.b", uniform_arr(&[4], -1.0, 1.0, &mut rng));
        Checkpoint::from_store(
            &store,
            [("opt.gen.m.w".to_string(), uniform_arr(&[3, 4], 0.0, 0.1, &mut rng))],
            TrainConfig::default(),
            3,
            7,
            RngState { seed: 42, word_pos: 1234 },
            vec![LossBreakdown::default()],
        )
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.num_speakers, 3);
        assert_eq!(loaded.rng.word_pos, 1234);
        for (k, v) in &ckpt.blobs {
            assert_eq!(loaded.blobs[k], *v, "blob {k}");
        }
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4usize, 12, bytes.len() / 2, bytes.len() - 5] {
            let path2 = dir.path().join(format!("cut{cut}.ckpt"));
            std::fs::write(&path2, &bytes[..cut]).unwrap();
            assert!(load_checkpoint(&path2).is_err(), "cut at {cut} must fail");
        }
    }

    #[test]
    fn corrupt_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff; // flip bits inside the last blob
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(format!("{err}").contains("corrupt"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.format_version = "2.0".into();
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn config_precedence_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut other = TrainConfig::default();
        other.learning_rate *= 2.0;
        let (ckpt, warned) = load_checkpoint_with_config(&path, Some(&other)).unwrap();
        assert!(warned);
        assert_eq!(ckpt.config.learning_rate, TrainConfig::default().learning_rate);
        let (_, warned2) =
            load_checkpoint_with_config(&path, Some(&TrainConfig::default())).unwrap();
        assert!(!warned2);
    }

    #[test]
    fn apply_to_store_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();

        let mut store = ParamStore::new();
        let mut rng = rng_from(99);
        store.create("m.w", uniform_arr(&[3, 4], 5.0, 6.0, &mut rng));
        store.create("m.b", uniform_arr(&[4], 5.0, 6.0, &mut rng));
        let loaded = load_checkpoint(&path).unwrap();
        loaded.apply_to_store(&store).unwrap();
        assert_eq!(store.get("m.w").unwrap().tensor().value(), &ckpt.blobs["m.w"]);
    }
}
