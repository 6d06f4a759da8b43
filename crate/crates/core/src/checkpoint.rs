//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"BFNCKPT1"
//! version u32      currently 1
//! meta    u32 count, then per entry: u32 key_len, key bytes (UTF-8),
//!                                    u32 val_len, val bytes (UTF-8)
//! tensors u32 count, then per tensor: u32 name_len, name bytes,
//!                                     u32 rows, u32 cols,
//!                                     rows*cols f64 values (LE bits)
//! ```
//!
//! Meta entries are written in sorted key order so identical states produce
//! identical files.

use crate::network::{Denoiser, NetworkConfig};
use crate::params::ParamSet;
use crate::schedule::{ScheduleKind, ScheduleParams};
use crate::train::AdamW;
use crate::mat::Mat;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"BFNCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing meta key {0}")]
    MissingMeta(String),
    #[error("invalid meta value for {key}: {value}")]
    BadMeta { key: String, value: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("model rebuild failed: {0}")]
    Rebuild(String),
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta_str(key)?;
        raw.parse().map_err(|_| CheckpointError::BadMeta {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, m) in &ckpt.tensors {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let n_meta = cur.u32()? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = cur.string()?;
        let v = cur.string()?;
        meta.insert(k, v);
    }
    let n_tensors = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = cur.string()?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt("tensor size overflow".into()))?;
        let raw = cur.take(8 * count)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { meta, tensors })
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
    }
}

/// State stored for a generative model.
pub struct GenerativeState {
    pub net: Denoiser,
    pub schedule: ScheduleParams,
    pub vocab_sha256: String,
    pub epochs_done: usize,
    pub steps_done: u64,
    /// Grid width used in training; the sampling default.
    pub default_seq_len: usize,
    pub optimizer: Option<AdamW>,
}

pub fn encode_network_meta(meta: &mut BTreeMap<String, String>, cfg: &NetworkConfig) {
    meta.insert("net.n_layers".into(), cfg.n_layers.to_string());
    meta.insert("net.n_heads".into(), cfg.n_heads.to_string());
    meta.insert("net.hidden_dim".into(), cfg.hidden_dim.to_string());
    meta.insert("net.dropout".into(), format!("{:e}", cfg.dropout));
    meta.insert("net.k".into(), cfg.k_categories.to_string());
    meta.insert("net.label_dim".into(), cfg.label_dim.to_string());
    meta.insert("net.ffn_mult".into(), cfg.ffn_mult.to_string());
    meta.insert("net.embed_mlp_dim".into(), cfg.embed_mlp_dim.to_string());
}

pub fn decode_network_meta(ckpt: &Checkpoint) -> Result<NetworkConfig, CheckpointError> {
    Ok(NetworkConfig {
        n_layers: ckpt.meta_parse("net.n_layers")?,
        n_heads: ckpt.meta_parse("net.n_heads")?,
        hidden_dim: ckpt.meta_parse("net.hidden_dim")?,
        dropout: ckpt.meta_parse("net.dropout")?,
        k_categories: ckpt.meta_parse("net.k")?,
        label_dim: ckpt.meta_parse("net.label_dim")?,
        ffn_mult: ckpt.meta_parse("net.ffn_mult")?,
        embed_mlp_dim: ckpt.meta_parse("net.embed_mlp_dim")?,
    })
}

pub fn encode_schedule_meta(meta: &mut BTreeMap<String, String>, schedule: &ScheduleParams) {
    meta.insert("schedule.kind".into(), schedule.kind().as_str().to_string());
    meta.insert("schedule.beta1".into(), format!("{:.17e}", schedule.beta_one()));
    meta.insert("schedule.k".into(), schedule.k_categories().to_string());
}

pub fn decode_schedule_meta(ckpt: &Checkpoint) -> Result<ScheduleParams, CheckpointError> {
    let kind_raw = ckpt.meta_str("schedule.kind")?;
    let kind = ScheduleKind::parse(kind_raw).ok_or_else(|| CheckpointError::BadMeta {
        key: "schedule.kind".into(),
        value: kind_raw.to_string(),
    })?;
    let beta1: f64 = ckpt.meta_parse("schedule.beta1")?;
    let k: usize = ckpt.meta_parse("schedule.k")?;
    ScheduleParams::uncapped(kind, beta1, k)
        .map_err(|e| CheckpointError::Rebuild(e.to_string()))
}

/// Collect parameters under a name prefix.
pub fn push_params(tensors: &mut Vec<(String, Mat)>, prefix: &str, params: &ParamSet) {
    for (name, value) in params.iter() {
        tensors.push((format!("{prefix}.{name}"), value.clone()));
    }
}

/// Rebuild a ParamSet matching `template` from prefixed tensors.
pub fn pull_params(
    ckpt: &Checkpoint,
    prefix: &str,
    template: &ParamSet,
) -> Result<ParamSet, CheckpointError> {
    let mut out = ParamSet::new();
    for i in 0..template.len() {
        let name = template.name(i);
        let full = format!("{prefix}.{name}");
        let m = ckpt
            .tensor(&full)
            .ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
        if m.shape() != template.value(i).shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                m.shape(),
                template.value(i).shape()
            )));
        }
        out.add(name, m.clone());
    }
    Ok(out)
}

pub fn save_generative(path: &Path, state: &GenerativeState) -> Result<(), CheckpointError> {
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), "generative".into());
    encode_network_meta(&mut meta, state.net.config());
    encode_schedule_meta(&mut meta, &state.schedule);
    meta.insert("vocab.sha256".into(), state.vocab_sha256.clone());
    meta.insert("train.epochs_done".into(), state.epochs_done.to_string());
    meta.insert("train.steps_done".into(), state.steps_done.to_string());
    meta.insert("train.seq_len".into(), state.default_seq_len.to_string());
    meta.insert(
        "optim.present".into(),
        if state.optimizer.is_some() { "1" } else { "0" }.into(),
    );
    let mut tensors = Vec::new();
    push_params(&mut tensors, "net", state.net.params());
    if let Some(opt) = &state.optimizer {
        tensors.extend(opt.state_tensors(state.net.params()));
    }
    save(path, &Checkpoint { meta, tensors })
}

pub fn load_generative(path: &Path) -> Result<GenerativeState, CheckpointError> {
    let ckpt = load(path)?;
    if ckpt.meta_str("format")? != "generative" {
        return Err(CheckpointError::Rebuild("not a generative checkpoint".into()));
    }
    let cfg = decode_network_meta(&ckpt)?;
    let schedule = decode_schedule_meta(&ckpt)?;
    let template = Denoiser::new(cfg.clone(), &crate::rng::StreamKey::new(0))
        .map_err(|e| CheckpointError::Rebuild(e.to_string()))?;
    let params = pull_params(&ckpt, "net", template.params())?;
    let net = Denoiser::from_params(cfg, params)
        .map_err(|e| CheckpointError::Rebuild(e.to_string()))?;
    let optimizer = if ckpt.meta_str("optim.present")? == "1" {
        let mut opt = AdamW::new(net.params());
        opt.load_state(net.params(), &|name| ckpt.tensor(name).cloned())
            .map_err(CheckpointError::Rebuild)?;
        Some(opt)
    } else {
        None
    };
    Ok(GenerativeState {
        net,
        schedule,
        vocab_sha256: ckpt.meta_str("vocab.sha256")?.to_string(),
        epochs_done: ckpt.meta_parse("train.epochs_done")?,
        steps_done: ckpt.meta_parse("train.steps_done")?,
        default_seq_len: ckpt.meta_parse("train.seq_len")?,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::rng::StreamKey;
    use crate::schedule::beta_one_max;

    #[test]
    fn container_round_trip() {
        let dir = std::env::temp_dir().join(format!("bfn-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("container.bfn");
        let mut meta = BTreeMap::new();
        meta.insert("alpha".to_string(), "1".to_string());
        meta.insert("beta".to_string(), "two".to_string());
        let tensors = vec![
            ("a".to_string(), Mat::from_vec(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE])),
            ("b".to_string(), Mat::zeros(1, 3)),
        ];
        let ckpt = Checkpoint { meta, tensors };
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensor("a"), ckpt.tensor("a"));
        assert_eq!(back.tensor("b"), ckpt.tensor("b"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join(format!("bfn-ckpt-test2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bfn");
        std::fs::write(&path, b"NOTACKPT________").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generative_state_round_trip() {
        let dir = std::env::temp_dir().join(format!("bfn-ckpt-test3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gen.bfn");
        let mut cfg = NetworkConfig::desk(246);
        cfg.n_layers = 1;
        cfg.hidden_dim = 32;
        cfg.n_heads = 2;
        cfg.embed_mlp_dim = 16;
        let net = Denoiser::new(cfg, &StreamKey::new(3)).unwrap();
        let schedule =
            ScheduleParams::new(ScheduleKind::LogForm, beta_one_max(246), 246).unwrap();
        let opt = AdamW::new(net.params());
        let state = GenerativeState {
            net,
            schedule,
            vocab_sha256: crate::vocab::VOCAB_SHA256.to_string(),
            epochs_done: 5,
            steps_done: 40,
            default_seq_len: 12,
            optimizer: Some(opt),
        };
        save_generative(&path, &state).unwrap();
        let back = load_generative(&path).unwrap();
        assert_eq!(back.epochs_done, 5);
        assert_eq!(back.steps_done, 40);
        assert_eq!(back.default_seq_len, 12);
        assert_eq!(back.vocab_sha256, crate::vocab::VOCAB_SHA256);
        assert_eq!(back.schedule, state.schedule);
        assert!(back.optimizer.is_some());
        for i in 0..state.net.params().len() {
            assert_eq!(state.net.params().value(i), back.net.params().value(i));
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
