//! Checkpoint container shared by encoders, training states and MIL heads.
//!
//! Layout, little-endian: magic `TCCK` | version u16 | header_len u32 | JSON header |
//! f32 payload of every tensor in header order | SHA-256 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use tc_core::backbone::{init_weights, BackboneConfig, Encoder};
use tc_core::mil::{MilHeadConfig, MilModel};
use tc_core::rng::RngState;
use tc_core::trainer::{Cursor, MtlSnapshot, MtlState, TrainerConfig};
use tc_core::Tensor;

use crate::error::{Result, TcError};
use crate::io::{atomic_write, f32s_to_le, le_to_f32s, read_bytes};

pub const MAGIC: &[u8; 4] = b"TCCK";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

pub const KIND_ENCODER: &str = "encoder";
pub const KIND_MTL_STATE: &str = "mtl_state";
pub const KIND_MIL_HEAD: &str = "mil_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            f32s_to_le(t.data(), &mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| TcError::format(path, reason);
        if bytes.len() < 10 + DIGEST_LEN {
            return Err(bad(format!("truncated checkpoint ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; the file is truncated or corrupt".into()));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let header_end = 10usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns the file".into()))?;
        let header: Header = serde_json::from_slice(&body[10..header_end]).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + 4 * n;
            if end > body.len() {
                return Err(bad(format!("payload too short for tensor `{}`", entry.name)));
            }
            let t = Tensor::from_vec(&entry.shape, le_to_f32s(&body[pos..end]))?;
            tensors.push((entry.name, t));
            pos = end;
        }
        if pos != body.len() {
            return Err(bad(format!("{} trailing payload bytes", body.len() - pos)));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(TcError::format(path, format!("checkpoint holds a `{}`, expected `{kind}`", self.kind)));
        }
        Ok(())
    }

    fn meta_as<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| TcError::format(path, format!("bad checkpoint metadata: {e}")))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("metadata serializes")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    encoder_id: String,
    backbone: BackboneConfig,
}

pub fn encoder_checkpoint(encoder: &Encoder<f32>, encoder_id: &str) -> Checkpoint {
    Checkpoint {
        kind: KIND_ENCODER.into(),
        meta: to_value(&EncoderMeta { encoder_id: encoder_id.into(), backbone: encoder.backbone.config().clone() }),
        tensors: encoder.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
    }
}

/// A frozen encoder and its identifier, from either an encoder or a training-state checkpoint.
pub fn load_encoder(path: &Path) -> Result<(Encoder<f32>, String)> {
    let ck = Checkpoint::load(path)?;
    let (mut enc, id) = match ck.kind.as_str() {
        KIND_ENCODER => {
            let meta: EncoderMeta = ck.meta_as(path)?;
            let mut enc = init_weights::<f32>(&meta.backbone)?;
            enc.store.load_values(&ck.tensors)?;
            (enc, meta.encoder_id)
        }
        KIND_MTL_STATE => {
            let state = MtlState::restore(snapshot_from(&ck, path)?)?;
            (state.export_encoder(), "mtl".to_string())
        }
        other => return Err(TcError::format(path, format!("checkpoint holds a `{other}`, not an encoder"))),
    };
    enc.freeze();
    Ok((enc, id))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    config: TrainerConfig,
    micro_step: u64,
    optimizer_steps: u64,
    cursors: Vec<Cursor>,
    rng: RngState,
    running: Vec<Option<f64>>,
    adam_steps: Vec<u64>,
}

pub fn state_checkpoint(snap: &MtlSnapshot) -> Checkpoint {
    let meta = StateMeta {
        config: snap.config.clone(),
        micro_step: snap.micro_step,
        optimizer_steps: snap.optimizer_steps,
        cursors: snap.cursors.clone(),
        rng: snap.rng,
        running: snap.running.clone(),
        adam_steps: snap.adam_steps.clone(),
    };
    let mut tensors = Vec::with_capacity(3 * snap.params.len());
    tensors.extend(snap.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())));
    tensors.extend(snap.params.iter().zip(&snap.adam_m).map(|((n, _), t)| (format!("adam_m/{n}"), t.clone())));
    tensors.extend(snap.params.iter().zip(&snap.adam_v).map(|((n, _), t)| (format!("adam_v/{n}"), t.clone())));
    Checkpoint { kind: KIND_MTL_STATE.into(), meta: to_value(&meta), tensors }
}

fn snapshot_from(ck: &Checkpoint, path: &Path) -> Result<MtlSnapshot> {
    ck.expect_kind(KIND_MTL_STATE, path)?;
    let meta: StateMeta = ck.meta_as(path)?;
    let n = ck.tensors.len() / 3;
    if ck.tensors.len() != 3 * n {
        return Err(TcError::format(path, "training state must hold params, first and second moments"));
    }
    let strip = |i: usize, prefix: &str| -> Result<(String, Tensor<f32>)> {
        let (name, t) = &ck.tensors[i];
        let bare = name.strip_prefix(prefix).ok_or_else(|| TcError::format(path, format!("unexpected tensor `{name}`")))?;
        Ok((bare.to_string(), t.clone()))
    };
    let params: Vec<(String, Tensor<f32>)> = (0..n).map(|i| strip(i, "param/")).collect::<Result<_>>()?;
    let adam_m = (0..n).map(|i| strip(n + i, "adam_m/").map(|p| p.1)).collect::<Result<_>>()?;
    let adam_v = (0..n).map(|i| strip(2 * n + i, "adam_v/").map(|p| p.1)).collect::<Result<_>>()?;
    Ok(MtlSnapshot {
        config: meta.config,
        micro_step: meta.micro_step,
        optimizer_steps: meta.optimizer_steps,
        cursors: meta.cursors,
        rng: meta.rng,
        running: meta.running,
        params,
        adam_m,
        adam_v,
        adam_steps: meta.adam_steps,
    })
}

pub fn load_state(path: &Path) -> Result<MtlState> {
    let ck = Checkpoint::load(path)?;
    Ok(MtlState::restore(snapshot_from(&ck, path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadMeta {
    pub head: MilHeadConfig,
    pub encoder_id: String,
    pub encoder_checksum: String,
    pub best_epoch: usize,
}

pub fn head_checkpoint(model: &MilModel, meta: &HeadMeta) -> Checkpoint {
    Checkpoint {
        kind: KIND_MIL_HEAD.into(),
        meta: to_value(meta),
        tensors: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
    }
}

pub fn load_head(path: &Path) -> Result<(MilModel, HeadMeta)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_MIL_HEAD, path)?;
    let meta: HeadMeta = ck.meta_as(path)?;
    let mut model = MilModel::new(&meta.head)?;
    model.store.load_values(&ck.tensors)?;
    Ok((model, meta))
}
