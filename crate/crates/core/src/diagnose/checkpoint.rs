//! Binary checkpoint.
//!
//! ```text
//! magic "BRCK" | format_version u32 | block count u32
//! block*: name_len u32 | name | kind u8 | payload
//!   kind 0 (json):   len u64 | UTF-8 bytes
//!   kind 1 (tensor): rows u32 | cols u32 | rows × cols f64
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DiagnoseError, Model, ModelConfig, TrainConfig};
use crate::casemodel::PreprocessStats;
use crate::fusion::{PromptSequence, PromptSlot, SlotRole};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A trained model plus the training configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
}

impl Checkpoint {
    /// Hex SHA-256 content digest (the file's trailing digest).
    pub fn digest(&self) -> String {
        let bytes = checkpoint_to_bytes(self);
        hex::encode(&bytes[bytes.len() - 32..])
    }
}

enum Block<'a> {
    Json(String),
    Tensor(&'a Matrix),
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn role_names(p: &PromptSequence) -> Vec<&'static str> {
    p.slots.iter().map(|s| s.role.token()).collect()
}

fn role_from_token(t: &str) -> Option<SlotRole> {
    [
        SlotRole::Bos,
        SlotRole::System,
        SlotRole::Instruction,
        SlotRole::TargetCase,
        SlotRole::RagHere,
        SlotRole::Fusion,
        SlotRole::Assistant,
        SlotRole::Eos,
    ]
    .into_iter()
    .find(|r| r.token() == t)
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let prompt = Matrix::from_rows(&m.prompt.slots.iter().map(|s| s.vector.clone()).collect::<Vec<_>>());
    let mut blocks: Vec<(String, Block)> = vec![
        ("model_config".into(), Block::Json(json(&m.config))),
        ("train_config".into(), Block::Json(json(&ckpt.train))),
        ("stats".into(), Block::Json(json(&m.stats))),
        ("prompt_roles".into(), Block::Json(json(&role_names(&m.prompt)))),
    ];
    for (name, t) in m.tensors() {
        blocks.push((name, Block::Tensor(t)));
    }
    blocks.push(("prompt".into(), Block::Tensor(&prompt)));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, b) in &blocks {
        put_name(&mut out, name);
        match b {
            Block::Json(s) => {
                out.push(0);
                out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Block::Tensor(t) => {
                out.push(1);
                out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                for v in t.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> DiagnoseError {
    DiagnoseError::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiagnoseError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiagnoseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DiagnoseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, DiagnoseError> {
    if bytes.len() < 4 + 4 + 4 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(DiagnoseError::VersionMismatch { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let count = r.u32()?;
    let mut json = std::collections::BTreeMap::new();
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("block name"))?.to_string();
        match r.take(1)?[0] {
            0 => {
                let len = usize::try_from(r.u64()?).map_err(|_| corrupt("json length"))?;
                let s = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("json block"))?;
                json.insert(name, s.to_string());
            }
            1 => {
                let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
                let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| corrupt("tensor size"))?;
                let data = r
                    .take(n)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                tensors.insert(name, Matrix::from_vec(rows, cols, data));
            }
            k => return Err(corrupt(format!("unknown block kind {k}"))),
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let get_json = |name: &str| json.get(name).ok_or_else(|| corrupt(format!("missing block {name}")));
    let config: ModelConfig =
        serde_json::from_str(get_json("model_config")?).map_err(|e| corrupt(format!("model_config: {e}")))?;
    let train: TrainConfig =
        serde_json::from_str(get_json("train_config")?).map_err(|e| corrupt(format!("train_config: {e}")))?;
    let stats: Option<PreprocessStats> =
        serde_json::from_str(get_json("stats")?).map_err(|e| corrupt(format!("stats: {e}")))?;
    let roles: Vec<String> =
        serde_json::from_str(get_json("prompt_roles")?).map_err(|e| corrupt(format!("prompt_roles: {e}")))?;

    let mut model = Model::init(config, stats).map_err(|e| corrupt(format!("model config: {e}")))?;
    let mut used = 0;
    for (name, slot) in model.tensors_mut() {
        let t = tensors.get(&name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if (t.rows(), t.cols()) != (slot.rows(), slot.cols()) {
            return Err(corrupt(format!("tensor {name} has shape {}x{}", t.rows(), t.cols())));
        }
        *slot = t.clone();
        used += 1;
    }
    let prompt = tensors.get("prompt").ok_or_else(|| corrupt("missing tensor prompt"))?;
    if used + 1 != tensors.len() || prompt.rows() != roles.len() || prompt.cols() != model.config.d_k {
        return Err(corrupt("unexpected tensor set"));
    }
    let slots = roles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let role = role_from_token(t).ok_or_else(|| corrupt(format!("unknown prompt role {t}")))?;
            Ok(PromptSlot { role, vector: prompt.row(i).to_vec() })
        })
        .collect::<Result<Vec<_>, DiagnoseError>>()?;
    model.prompt = PromptSequence { slots };
    model.reranker.trainable = train.unfreeze_reranker && model.config.k > 0;
    Ok(Checkpoint { model, train })
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<(), DiagnoseError> {
    std::fs::write(path, checkpoint_to_bytes(ckpt))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, DiagnoseError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
