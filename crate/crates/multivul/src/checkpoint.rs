//! `<prefix>.manifest.json` plus `<prefix>.params.bin`: parameter tensors
//! as concatenated little-endian f64 in registration order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use multivul_core::corpus::{Modality, Vocabulary};
use multivul_core::diff::Tensor;
use multivul_core::model::{DualEncoderModel, EncoderConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub step: u64,
    pub seed: u64,
    pub code_vocab: Vec<String>,
    pub text_vocab: Vec<String>,
    pub parameters: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DualEncoderModel,
    pub code_vocab: Vocabulary,
    pub text_vocab: Vocabulary,
    pub step: u64,
    pub seed: u64,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.json")
}

pub fn params_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".params.bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save_checkpoint(ckpt: &Checkpoint, prefix: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut parameters = BTreeMap::new();
    for p in ckpt.model.params().iter() {
        let offset = payload.len();
        for v in p.tensor.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        parameters.insert(
            p.name.clone(),
            ParamEntry {
                shape: p.tensor.shape().to_vec(),
                offset,
                length: payload.len() - offset,
            },
        );
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        encoder: ckpt.model.config().clone(),
        step: ckpt.step,
        seed: ckpt.seed,
        code_vocab: ckpt.code_vocab.tokens().to_vec(),
        text_vocab: ckpt.text_vocab.tokens().to_vec(),
        parameters,
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mpath = manifest_path(prefix);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let ppath = params_path(prefix);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

pub fn load_checkpoint(prefix: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(prefix);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    // check the version before the rest of the schema so a newer format
    // reports as an incompatibility rather than a parse error
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "version: incompatible checkpoint version {v}, expected {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("version: missing".into())),
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    let ppath = params_path(prefix);
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;

    let mut model = DualEncoderModel::init(&manifest.encoder, manifest.seed)?;
    for (name, entry) in &manifest.parameters {
        let Some(existing) = model.params().iter().find(|p| &p.name == name) else {
            return Err(Error::Checkpoint(format!("{name}: unknown parameter")));
        };
        if existing.tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match the model's {:?}",
                entry.shape,
                existing.tensor.shape()
            )));
        }
        let expected = existing.tensor.len() * 8;
        let end = entry.offset.checked_add(entry.length);
        if entry.length != expected || end.is_none_or(|e| e > payload.len()) {
            return Err(Error::Checkpoint(format!(
                "{name}: truncated payload (need {expected} bytes at offset {}, file has {})",
                entry.offset,
                payload.len()
            )));
        }
        let values = payload[entry.offset..entry.offset + entry.length]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        model.set_param(name, Tensor::new(entry.shape.clone(), values)?)?;
    }
    if let Some(missing) = model
        .params()
        .iter()
        .find(|p| !manifest.parameters.contains_key(&p.name))
    {
        return Err(Error::Checkpoint(format!(
            "{}: missing from manifest",
            missing.name
        )));
    }
    Ok(Checkpoint {
        model,
        code_vocab: Vocabulary::from_tokens(Modality::Code, manifest.code_vocab)?,
        text_vocab: Vocabulary::from_tokens(Modality::Text, manifest.text_vocab)?,
        step: manifest.step,
        seed: manifest.seed,
    })
}
