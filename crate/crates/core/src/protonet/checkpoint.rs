//! Checkpoint directory: `model.json`, `tensors.bin`, `vocab.txt`.
//!
//! Tensors are stored as little-endian `f32`, concatenated in manifest
//! (sorted name) order. Offsets in the manifest are byte offsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{HeadParams, ModelParams, ModelVariant, ProtoModel};
use crate::corpus::Vocabulary;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::params::ParamSet;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    encoder: EncoderConfig,
    variant: ModelVariant,
    labels: Vec<String>,
    label_train_freq: Vec<usize>,
    #[serde(default)]
    label_val_roc_auc: Vec<Option<f64>>,
    vocab_hash: String,
    tensors: BTreeMap<String, TensorEntry>,
}

/// `(model.json, tensors.bin)` bytes for `model`.
pub fn serialize_model(model: &ProtoModel<f32>) -> Result<(Vec<u8>, Vec<u8>)> {
    let tensors: BTreeMap<String, ndarray::ArrayViewD<'_, f32>> =
        model.params.tensors().into_iter().collect();
    let mut manifest = BTreeMap::new();
    let mut bin = Vec::with_capacity(4 * model.params.num_parameters());
    for (name, t) in &tensors {
        manifest.insert(
            name.clone(),
            TensorEntry {
                offset: bin.len() as u64,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
            },
        );
        for v in t.iter() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        encoder: model.encoder_config.clone(),
        variant: model.variant,
        labels: model.labels.clone(),
        label_train_freq: model.label_train_freq.clone(),
        label_val_roc_auc: model.label_val_roc_auc.clone(),
        vocab_hash: model.vocab.content_hash(),
        tensors: manifest,
    };
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    Ok((json, bin))
}

impl ProtoModel<f32> {
    /// SHA-256 over the serialized `model.json` and `tensors.bin`.
    pub fn model_hash(&self) -> Result<String> {
        let (json, bin) = serialize_model(self)?;
        let mut h = Sha256::new();
        h.update(&json);
        h.update(&bin);
        Ok(hex::encode(h.finalize()))
    }
}

pub fn save_model(model: &ProtoModel<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (json, bin) = serialize_model(model)?;
    fs::write(dir.join("model.json"), json)?;
    fs::write(dir.join("tensors.bin"), bin)?;
    fs::write(dir.join("vocab.txt"), model.vocab.to_text())?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ProtoModel<f32>> {
    let dir = dir.as_ref();
    let json = fs::read(dir.join("model.json"))?;
    let value: Value = serde_json::from_slice(&json).map_err(|e| Error::load("model.json", e.to_string()))?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::load(
                "format_version",
                format!("found {v}, this build reads {FORMAT_VERSION}"),
            ))
        }
        None => return Err(Error::load("format_version", "missing")),
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::load("model.json", e.to_string()))?;

    let vocab_text = fs::read_to_string(dir.join("vocab.txt"))?;
    let vocab = Vocabulary::from_text(&vocab_text)
        .ok_or_else(|| Error::load("vocab.txt", "reserved tokens missing or misordered"))?;
    if vocab.content_hash() != file.vocab_hash {
        return Err(Error::load(
            "vocab_hash",
            format!("vocab.txt hashes to {}, checkpoint expects {}", vocab.content_hash(), file.vocab_hash),
        ));
    }
    if file.encoder.vocab_size != vocab.len() {
        return Err(Error::load(
            "encoder.vocab_size",
            format!("{} but vocab.txt has {} entries", file.encoder.vocab_size, vocab.len()),
        ));
    }
    file.encoder
        .validate()
        .map_err(|e| Error::load("encoder", e.to_string()))?;
    if file.label_train_freq.len() != file.labels.len() {
        return Err(Error::load(
            "label_train_freq",
            format!("{} entries for {} labels", file.label_train_freq.len(), file.labels.len()),
        ));
    }
    if !file.label_val_roc_auc.is_empty() && file.label_val_roc_auc.len() != file.labels.len() {
        return Err(Error::load(
            "label_val_roc_auc",
            format!("{} entries for {} labels", file.label_val_roc_auc.len(), file.labels.len()),
        ));
    }

    let bin = fs::read(dir.join("tensors.bin"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams {
        encoder: EncoderParams::<f32>::init(&file.encoder, &mut rng),
        head: HeadParams::init(file.variant, file.labels.len(), file.encoder.output_dim, &mut rng),
    };
    let mut expected_bytes = 0u64;
    let mut seen = 0usize;
    for (name, mut t) in params.tensors_mut() {
        let entry = file
            .tensors
            .get(&name)
            .ok_or_else(|| Error::load(name.clone(), "missing from manifest"))?;
        if entry.dtype != DTYPE {
            return Err(Error::load(name, format!("dtype {} is not {DTYPE}", entry.dtype)));
        }
        if entry.shape != t.shape() {
            return Err(Error::load(
                name.clone(),
                format!("manifest shape {:?}, model expects {:?}", entry.shape, t.shape()),
            ));
        }
        let len = 4 * t.len() as u64;
        let end = entry.offset + len;
        if end > bin.len() as u64 {
            return Err(Error::load(
                "tensors.bin",
                format!("{name} needs bytes {}..{end} but file has {}", entry.offset, bin.len()),
            ));
        }
        let bytes = &bin[entry.offset as usize..end as usize];
        for (v, b) in t.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        expected_bytes += len;
        seen += 1;
    }
    if seen != file.tensors.len() {
        let known: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let extra = file.tensors.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
        return Err(Error::load(extra, "unexpected tensor in manifest"));
    }
    if expected_bytes != bin.len() as u64 {
        return Err(Error::load(
            "tensors.bin",
            format!("size mismatch: manifest covers {expected_bytes} bytes, file has {}", bin.len()),
        ));
    }
    Ok(ProtoModel {
        encoder_config: file.encoder,
        variant: file.variant,
        labels: file.labels,
        vocab,
        label_train_freq: file.label_train_freq,
        label_val_roc_auc: file.label_val_roc_auc,
        params,
    })
}
