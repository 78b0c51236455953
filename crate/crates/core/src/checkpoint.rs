//! Two-file checkpoints: `manifest.json` describes the model and indexes
//! every parameter, `params.bin` holds the raw little-endian values in index
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::char_encoder::CharVocab;
use crate::crf::TagSet;
use crate::data::{SlotSpan, Utterance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_all, SpanScores};
use crate::model::{ModelConfig, SlotModel};
use crate::tensor::{DType, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub endianness: String,
    pub config: ModelConfig,
    pub tagset: TagSet,
    pub vocab: CharVocab,
    pub params: Vec<ParamEntry>,
    pub blob_bytes: usize,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `dir/manifest.json` and `dir/params.bin`, creating `dir`.
pub fn save<T: Real>(model: &SlotModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.param_count() * T::DTYPE.size_of());
    let mut params = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            dtype: T::DTYPE,
        });
        for &x in p.value.data() {
            x.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        endianness: "little".into(),
        config: ModelConfig {
            dtype: T::DTYPE,
            ..model.config.clone()
        },
        tagset: model.tagset.clone(),
        vocab: model.vocab.clone(),
        params,
        blob_bytes: blob.len(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            &path,
            format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    if manifest.endianness != "little" {
        return Err(ckpt_err(
            &path,
            format!("unsupported endianness `{}`", manifest.endianness),
        ));
    }
    Ok(manifest)
}

/// Loads a checkpoint saved with element type `T`.
pub fn load<T: Real>(dir: impl AsRef<Path>) -> Result<SlotModel<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    load_with(dir, manifest)
}

fn load_with<T: Real>(dir: &Path, manifest: Manifest) -> Result<SlotModel<T>> {
    let blob_path = dir.join(BLOB_FILE);
    if manifest.dtype != T::DTYPE {
        return Err(ckpt_err(
            &blob_path,
            format!("stored as {:?}, requested {:?}", manifest.dtype, T::DTYPE),
        ));
    }
    let blob = fs::read(&blob_path).map_err(|e| ckpt_err(&blob_path, e.to_string()))?;
    if blob.len() != manifest.blob_bytes {
        return Err(ckpt_err(
            &blob_path,
            format!(
                "{} bytes, manifest says {}",
                blob.len(),
                manifest.blob_bytes
            ),
        ));
    }
    let mut model = SlotModel::<T>::new(manifest.config, manifest.vocab, manifest.tagset)?;
    if model.store.len() != manifest.params.len() {
        return Err(ckpt_err(
            &blob_path,
            format!(
                "{} parameters stored, model has {}",
                manifest.params.len(),
                model.store.len()
            ),
        ));
    }
    let width = T::DTYPE.size_of();
    let mut values = Vec::with_capacity(manifest.params.len());
    for ((_, p), entry) in model.store.iter().zip(&manifest.params) {
        if p.name != entry.name
            || p.value.shape() != entry.shape.as_slice()
            || entry.dtype != T::DTYPE
        {
            return Err(ckpt_err(
                &blob_path,
                format!(
                    "entry `{}` {:?} does not match model parameter `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        let len: usize = entry.shape.iter().product();
        let bytes = blob
            .get(entry.offset..entry.offset + len * width)
            .ok_or_else(|| {
                ckpt_err(
                    &blob_path,
                    format!("entry `{}` runs past the blob", entry.name),
                )
            })?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    model.store.restore(&values)?;
    Ok(model)
}

/// A loaded model in whichever precision it was saved.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(SlotModel<f32>),
    F64(SlotModel<f64>),
}

impl AnyModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        Ok(match manifest.dtype {
            DType::F32 => Self::F32(load_with(dir, manifest)?),
            DType::F64 => Self::F64(load_with(dir, manifest)?),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        match self {
            Self::F32(m) => save(m, dir),
            Self::F64(m) => save(m, dir),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::F32(m) => &m.config,
            Self::F64(m) => &m.config,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::F32(m) => m.param_count(),
            Self::F64(m) => m.param_count(),
        }
    }

    pub fn predict(&self, utt: &Utterance) -> Result<Vec<SlotSpan>> {
        match self {
            Self::F32(m) => m.predict(utt),
            Self::F64(m) => m.predict(utt),
        }
    }

    pub fn predict_all(&self, utts: &[Utterance], parallel: bool) -> Result<Vec<Vec<SlotSpan>>> {
        match self {
            Self::F32(m) => predict_all(m, utts, parallel),
            Self::F64(m) => predict_all(m, utts, parallel),
        }
    }

    pub fn evaluate(&self, utts: &[Utterance], parallel: bool) -> Result<SpanScores> {
        match self {
            Self::F32(m) => evaluate(m, utts, parallel),
            Self::F64(m) => evaluate(m, utts, parallel),
        }
    }
}

impl From<SlotModel<f32>> for AnyModel {
    fn from(m: SlotModel<f32>) -> Self {
        Self::F32(m)
    }
}

impl From<SlotModel<f64>> for AnyModel {
    fn from(m: SlotModel<f64>) -> Self {
        Self::F64(m)
    }
}
