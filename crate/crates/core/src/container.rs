//! Model file format.
//!
//! ```text
//! magic      8 bytes   "NODEGAM\0"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON      config, pipeline, provenance, step, tensor/mask index
//! tensors    f64 LE    row-major, in header order
//! masks      u8        one byte per feature-mask entry (0 or 1), per layer
//! checksum   32 bytes  SHA-256 of everything above
//! ```
//!
//! Floats are stored as raw bits, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, NodeGamModel};
use crate::numeric::Matrix;
use crate::preprocess::Pipeline;

pub const MAGIC: &[u8; 8] = b"NODEGAM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: NodeGamModel,
    pub pipeline: Option<Pipeline>,
    /// Free-form run metadata (seed, command, parent model hash, ...).
    pub provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    pipeline: Option<Pipeline>,
    provenance: BTreeMap<String, String>,
    step: u64,
    tensors: Vec<TensorEntry>,
    masks: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn named_tensors(model: &NodeGamModel) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        out.push((format!("layer{l}.feature_logits"), &layer.feature_logits));
        if let Some(f2) = &layer.feature_logits2 {
            out.push((format!("layer{l}.feature_logits2"), f2));
        }
        out.push((format!("layer{l}.thresholds"), &layer.thresholds));
        out.push((format!("layer{l}.log_slopes"), &layer.log_slopes));
        out.push((format!("layer{l}.responses"), &layer.responses));
    }
    for (l, a) in model.attention.iter().enumerate() {
        if let Some(a) = a {
            out.push((format!("attention{l}.b"), &a.b));
            out.push((format!("attention{l}.c"), &a.c));
        }
    }
    out.push(("last_linear".into(), &model.last_linear));
    out.push(("bias".into(), &model.bias));
    out
}

fn tensor_mut<'a>(model: &'a mut NodeGamModel, name: &str) -> Option<&'a mut Matrix> {
    if name == "last_linear" {
        return Some(&mut model.last_linear);
    }
    if name == "bias" {
        return Some(&mut model.bias);
    }
    let (scope, field) = name.split_once('.')?;
    if let Some(l) = scope.strip_prefix("layer") {
        let layer = model.layers.get_mut(l.parse::<usize>().ok()?)?;
        return match field {
            "feature_logits" => Some(&mut layer.feature_logits),
            "feature_logits2" => layer.feature_logits2.as_mut(),
            "thresholds" => Some(&mut layer.thresholds),
            "log_slopes" => Some(&mut layer.log_slopes),
            "responses" => Some(&mut layer.responses),
            _ => None,
        };
    }
    let l: usize = scope.strip_prefix("attention")?.parse().ok()?;
    let a = model.attention.get_mut(l)?.as_mut()?;
    match field {
        "b" => Some(&mut a.b),
        "c" => Some(&mut a.c),
        _ => None,
    }
}

impl ModelFile {
    pub fn new(model: NodeGamModel, pipeline: Option<Pipeline>) -> ModelFile {
        ModelFile {
            model,
            pipeline,
            provenance: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = named_tensors(&self.model);
        let mut provenance = self.provenance.clone();
        // Kept as raw bits so the round trip does not depend on decimal formatting.
        provenance.insert(
            "output_bias_bits".into(),
            self.model.output_bias.to_bits().to_string(),
        );
        let header = Header {
            config: self.model.config.clone(),
            pipeline: self.pipeline.clone(),
            provenance,
            step: self.model.step,
            tensors: tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
            masks: self
                .model
                .layers
                .iter()
                .map(|l| [l.feature_mask.nrows(), l.feature_mask.ncols()])
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for layer in &self.model.layers {
            out.extend(layer.feature_mask.iter().map(|b| *b as u8));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
        let fail = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("not a model file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch (file is corrupt or truncated)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let mut pos = 20usize;
        let header_bytes = body
            .get(pos..pos + header_len)
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        pos += header_len;

        let mut rng = NodeGamModel::rng(0);
        let mut model = NodeGamModel::new(header.config, &mut rng)?;
        model.step = header.step;
        let mut provenance = header.provenance;
        let bits = provenance
            .remove("output_bias_bits")
            .and_then(|b| b.parse::<u64>().ok())
            .ok_or_else(|| fail("missing output bias"))?;
        model.output_bias = f64::from_bits(bits);

        let expected = named_tensors(&model).len();
        if header.tensors.len() != expected {
            return Err(fail("tensor count does not match the config"));
        }
        for entry in &header.tensors {
            let count = entry.rows * entry.cols;
            let raw = body
                .get(pos..pos + 8 * count)
                .ok_or_else(|| fail("truncated tensor data"))?;
            pos += 8 * count;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let target = tensor_mut(&mut model, &entry.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{}`", entry.name)))?;
            if target.dim() != (entry.rows, entry.cols) {
                return Err(Error::Format(format!(
                    "tensor `{}` has the wrong shape",
                    entry.name
                )));
            }
            *target = Array2::from_shape_vec((entry.rows, entry.cols), values).unwrap();
        }
        if header.masks.len() != model.layers.len() {
            return Err(fail("mask count does not match the config"));
        }
        for (layer, [rows, cols]) in model.layers.iter_mut().zip(&header.masks) {
            if layer.feature_mask.dim() != (*rows, *cols) {
                return Err(fail("feature mask has the wrong shape"));
            }
            let raw = body
                .get(pos..pos + rows * cols)
                .ok_or_else(|| fail("truncated mask data"))?;
            pos += rows * cols;
            layer.feature_mask =
                Array2::from_shape_vec((*rows, *cols), raw.iter().map(|b| *b != 0).collect())
                    .unwrap();
        }
        if pos != body.len() {
            return Err(fail("trailing bytes after mask data"));
        }
        model.validate()?;
        Ok(ModelFile {
            model,
            pipeline: header.pipeline,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
