//! Model checkpoints: magic `CXCK`, a `u32` little-endian manifest length,
//! a JSON manifest of tensor names and shapes, then one EMB1 block per
//! tensor in manifest order. Scalars are stored as 1x1 tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::emb1::{decode_emb1_prefix, encode_emb1};
use super::FormatError;
use crate::dualbranch::{DualBranchModel, PARAMETER_NAMES};
use crate::error::Result;
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CXCK";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: Vec<TensorEntry>,
}

fn tensors(model: &DualBranchModel) -> [Matrix; 5] {
    [
        model.w_img.clone(),
        model.w_txt.clone(),
        Matrix::scalar(model.log_temperature),
        Matrix::scalar(model.asl_scale),
        Matrix::scalar(model.asl_bias),
    ]
}

pub fn encode_checkpoint(model: &DualBranchModel) -> Result<Vec<u8>> {
    model.validate()?;
    let ts = tensors(model);
    let manifest = Manifest {
        tensors: PARAMETER_NAMES
            .iter()
            .zip(&ts)
            .map(|(n, t)| TensorEntry { name: n.to_string(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ts {
        out.extend_from_slice(&encode_emb1(t)?);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualBranchModel> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { needed: 8, available: bytes.len() }.into());
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "CXCK".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(FormatError::Truncated {
        needed: 8 + len,
        available: bytes.len(),
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != PARAMETER_NAMES {
        return Err(FormatError::Manifest(format!("expected tensors {PARAMETER_NAMES:?}, found {names:?}")).into());
    }
    let mut offset = end;
    let mut blocks = Vec::with_capacity(5);
    for entry in &manifest.tensors {
        let (m, used) = decode_emb1_prefix(&bytes[offset..])?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(FormatError::Manifest(format!(
                "tensor {} has shape {:?}, manifest says {:?}",
                entry.name,
                m.shape(),
                (entry.rows, entry.cols)
            ))
            .into());
        }
        offset += used;
        blocks.push(m);
    }
    if offset != bytes.len() {
        return Err(FormatError::TrailingBytes { count: bytes.len() - offset }.into());
    }
    for (b, name) in blocks[2..].iter().zip(&PARAMETER_NAMES[2..]) {
        if b.shape() != (1, 1) {
            return Err(FormatError::Manifest(format!("{name} must be 1x1")).into());
        }
    }
    let mut it = blocks.into_iter();
    let w_img = it.next().expect("5 blocks");
    let w_txt = it.next().expect("5 blocks");
    let model = DualBranchModel {
        w_img,
        w_txt,
        log_temperature: it.next().expect("5 blocks").get(0, 0),
        asl_scale: it.next().expect("5 blocks").get(0, 0),
        asl_bias: it.next().expect("5 blocks").get(0, 0),
    };
    model.validate()?;
    Ok(model)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &DualBranchModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<DualBranchModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
