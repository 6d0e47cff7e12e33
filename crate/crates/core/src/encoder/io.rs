//! Weights files: `EDCP`, a little-endian u16 version, a u32-length-prefixed
//! JSON header, then every tensor as raw little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{LabCatalog, NamingMode};

use super::model::{EncoderConfig, EncoderParams};
use super::params::ParamSet;
use super::tensor::Tensor;
use super::vocab::Vocab;
use super::EncoderError;

pub const MAGIC: [u8; 4] = *b"EDCP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    /// `encoder` or `policy`.
    pub kind: String,
    pub dims: serde_json::Value,
    pub catalog_hash: String,
    pub naming_mode: NamingMode,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Serializes `params` under `header`; `header.tensors` is filled in here.
pub fn encode_weights(mut header: WeightsHeader, params: &ParamSet<f32>) -> Vec<u8> {
    header.tensors = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(WeightsHeader, ParamSet<f32>), EncoderError> {
    let bad = |m: &str| EncoderError::Format(m.to_string());
    if bytes.len() < 10 || bytes[..4] != MAGIC {
        return Err(bad("missing EDCP magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(EncoderError::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: WeightsHeader =
        serde_json::from_slice(body).map_err(|e| EncoderError::Format(format!("header: {e}")))?;
    let mut data = &bytes[10 + hlen..];
    let mut params = ParamSet::default();
    for e in &header.tensors {
        let n = e.rows * e.cols;
        if data.len() < 4 * n {
            return Err(EncoderError::Format(format!("tensor {} is truncated", e.name)));
        }
        let vals = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(e.name.clone(), Tensor::from_vec(e.rows, e.cols, vals));
        data = &data[4 * n..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((header, params))
}

pub fn write_weights(path: &Path, header: WeightsHeader, params: &ParamSet<f32>) -> Result<(), EncoderError> {
    fs::write(path, encode_weights(header, params))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(WeightsHeader, ParamSet<f32>), EncoderError> {
    decode_weights(&fs::read(path)?)
}

/// Fails with both hashes when `found` differs from what the file was built for.
/// Lowercase hex SHA-256 of a weights file's bytes.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn check_catalog_hash(expected: &str, catalog: &LabCatalog) -> Result<(), EncoderError> {
    let found = catalog.hash();
    if found != expected {
        return Err(EncoderError::CatalogMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

impl EncoderParams<f32> {
    fn header(&self) -> WeightsHeader {
        WeightsHeader {
            kind: "encoder".into(),
            dims: serde_json::to_value(self.config).expect("config serializes"),
            catalog_hash: self.vocab.catalog_hash.clone(),
            naming_mode: self.vocab.naming_mode,
            tensors: Vec::new(),
            vocab: Some(self.vocab.clone()),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_weights(self.header(), &self.weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], catalog: &LabCatalog) -> Result<Self, EncoderError> {
        let (header, weights) = decode_weights(bytes)?;
        if header.kind != "encoder" {
            return Err(EncoderError::Format(format!("expected encoder weights, found {}", header.kind)));
        }
        check_catalog_hash(&header.catalog_hash, catalog)?;
        let config: EncoderConfig = serde_json::from_value(header.dims)
            .map_err(|e| EncoderError::Format(format!("dims: {e}")))?;
        let vocab = header
            .vocab
            .ok_or_else(|| EncoderError::Format("encoder file without vocabulary".into()))?;
        vocab.check(catalog)?;
        let params = EncoderParams {
            config,
            vocab,
            weights,
        };
        params.check_shapes()?;
        if !params.weights.all_finite() {
            return Err(EncoderError::NonFinite("stored weights".into()));
        }
        log::info!(
            "loaded encoder: {} tensors, {} parameters",
            params.weights.len(),
            params.weights.num_scalars()
        );
        Ok(params)
    }

    pub fn load(path: &Path, catalog: &LabCatalog) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?, catalog)
    }
}
