//! Binary weights file.
//!
//! Layout: `b"VIGW"`, `u32` LE version, `u64` LE header length, a JSON
//! header, then the payload of little-endian `f32` values for every tensor
//! in header order. Offsets in the header are relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ViGConfig, ViGParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VIGW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub config: ViGConfig,
    pub tensors: Vec<TensorEntry>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("weights file", detail)
}

/// Serializes parameters. Values are stored as `f32`; any value that does
/// not fit is rejected rather than saturated.
pub fn encode(config: &ViGConfig, p: &ViGParams) -> Result<Vec<u8>> {
    let named = p.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut payload = Vec::with_capacity(4 * p.num_params());
    for (name, t) in named {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: DTYPE_F32.into(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite { op: "weights::encode" });
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors,
    })
    .map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a file into its parsed header and raw payload, checking the
/// preamble and the payload bookkeeping but not the model layout.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE {
        return Err(bad(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if header_len > rest.len() as u64 {
        return Err(bad(format!("header length {header_len} exceeds file")));
    }
    let (head, payload) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(head).map_err(|e| bad(format!("header: {e}")))?;

    let mut expected_offset = 0u64;
    for (i, e) in header.tensors.iter().enumerate() {
        if e.dtype != DTYPE_F32 {
            return Err(bad(format!("tensor {:?}: dtype {:?}", e.name, e.dtype)));
        }
        if i > 0 && e.offset <= header.tensors[i - 1].offset {
            return Err(bad(format!("tensor {:?}: offsets not strictly increasing", e.name)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("tensor {:?}: offset {} (expected {expected_offset})", e.name, e.offset)));
        }
        let bytes = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &n| acc.checked_mul(n as u64))
            .filter(|&b| b > 0)
            .ok_or_else(|| bad(format!("tensor {:?}: bad shape {:?}", e.name, e.shape)))?;
        expected_offset = expected_offset
            .checked_add(bytes)
            .ok_or_else(|| bad("payload size overflows"))?;
    }
    if expected_offset != payload.len() as u64 {
        return Err(bad(format!(
            "payload is {} bytes, tensors need {expected_offset}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

/// Cheap consistency bound: every config dimension appears as a factor of
/// some stored tensor, so none can exceed the stored value count. Keeps a
/// hostile header from requesting an arbitrarily large model layout.
fn check_config_fits(config: &ViGConfig, values: usize) -> Result<()> {
    config.validate()?;
    let (gh, gw) = config.grid();
    let fits = |f: &[usize]| {
        f.iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .is_some_and(|n| n <= values)
    };
    let d = config.dim;
    let tokens = gh.checked_mul(gw).unwrap_or(usize::MAX);
    // Each block stores at least a d × d/2 query projection.
    if !(fits(&[tokens, d]) && fits(&[d, config.num_classes]) && fits(&[config.depth, d, d / 2])) {
        return Err(bad(format!("config {config:?} does not match a payload of {values} values")));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(ViGConfig, ViGParams)> {
    let (header, payload) = decode_header(bytes)?;
    check_config_fits(&header.config, payload.len() / 4)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let data: Vec<f64> = payload[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor {:?}: non-finite value", e.name)));
        }
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    let params = ViGParams::from_tensors(&header.config, tensors)?;
    for ((expected, _), e) in params.named_tensors().iter().zip(&header.tensors) {
        if *expected != e.name {
            return Err(bad(format!("tensor {:?} where {expected:?} belongs", e.name)));
        }
    }
    Ok((header.config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ViGConfig, p: &ViGParams) -> Result<()> {
    std::fs::write(path, encode(config, p)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ViGConfig, ViGParams)> {
    decode(&std::fs::read(path)?)
}
