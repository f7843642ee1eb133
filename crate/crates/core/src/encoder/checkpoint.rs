//! Binary checkpoint format.
//!
//! Layout: the magic line `TRECCKPT1\n`, a little-endian `u32` header length,
//! a JSON header with the dtype, encoder config and tensor manifest, then
//! every tensor's data as raw little-endian floats in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParameters};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8] = b"TRECCKPT1\n";
pub const FORMAT: &str = "transrec-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    config: EncoderConfig,
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Serializes in the element type of `params`.
pub fn to_bytes<T: Real>(params: &EncoderParameters<T>) -> Result<Vec<u8>> {
    to_bytes_tagged(params, None)
}

/// Like [`to_bytes`], recording the digest of the config that produced the
/// parameters.
pub fn to_bytes_tagged<T: Real>(params: &EncoderParameters<T>, config_digest: Option<&str>) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        config: params.config.clone(),
        tensors: params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| Entry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        config_digest: config_digest.map(str::to_string),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + params.num_parameters() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_tensor<S: Real, T: Real>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let data = bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).as_f64()))
        .collect();
    Tensor::new(shape, data)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic"))?;
    if rest.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    Ok((serde_json::from_slice(&rest[..hlen])?, &rest[hlen..]))
}

/// Config digest stored in the header, if any.
pub fn digest_of(bytes: &[u8]) -> Result<Option<String>> {
    Ok(split_header(bytes)?.0.config_digest)
}

/// Parses a checkpoint, converting to `T` if it was stored in another dtype.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<EncoderParameters<T>> {
    let (header, mut data) = split_header(bytes)?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    header.config.validate()?;
    let mut params = EncoderParameters::<T>::zeros(&header.config);
    let names = params.names();
    if names.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    for ((name, slot), entry) in names.iter().zip(params.tensors_mut()).zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} does not match expected {name:?} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.len() * width;
        if data.len() < n {
            return Err(Error::Checkpoint(format!("truncated data for {name}")));
        }
        *slot = if width == 4 {
            read_tensor::<f32, T>(&data[..n], &entry.shape)?
        } else {
            read_tensor::<f64, T>(&data[..n], &entry.shape)?
        };
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    Ok(params)
}

pub fn save<T: Real>(path: &Path, params: &EncoderParameters<T>) -> Result<()> {
    save_tagged(path, params, None)
}

pub fn save_tagged<T: Real>(path: &Path, params: &EncoderParameters<T>, config_digest: Option<&str>) -> Result<()> {
    let bytes = to_bytes_tagged(params, config_digest)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<EncoderParameters<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
