//! Activation dump files: one JSON header line, then the raw
//! little-endian `f32` payload in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use dbat_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub layer_name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

pub fn write_activation(path: &Path, layer_name: &str, t: &Tensor) -> Result<()> {
    let header = DumpHeader {
        layer_name: layer_name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(4 * t.numel());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_activation(path: &Path) -> Result<(String, Tensor)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: DumpHeader =
        serde_json::from_slice(&line).map_err(|e| DbatError::Argument(format!("{}: bad dump header: {e}", path.display())))?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(DbatError::Argument(format!(
            "{}: unsupported dtype {} / order {}",
            path.display(),
            header.dtype,
            header.order
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let n: usize = header.shape.iter().product();
    if payload.len() != 4 * n {
        return Err(DbatError::Argument(format!(
            "{}: payload has {} bytes, shape needs {}",
            path.display(),
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header.layer_name, Tensor::new(header.shape, data)?))
}

/// File name used for a layer's dump.
pub fn dump_file_name(layer_name: &str) -> String {
    format!("{}.act", layer_name.replace(['/', '\\'], "_"))
}
