//! Model checkpoint format: `DFKDMDL1`, layer count (u32 LE), then per layer
//! out-dim u32, in-dim u32, nonlinearity tag u8, row-major f32 LE weights and
//! f32 LE biases.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{DenseLayer, DenseNetwork, Nonlinearity};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DFKDMDL1";

/// SHA-256 of a network's checkpoint bytes; identifies the model that a record
/// or spectral basis belongs to.
pub type ModelHash = [u8; 32];

pub fn to_bytes(net: &DenseNetwork<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.parameter_count() + 9 * net.layer_count());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(net.layer_count() as u32).unwrap();
    for layer in net.layers() {
        out.write_u32::<LittleEndian>(layer.out_dim() as u32).unwrap();
        out.write_u32::<LittleEndian>(layer.in_dim() as u32).unwrap();
        out.push(layer.nonlinearity.tag());
        for &w in layer.weight.iter() {
            out.write_f32::<LittleEndian>(w).unwrap();
        }
        for &b in layer.bias.iter() {
            out.write_f32::<LittleEndian>(b).unwrap();
        }
    }
    out
}

fn truncated(e: std::io::Error) -> Error {
    Error::format("checkpoint", format!("truncated: {e}"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenseNetwork<f32>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut layers = Vec::new();
    for k in 0..count {
        let out_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let in_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let tag = r.read_u8().map_err(truncated)?;
        let nonlinearity = Nonlinearity::from_tag(tag)
            .ok_or_else(|| Error::format("checkpoint", format!("layer {k}: unknown nonlinearity tag {tag}")))?;
        let remaining = bytes.len() as u64 - r.position();
        let needed = 4 * (out_dim as u64 * in_dim as u64 + out_dim as u64);
        if needed > remaining {
            return Err(Error::format("checkpoint", format!("layer {k}: truncated parameters")));
        }
        let mut weights = vec![0f32; out_dim * in_dim];
        r.read_f32_into::<LittleEndian>(&mut weights).map_err(truncated)?;
        let mut bias = vec![0f32; out_dim];
        r.read_f32_into::<LittleEndian>(&mut bias).map_err(truncated)?;
        layers.push(DenseLayer {
            weight: Array2::from_shape_vec((out_dim, in_dim), weights).expect("sized"),
            bias: Array1::from(bias),
            nonlinearity,
        });
    }
    if r.position() != bytes.len() as u64 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    DenseNetwork::new(layers).map_err(|e| Error::format("checkpoint", e.to_string()))
}

pub fn model_hash(net: &DenseNetwork<f32>) -> ModelHash {
    Sha256::digest(to_bytes(net)).into()
}

pub fn save(net: &DenseNetwork<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DenseNetwork<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
