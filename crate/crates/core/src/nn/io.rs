//! Binary model files.
//!
//! Layout: `b"MGNN"`, format version (u32 LE), header length (u64 LE), a JSON
//! header describing the input shape, layer specs and parameter shapes, then
//! every parameter value as a little-endian `f64` in layer order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::LayerSpec;
use super::model::NeuralModel;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_shapes: Vec<Vec<Vec<usize>>>,
}

pub fn to_bytes(model: &NeuralModel) -> Result<Vec<u8>> {
    let params = model.parameters();
    let header = Header {
        input_shape: model.input_shape().to_vec(),
        layers: model.specs(),
        param_shapes: params
            .iter()
            .map(|ps| ps.iter().map(|p| p.shape().to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter().flat_map(|ps| ps.iter()) {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<NeuralModel> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| Error::Format("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut bytes)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let header_len = read_u64(&mut bytes)? as usize;
    if header_len > bytes.len() {
        return Err(Error::Format("truncated header".into()));
    }
    let (json, mut rest) = bytes.split_at(header_len);
    let header: Header = serde_json::from_slice(json)?;
    let mut params = Vec::with_capacity(header.param_shapes.len());
    for shapes in &header.param_shapes {
        let mut layer = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut buf = [0u8; 8];
                rest.read_exact(&mut buf)
                    .map_err(|_| Error::Format("truncated parameters".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            layer.push(Tensor::new(shape.clone(), data)?);
        }
        params.push(layer);
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    NeuralModel::from_parts(header.input_shape, header.layers, params)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn save(model: &NeuralModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NeuralModel> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized model.
pub fn model_hash(model: &NeuralModel) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(model)?)))
}
