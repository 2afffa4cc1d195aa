//! Single-file binary checkpoint format.
//!
//! Layout: one line of compact JSON (config, tensor manifest, data length,
//! CRC-32 of the data section), a `\n`, then raw little-endian `f32` tensor
//! data in manifest order. The checksum is verified on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DecoderWeights, ModelConfig};
use crate::tensor::{Scalar, Tensor2D};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of this tensor inside the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub data_len: u64,
    pub data_crc32: u32,
}

/// CRC-32 (IEEE 802.3 polynomial, reflected), as used by zip/zlib.
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Writes `weights` to `path`. Tensor data is stored as `f32` regardless of
/// the in-memory precision.
pub fn save<S: Scalar>(weights: &DecoderWeights<S>, path: &Path) -> Result<()> {
    let named = weights.tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut data: Vec<u8> = Vec::new();
    for (i, (field, tensor)) in named.iter().enumerate() {
        let name = canonical_name(i, field, &weights.config);
        tensors.push(TensorEntry {
            name,
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: data.len() as u64,
        });
        for &v in tensor.data() {
            data.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: weights.config,
        tensors,
        data_len: data.len() as u64,
        data_crc32: crc32(&data),
    };

    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

fn canonical_name(index: usize, field: &str, cfg: &ModelConfig) -> String {
    // indices 0,1 are embeddings; 16 tensors per layer; then the final norm
    if index < 2 || index >= 2 + 16 * cfg.num_decoder_layers {
        field.to_string()
    } else {
        let layer = (index - 2) / 16;
        format!("layer{layer}.{field}")
    }
}

/// Reads just the header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut reader = BufReader::new(File::open(path)?);
    let json = read_header_line(&mut reader)?;
    Ok(serde_json::from_slice(&json)?)
}

fn read_header_line(reader: &mut impl Read) -> Result<Vec<u8>> {
    let mut json = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format("checkpoint ended inside the header".into()));
        }
        if byte[0] == b'\n' {
            return Ok(json);
        }
        json.push(byte[0]);
    }
}

/// Loads a checkpoint, verifying the data-section checksum and the manifest
/// against the embedded config.
pub fn load<S: Scalar>(path: &Path) -> Result<DecoderWeights<S>> {
    let mut reader = BufReader::new(File::open(path)?);
    let json = read_header_line(&mut reader)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let mut data = Vec::with_capacity(header.data_len as usize);
    reader.read_to_end(&mut data)?;
    if data.len() as u64 != header.data_len {
        return Err(Error::Format(format!(
            "data section is {} bytes, header says {}",
            data.len(),
            header.data_len
        )));
    }
    let actual = crc32(&data);
    if actual != header.data_crc32 {
        return Err(Error::ChecksumMismatch {
            expected: header.data_crc32,
            actual,
        });
    }

    let expected_names = DecoderWeights::<S>::tensor_names(&header.config);
    if header.tensors.len() != expected_names.len() {
        return Err(Error::Format(format!(
            "manifest has {} tensors, config implies {}",
            header.tensors.len(),
            expected_names.len()
        )));
    }

    let mut weights: DecoderWeights<S> = crate::model::init_weights(&header.config, 0)?.zeros_like();
    {
        let mut targets = weights.tensors_mut();
        for (i, entry) in header.tensors.iter().enumerate() {
            if entry.name != expected_names[i] {
                return Err(Error::Format(format!(
                    "tensor {i} is named {:?}, expected {:?}",
                    entry.name, expected_names[i]
                )));
            }
            let tensor = &mut targets[i];
            if (entry.rows, entry.cols) != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {:?} has shape ({}, {}), expected {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    tensor.shape()
                )));
            }
            let count = entry.rows * entry.cols;
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > data.len() {
                return Err(Error::Format(format!(
                    "tensor {:?} overruns the data section",
                    entry.name
                )));
            }
            let mut values = Vec::with_capacity(count);
            for chunk in data[start..end].chunks_exact(4) {
                values.push(S::from_f64(
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
                ));
            }
            **tensor = Tensor2D::from_vec(entry.rows, entry.cols, values)?;
        }
    }
    Ok(weights)
}
