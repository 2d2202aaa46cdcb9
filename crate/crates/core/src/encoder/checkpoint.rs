//! Binary prefix checkpoints.
//!
//! Layout, all little-endian: magic `PDPT`, `u32` format version, `u32` L,
//! `u32` H, `u32` k, `f64` λ, `f64` ρ, `u64` step, then the `L × 2 × k × H`
//! prefix tensor in row-major order as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use super::{EncoderError, PromptParameters, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PDPT";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub prefix_length: usize,
    pub lambda: f64,
    pub rho: f64,
    pub step: u64,
}

pub fn write_checkpoint(path: &Path, prompt: &PromptParameters, lambda: f64, rho: f64, step: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for n in [prompt.num_layers(), prompt.hidden_size(), prompt.prefix_length()] {
        let n = u32::try_from(n).map_err(|_| EncoderError::Checkpoint(format!("dimension {n} too large")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    w.write_all(&lambda.to_le_bytes())?;
    w.write_all(&rho.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    for &x in prompt.per_layer_kv.iter() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| EncoderError::Checkpoint(format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, PromptParameters)> {
    let mut r = BufReader::new(File::open(path)?);
    if &take::<4>(&mut r)? != MAGIC {
        return Err(EncoderError::Checkpoint(format!(
            "{}: not a prefix checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let num_layers = u32::from_le_bytes(take(&mut r)?) as usize;
    let hidden_size = u32::from_le_bytes(take(&mut r)?) as usize;
    let prefix_length = u32::from_le_bytes(take(&mut r)?) as usize;
    let lambda = f64::from_le_bytes(take(&mut r)?);
    let rho = f64::from_le_bytes(take(&mut r)?);
    let step = u64::from_le_bytes(take(&mut r)?);
    let count = num_layers * 2 * prefix_length * hidden_size;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * 4 {
        return Err(EncoderError::Checkpoint(format!(
            "expected {} tensor bytes, found {}",
            count * 4,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let per_layer_kv = Array4::from_shape_vec((num_layers, 2, prefix_length, hidden_size), values)
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let header = CheckpointHeader {
        version,
        num_layers,
        hidden_size,
        prefix_length,
        lambda,
        rho,
        step,
    };
    Ok((header, PromptParameters { per_layer_kv }))
}
