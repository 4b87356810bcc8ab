//! Binary feature records: a 4-byte magic, frame count and dimension as
//! little-endian `u32`, then row-major little-endian `f32` values.

use std::fs;
use std::path::Path;

use mtevc_core::conversion::PpgMatrix;
use mtevc_core::dsp::{Matrix, MelSpectrogram, SpectrogramConfig};

use crate::error::{Error, Result};

pub const MEL_MAGIC: &[u8; 4] = b"MELF";
pub const PPG_MAGIC: &[u8; 4] = b"PPGF";

pub fn encode(magic: &[u8; 4], m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.data().len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(format!("missing {} header", String::from_utf8_lossy(magic)));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(format!("{rows} x {cols} values declared but {} bytes follow", body.len()));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Matrix::new(rows, cols, data).map_err(|e| e.to_string())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read(path: &Path, magic: &[u8; 4]) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(magic, &bytes).map_err(|m| Error::format(path, m))
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    write(path, &encode(MEL_MAGIC, &mel.values))
}

/// Reads Mel frames analyzed with `config`.
pub fn read_mel(path: &Path, config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let m = read(path, MEL_MAGIC)?;
    if m.cols() != config.num_mels {
        return Err(Error::format(path, format!("{} Mel bands, expected {}", m.cols(), config.num_mels)));
    }
    Ok(MelSpectrogram::new(m, config.clone())?)
}

pub fn write_ppg(path: &Path, ppg: &PpgMatrix) -> Result<()> {
    write(path, &encode(PPG_MAGIC, ppg.values()))
}

pub fn read_ppg(path: &Path) -> Result<PpgMatrix> {
    let m = read(path, PPG_MAGIC)?;
    PpgMatrix::new(m).map_err(|e| Error::format(path, e.to_string()))
}
