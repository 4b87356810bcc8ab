use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{Matrix, MelSpectrogram};
use crate::error::{invalid, Result};

/// Coefficients kept for distortion measures (1..=13; the energy term is dropped).
pub const DEFAULT_CEPSTRAL_ORDER: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct MelCepstrum {
    /// `frames x order`, coefficient `i` of the DCT stored in column `i - 1`.
    pub values: Matrix,
    pub order: usize,
}

fn dct_matrix(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |k, i| {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    })
}

/// Orthonormal DCT-II.
pub fn dct_ii(x: &[f64]) -> Vec<f64> {
    let m = dct_matrix(x.len());
    (0..x.len()).map(|k| m.row(k).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Inverse of [`dct_ii`] (the orthonormal DCT-III).
pub fn idct_ii(c: &[f64]) -> Vec<f64> {
    let m = dct_matrix(c.len());
    (0..c.len()).map(|i| (0..c.len()).map(|k| m.at(k, i) * c[k]).sum()).collect()
}

/// Mel-cepstrum: orthonormal DCT-II of each log-Mel frame, keeping
/// coefficients `1..=order`.
pub fn mel_cepstrum(mel: &MelSpectrogram, order: usize) -> Result<MelCepstrum> {
    let n = mel.num_mels();
    if order == 0 || order >= n {
        return Err(invalid!("cepstral order {order} must be in 1..{n}"));
    }
    let m = dct_matrix(n);
    let values = Matrix::from_fn(mel.frames(), order, |f, j| m.row(j + 1).iter().zip(mel.values.row(f)).map(|(a, b)| a * b).sum());
    Ok(MelCepstrum { values, order })
}
