//! 8-bit mu-law companding with floor binning, a clamp at the top class and
//! decoding at bin centers.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::Waveform;
use crate::error::{invalid, Result};

pub const MU_LAW_CLASSES: usize = 256;
/// Class of a zero sample.
pub const MU_LAW_ZERO: usize = 128;
const MU: f64 = 255.0;

/// `sign(x) ln(1 + 255|x|) / ln 256`.
pub fn mu_law_compand(x: f64) -> f64 {
    x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln()
}

/// Inverse of [`mu_law_compand`].
pub fn mu_law_expand(f: f64) -> f64 {
    f.signum() * ((1.0 + MU).powf(f.abs()) - 1.0) / MU
}

pub fn mu_law_encode_sample(x: f64) -> Result<usize> {
    if !(x.abs() <= 1.0) {
        return Err(invalid!("sample {x} outside [-1, 1]; normalize before companding"));
    }
    let f = if x == 0.0 { 0.0 } else { mu_law_compand(x) };
    let class = ((f + 1.0) / 2.0 * MU_LAW_CLASSES as f64).floor() as usize;
    Ok(class.min(MU_LAW_CLASSES - 1))
}

pub fn mu_law_encode(w: &Waveform) -> Result<Vec<usize>> {
    w.samples().iter().map(|&s| mu_law_encode_sample(s as f64)).collect()
}

/// Sample value at the center of a class's companded bin.
pub fn mu_law_decode_class(class: usize) -> Result<f64> {
    if class >= MU_LAW_CLASSES {
        return Err(invalid!("mu-law class {class} outside [0, 255]"));
    }
    let center = (class as f64 + 0.5) / MU_LAW_CLASSES as f64 * 2.0 - 1.0;
    Ok(mu_law_expand(center))
}

pub fn mu_law_decode(classes: &[usize], sample_rate: u32) -> Result<Waveform> {
    let samples = classes.iter().map(|&c| mu_law_decode_class(c).map(|v| v as f32)).collect::<Result<_>>()?;
    Waveform::new(samples, sample_rate)
}
