use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{FftPlan, Matrix, SpectrogramConfig, Waveform};
use crate::error::{invalid, Result};

/// Complex short-time spectrum, `frames x (fft_size / 2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn magnitude(&self) -> Matrix {
        let data = self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect();
        Matrix::new(self.frames, self.bins, data).expect("spectrum dims")
    }
}

/// Periodic Hann window of `win_length`, zero-padded and centered in
/// `fft_size`.
pub(crate) fn padded_hann(cfg: &SpectrogramConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.fft_size];
    let off = (cfg.fft_size - cfg.win_length) / 2;
    for i in 0..cfg.win_length {
        w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_length as f64).cos();
    }
    w
}

/// Centered STFT: the signal is zero-padded by `fft_size / 2` on both
/// sides, frame `i` is centered on sample `i * hop`, and there are
/// `len / hop + 1` frames.
pub fn stft(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrum> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(invalid!("empty waveform"));
    }
    let signal: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    Ok(stft_f64(&signal, cfg, &FftPlan::new(cfg.fft_size)?, &padded_hann(cfg)))
}

pub(crate) fn stft_f64(signal: &[f64], cfg: &SpectrogramConfig, plan: &FftPlan, window: &[f64]) -> Spectrum {
    let n = cfg.fft_size;
    let half = n / 2;
    let frames = cfg.num_frames(signal.len());
    let bins = cfg.num_bins();
    let mut out = Spectrum { frames, bins, re: vec![0.0; frames * bins], im: vec![0.0; frames * bins] };
    let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
    for f in 0..frames {
        let start = (f * cfg.hop_length) as isize - half as isize;
        for k in 0..n {
            let idx = start + k as isize;
            re[k] = if idx >= 0 && (idx as usize) < signal.len() { signal[idx as usize] * window[k] } else { 0.0 };
            im[k] = 0.0;
        }
        plan.forward(&mut re, &mut im);
        out.re[f * bins..(f + 1) * bins].copy_from_slice(&re[..bins]);
        out.im[f * bins..(f + 1) * bins].copy_from_slice(&im[..bins]);
    }
    out
}

/// Least-squares overlap-add inverse of [`stft`], returning `len` samples.
pub fn istft(spec: &Spectrum, cfg: &SpectrogramConfig, len: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins != cfg.num_bins() {
        return Err(invalid!("spectrum has {} bins, config expects {}", spec.bins, cfg.num_bins()));
    }
    Ok(istft_f64(spec, cfg, len, &FftPlan::new(cfg.fft_size)?, &padded_hann(cfg)))
}

pub(crate) fn istft_f64(spec: &Spectrum, cfg: &SpectrogramConfig, len: usize, plan: &FftPlan, window: &[f64]) -> Vec<f64> {
    let n = cfg.fft_size;
    let half = n / 2;
    let bins = spec.bins;
    let padded = (spec.frames.max(1) - 1) * cfg.hop_length + n;
    let mut acc = vec![0.0; padded.max(len + n)];
    let mut norm = vec![0.0; acc.len()];
    let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
    for f in 0..spec.frames {
        let (sr, si) = (&spec.re[f * bins..(f + 1) * bins], &spec.im[f * bins..(f + 1) * bins]);
        re[..bins].copy_from_slice(sr);
        im[..bins].copy_from_slice(si);
        for k in bins..n {
            re[k] = sr[n - k];
            im[k] = -si[n - k];
        }
        plan.inverse(&mut re, &mut im);
        let start = f * cfg.hop_length;
        for k in 0..n {
            acc[start + k] += re[k] * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    (0..len)
        .map(|t| {
            let i = t + half;
            if i < acc.len() && norm[i] > 1e-10 {
                acc[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect()
}
