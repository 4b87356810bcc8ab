use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::stft::{padded_hann, stft_f64};
use super::{FftPlan, Matrix, SpectrogramConfig, Waveform};
use crate::error::{invalid, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney Mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

/// Triangular, area-normalized Mel filters over the FFT bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `num_mels x num_bins`.
    pub weights: Matrix,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Applies the filters to one magnitude frame.
    pub fn apply(&self, frame: &[f64]) -> Vec<f64> {
        (0..self.weights.rows()).map(|m| self.weights.row(m).iter().zip(frame).map(|(w, x)| w * x).sum()).collect()
    }
}

pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let bins = cfg.num_bins();
    let sr = cfg.sample_rate as f64;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let points: Vec<f64> = (0..cfg.num_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64)).collect();
    let fft_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sr / cfg.fft_size as f64).collect();
    let weights = Matrix::from_fn(cfg.num_mels, bins, |m, k| {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let rise = (fft_hz[k] - left) / (center - left);
        let fall = (right - fft_hz[k]) / (right - center);
        rise.min(fall).max(0.0) * 2.0 / (right - left)
    });
    for m in 0..cfg.num_mels {
        if weights.row(m).iter().all(|&w| w == 0.0) {
            return Err(invalid!("mel filter {m} covers no FFT bin; use fewer mels or a longer FFT"));
        }
    }
    Ok(MelFilterbank { weights, centers_hz: points[1..=cfg.num_mels].to_vec() })
}

/// Natural-log Mel spectrogram, `frames x num_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn new(values: Matrix, config: SpectrogramConfig) -> Result<Self> {
        if values.cols() != config.num_mels {
            return Err(invalid!("mel matrix has {} columns, config has {} mels", values.cols(), config.num_mels));
        }
        Ok(Self { values, config })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn num_mels(&self) -> usize {
        self.values.cols()
    }

    pub fn hop_length(&self) -> usize {
        self.config.hop_length
    }
}

/// `ln(max(filterbank . |STFT|, log_floor))` per frame.
pub fn mel_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(invalid!("empty waveform"));
    }
    let fb = mel_filterbank(cfg)?;
    let signal: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let spec = stft_f64(&signal, cfg, &FftPlan::new(cfg.fft_size)?, &padded_hann(cfg));
    let mag = spec.magnitude();
    let mut values = Matrix::zeros(spec.frames, cfg.num_mels);
    for f in 0..spec.frames {
        let energies = fb.apply(mag.row(f));
        for (dst, e) in values.row_mut(f).iter_mut().zip(energies) {
            *dst = e.max(cfg.log_floor).ln();
        }
    }
    MelSpectrogram::new(values, cfg.clone())
}
