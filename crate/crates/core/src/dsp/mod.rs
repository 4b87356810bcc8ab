//! Deterministic signal processing: analysis (STFT, Mel, cepstra, F0),
//! synthesis (Griffin-Lim), companding (mu-law) and alignment (DTW).
//!
//! Every function here is pure; nothing holds shared mutable state.

mod cepstrum;
mod dtw;
mod f0;
mod fft;
mod griffin_lim;
mod linalg;
mod matrix;
mod mel;
mod mulaw;
mod stft;
mod waveform;

pub use cepstrum::{dct_ii, idct_ii, mel_cepstrum, MelCepstrum, DEFAULT_CEPSTRAL_ORDER};
pub use dtw::{dtw_align, dtw_from_costs, squared_euclidean, DtwPath};
pub use f0::{estimate_f0, F0Contour, F0_FRAME_SECONDS, F0_MAX_HZ, F0_MIN_HZ};
pub use fft::FftPlan;
pub use griffin_lim::{griffin_lim, griffin_lim_linear, mel_to_linear, spectral_convergence, GriffinLimTrace, DEFAULT_GRIFFIN_LIM_ITERS};
pub use matrix::Matrix;
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelFilterbank, MelSpectrogram};
pub use mulaw::{mu_law_compand, mu_law_decode, mu_law_encode, mu_law_encode_sample, mu_law_expand, MU_LAW_CLASSES, MU_LAW_ZERO};
pub use stft::{istft, stft, Spectrum};
pub use waveform::Waveform;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Short-time analysis settings shared by every Mel feature in the toolkit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub num_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::SAMPLE_RATE,
            fft_size: 1024,
            win_length: 1024,
            hop_length: 256,
            num_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < 4 {
            return Err(invalid!("fft size {} is not a power of two >= 4", self.fft_size));
        }
        if self.win_length == 0 || self.win_length > self.fft_size {
            return Err(invalid!("window {} must be in 1..={}", self.win_length, self.fft_size));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(invalid!("hop {} must be in 1..={}", self.hop_length, self.win_length));
        }
        if self.num_mels == 0 {
            return Err(invalid!("num_mels must be at least 1"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(invalid!("need 0 <= fmin ({}) < fmax ({}) <= {nyquist}", self.fmin_hz, self.fmax_hz));
        }
        if !(self.log_floor > 0.0) {
            return Err(invalid!("log floor must be positive"));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (centered framing).
    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop_length + 1
    }
}
