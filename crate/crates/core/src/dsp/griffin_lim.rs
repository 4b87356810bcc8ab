use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::linalg::Cholesky;
use super::stft::{istft_f64, padded_hann, stft_f64, Spectrum};
use super::{mel_filterbank, FftPlan, Matrix, MelSpectrogram, SpectrogramConfig, Waveform};
use crate::error::{invalid, Result};

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 60;

/// Linear magnitudes recovered from a log-Mel spectrogram through the
/// pseudo-inverse of the filterbank, clamped at zero. Entries at the log
/// floor are treated as silence.
pub fn mel_to_linear(mel: &MelSpectrogram) -> Result<Matrix> {
    let cfg = &mel.config;
    let fb = mel_filterbank(cfg)?;
    let w = &fb.weights;
    let (m, bins) = (w.rows(), w.cols());
    let mut gram = Matrix::from_fn(m, m, |i, j| w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum());
    let ridge = 1e-12 * (0..m).map(|i| gram.at(i, i)).fold(0.0, f64::max);
    for i in 0..m {
        gram.set(i, i, gram.at(i, i) + ridge);
    }
    let chol = Cholesky::factor(&gram)?;
    let floor = cfg.log_floor.ln();
    let mut out = Matrix::zeros(mel.frames(), bins);
    for f in 0..mel.frames() {
        let energies: Vec<f64> = mel.values.row(f).iter().map(|&v| if v <= floor + 1e-9 { 0.0 } else { v.exp() }).collect();
        if energies.iter().all(|&e| e == 0.0) {
            continue;
        }
        let y = chol.solve(&energies);
        let row = out.row_mut(f);
        for (mi, &ym) in y.iter().enumerate() {
            for (k, dst) in row.iter_mut().enumerate() {
                *dst += w.at(mi, k) * ym;
            }
        }
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(out)
}

/// `||(|STFT(x)| - S)||_F / ||S||_F`, zero when both are zero.
pub fn spectral_convergence(estimate: &Matrix, target: &Matrix) -> f64 {
    let num: f64 = estimate.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = target.data().iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct GriffinLimTrace {
    pub waveform: Waveform,
    /// Spectral convergence after each iteration (index 0 = iteration 1).
    pub convergence: Vec<f64>,
}

/// Griffin-Lim phase reconstruction from linear magnitudes
/// (`frames x bins`), starting from zero phase. Returns
/// `(frames - 1) * hop` samples.
pub fn griffin_lim_linear(magnitude: &Matrix, cfg: &SpectrogramConfig, iters: usize) -> Result<GriffinLimTrace> {
    cfg.validate()?;
    if iters == 0 {
        return Err(invalid!("griffin-lim needs at least one iteration"));
    }
    if magnitude.cols() != cfg.num_bins() || magnitude.rows() == 0 {
        return Err(invalid!("magnitude has shape {}x{}, need frames x {}", magnitude.rows(), magnitude.cols(), cfg.num_bins()));
    }
    let plan = FftPlan::new(cfg.fft_size)?;
    let window = padded_hann(cfg);
    let (frames, bins) = (magnitude.rows(), magnitude.cols());
    let len = (frames - 1) * cfg.hop_length;
    let mut spec = Spectrum { frames, bins, re: magnitude.data().to_vec(), im: vec![0.0; frames * bins] };
    let mut signal = vec![0.0; len];
    let mut convergence = Vec::with_capacity(iters);
    for _ in 0..iters {
        signal = istft_f64(&spec, cfg, len, &plan, &window);
        let rebuilt = stft_f64(&signal, cfg, &plan, &window);
        convergence.push(spectral_convergence(&rebuilt.magnitude(), magnitude));
        for k in 0..frames * bins {
            let (r, i) = (rebuilt.re[k], rebuilt.im[k]);
            let norm = r.hypot(i);
            let target = magnitude.data()[k];
            if norm > 1e-12 {
                spec.re[k] = target * r / norm;
                spec.im[k] = target * i / norm;
            } else {
                spec.re[k] = target;
                spec.im[k] = 0.0;
            }
        }
    }
    let samples = signal.iter().map(|&v| (v as f32).clamp(-1.0, 1.0)).collect();
    Ok(GriffinLimTrace { waveform: Waveform::new(samples, cfg.sample_rate)?, convergence })
}

/// Waveform from a log-Mel spectrogram via filterbank pseudo-inversion and
/// Griffin-Lim.
pub fn griffin_lim(mel: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    let linear = mel_to_linear(mel)?;
    Ok(griffin_lim_linear(&linear, &mel.config, iters)?.waveform)
}
