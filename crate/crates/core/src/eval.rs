//! Objective metrics: Mel-cepstral distortion and log-F0 mean squared error
//! over a DTW alignment of the two signals.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    dtw_align, estimate_f0, mel_cepstrum, mel_spectrogram, DtwPath, F0Contour, Matrix, SpectrogramConfig, Waveform, DEFAULT_CEPSTRAL_ORDER,
};
use crate::error::{invalid, Result};

/// Distortion in dB of a unit difference in a single cepstral coefficient.
pub fn mcd_scale() -> f64 {
    10.0 / core::f64::consts::LN_10 * Float::sqrt(2.0)
}

/// Per-frame distortion between two cepstral frames.
pub fn frame_mcd(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / core::f64::consts::LN_10 * Float::sqrt(2.0 * sq)
}

/// Mean frame distortion along the DTW path between two cepstral sequences.
pub fn mcd_from_cepstra(converted: &Matrix, target: &Matrix) -> Result<(f64, DtwPath)> {
    let path = dtw_align(converted, target)?;
    let total: f64 = path.pairs.iter().map(|&(i, j)| frame_mcd(converted.row(i), target.row(j))).sum();
    Ok((total / path.pairs.len() as f64, path))
}

/// Mean squared log-F0 difference over aligned pairs voiced in both
/// contours; `None` when no pair qualifies.
pub fn logf0_mse_along(path: &DtwPath, converted: &F0Contour, target: &F0Contour) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(i, j) in &path.pairs {
        let (Some(&vc), Some(&vt)) = (converted.voiced.get(i), target.voiced.get(j)) else { continue };
        if vc && vt {
            let d = Float::ln(converted.f0_hz[i]) - Float::ln(target.f0_hz[j]);
            sum += d * d;
            n += 1;
        }
    }
    ((n > 0).then(|| sum / n as f64), n)
}

/// Scores of one converted utterance against its target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub mcd_db: f64,
    /// `None` when the signals share no voiced frames.
    pub logf0_mse: Option<f64>,
    pub voiced_pairs: usize,
    pub path_len: usize,
}

fn check_pair(converted: &Waveform, target: &Waveform, cfg: &SpectrogramConfig) -> Result<()> {
    if converted.is_empty() || target.is_empty() {
        return Err(invalid!("cannot score an empty waveform"));
    }
    if converted.sample_rate() != target.sample_rate() || converted.sample_rate() != cfg.sample_rate {
        return Err(invalid!(
            "sample rates differ: converted {} Hz, target {} Hz, analysis {} Hz",
            converted.sample_rate(),
            target.sample_rate(),
            cfg.sample_rate
        ));
    }
    Ok(())
}

fn cepstra(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Matrix> {
    Ok(mel_cepstrum(&mel_spectrogram(w, cfg)?, DEFAULT_CEPSTRAL_ORDER)?.values)
}

pub fn evaluate_pair(converted: &Waveform, target: &Waveform, cfg: &SpectrogramConfig) -> Result<UtteranceScore> {
    check_pair(converted, target, cfg)?;
    let (mcd_db, path) = mcd_from_cepstra(&cepstra(converted, cfg)?, &cepstra(target, cfg)?)?;
    let f0c = estimate_f0(converted, cfg.hop_length);
    let f0t = estimate_f0(target, cfg.hop_length);
    let (logf0_mse, voiced_pairs) = logf0_mse_along(&path, &f0c, &f0t);
    Ok(UtteranceScore { mcd_db, logf0_mse, voiced_pairs, path_len: path.pairs.len() })
}

pub fn mcd(converted: &Waveform, target: &Waveform, cfg: &SpectrogramConfig) -> Result<f64> {
    check_pair(converted, target, cfg)?;
    Ok(mcd_from_cepstra(&cepstra(converted, cfg)?, &cepstra(target, cfg)?)?.0)
}

pub fn logf0_mse(converted: &Waveform, target: &Waveform, cfg: &SpectrogramConfig) -> Result<Option<f64>> {
    Ok(evaluate_pair(converted, target, cfg)?.logf0_mse)
}

/// Means over a set of utterances; undefined log-F0 scores are counted and
/// left out of the log-F0 mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mcd_db: f64,
    pub logf0_mse: Option<f64>,
    pub n_utts: usize,
    pub n_undefined: usize,
}

pub fn aggregate<'a>(scores: impl IntoIterator<Item = &'a UtteranceScore>) -> Aggregate {
    let mut mcd_sum = 0.0;
    let mut f0: Vec<f64> = Vec::new();
    let mut agg = Aggregate::default();
    for s in scores {
        agg.n_utts += 1;
        mcd_sum += s.mcd_db;
        match s.logf0_mse {
            Some(v) => f0.push(v),
            None => agg.n_undefined += 1,
        }
    }
    if agg.n_utts > 0 {
        agg.mcd_db = mcd_sum / agg.n_utts as f64;
    }
    if !f0.is_empty() {
        agg.logf0_mse = Some(f0.iter().sum::<f64>() / f0.len() as f64);
    }
    agg
}
