use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::Waveform;

pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 400.0;
/// Analysis frame length; two periods of the lowest searchable pitch fit.
pub const F0_FRAME_SECONDS: f64 = 0.040;

const VOICING_THRESHOLD: f64 = 0.3;
const RELATIVE_RMS_FLOOR: f64 = 1e-4;
/// A shorter-lag peak within this fraction of the best one wins, which keeps
/// the estimate on the fundamental rather than a subharmonic.
const OCTAVE_GUARD: f64 = 0.9;

/// Per-frame fundamental frequency; `f0_hz` is zero on unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Contour {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }
}

/// Normalized-autocorrelation pitch tracker.
///
/// Frame `i` is the 40 ms window centered on sample `i * frame_hop`, so the
/// contour lines up with centered STFT frames (`len / hop + 1` entries).
/// Windows that do not fit inside the signal are reported unvoiced.
pub fn estimate_f0(w: &Waveform, frame_hop: usize) -> F0Contour {
    let hop = frame_hop.max(1);
    let sr = w.sample_rate() as f64;
    let x: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let frame_len = (F0_FRAME_SECONDS * sr).round() as usize;
    let half = frame_len / 2;
    let n_frames = x.len() / hop + 1;
    let min_lag = (sr / F0_MAX_HZ).floor().max(2.0) as usize;
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(frame_len.saturating_sub(2));

    let windows: Vec<Option<&[f64]>> = (0..n_frames)
        .map(|i| {
            let c = i * hop;
            (c >= half && c - half + frame_len <= x.len()).then(|| &x[c - half..c - half + frame_len])
        })
        .collect();
    let rms: Vec<f64> = windows.iter().map(|w| w.map_or(0.0, |f| (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt())).collect();
    let max_rms = rms.iter().copied().fold(0.0, f64::max);

    let mut f0_hz = vec![0.0; n_frames];
    let mut voiced = vec![false; n_frames];
    if max_lag <= min_lag {
        return F0Contour { f0_hz, voiced };
    }
    for (i, frame) in windows.iter().enumerate() {
        let Some(frame) = frame else { continue };
        if !(rms[i] > RELATIVE_RMS_FLOOR * max_rms) {
            continue;
        }
        if let Some((lag, peak)) = pick_lag(frame, min_lag, max_lag) {
            if peak > VOICING_THRESHOLD {
                f0_hz[i] = (sr / lag).clamp(F0_MIN_HZ, F0_MAX_HZ);
                voiced[i] = true;
            }
        }
    }
    F0Contour { f0_hz, voiced }
}

fn normalized_autocorrelation(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (a, b) = (&frame[..n], &frame[lag..]);
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        xy += p * q;
        xx += p * p;
        yy += q * q;
    }
    let den = (xx * yy).sqrt();
    if den > 0.0 {
        xy / den
    } else {
        0.0
    }
}

/// Returns the refined lag (samples) and the peak correlation.
fn pick_lag(frame: &[f64], min_lag: usize, max_lag: usize) -> Option<(f64, f64)> {
    let lo = min_lag - 1;
    let r: Vec<f64> = (lo..=max_lag + 1).map(|l| normalized_autocorrelation(frame, l)).collect();
    let at = |lag: usize| r[lag - lo];
    let peaks: Vec<usize> = (min_lag..=max_lag).filter(|&l| at(l) >= at(l - 1) && at(l) > at(l + 1) && at(l) > 0.0).collect();
    let best = peaks.iter().map(|&l| at(l)).fold(f64::NEG_INFINITY, f64::max);
    let lag = *peaks.iter().find(|&&l| at(l) >= OCTAVE_GUARD * best)?;
    let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
    let den = a - 2.0 * b + c;
    let delta = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    Some((lag as f64 + delta, b))
}
