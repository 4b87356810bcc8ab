//! Parallel multi-speaker, multi-emotion corpus of harmonic tones with
//! consistent pseudo phonetic posteriorgrams.
//!
//! An utterance's "content" (a sequence of vowel-like units with relative
//! pitch and energy) depends only on its index, so every speaker and
//! emotion renders the same sentences. Emotions change the F0 level,
//! vibrato, spectral tilt and speaking rate; speakers change the base F0.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::conversion::PpgMatrix;
use crate::dsp::{Matrix, Waveform};
use crate::error::{invalid, Result};
use crate::rng;
use crate::SAMPLE_RATE;

/// Width of the pseudo posteriorgrams.
pub const PPG_DIM: usize = 131;

const VOWEL_FORMANTS: [(f64, f64); 8] =
    [(300.0, 2300.0), (400.0, 2000.0), (550.0, 1800.0), (700.0, 1200.0), (650.0, 1000.0), (500.0, 900.0), (350.0, 800.0), (450.0, 1500.0)];
const PITCH_BINS: usize = 4;
const ENERGY_BINS: usize = 4;
const SEMITONE_RANGE: f64 = 3.0;
const ENERGY_RANGE: (f64, f64) = (0.4, 1.0);
const SILENCE_CLASS: usize = VOWEL_FORMANTS.len() * PITCH_BINS * ENERGY_BINS;
const EDGE_SILENCE_SECONDS: f64 = 0.05;
const SMOOTHING_SECONDS: f64 = 0.008;
const PEAK: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProfile {
    pub name: String,
    pub f0_multiplier: f64,
    pub vibrato_hz: f64,
    /// Relative F0 excursion of the vibrato.
    pub vibrato_depth: f64,
    pub tilt_db_per_octave: f64,
    /// Multiplies every unit duration.
    pub duration_warp: f64,
}

impl EmotionProfile {
    fn new(name: &str, f0_multiplier: f64, vibrato_hz: f64, vibrato_depth: f64, tilt: f64, warp: f64) -> Self {
        Self { name: name.into(), f0_multiplier, vibrato_hz, vibrato_depth, tilt_db_per_octave: tilt, duration_warp: warp }
    }

    /// Happy, sad, angry, surprise, fear and neutral, in that order.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("happy", 1.2, 5.0, 0.02, 1.5, 0.9),
            Self::new("sad", 0.85, 3.0, 0.01, -3.0, 1.2),
            Self::new("angry", 1.1, 0.0, 0.0, 3.0, 0.85),
            Self::new("surprise", 1.3, 6.0, 0.03, 1.0, 1.0),
            Self::new("fear", 1.05, 8.0, 0.04, -1.5, 1.1),
            Self::new("neutral", 1.0, 0.0, 0.0, 0.0, 1.0),
        ]
    }
}

const DEFAULT_SPEAKER_F0: [f64; 6] = [120.0, 190.0, 150.0, 105.0, 170.0, 135.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub speaker_f0_hz: Vec<f64>,
    pub emotions: Vec<EmotionProfile>,
    pub utterances_per_cell: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self::new(2, 6, 5)
    }
}

impl SyntheticCorpusSpec {
    /// Picks speakers from a fixed F0 table and emotions from
    /// [`EmotionProfile::defaults`]; neutral is always the last emotion.
    pub fn new(num_speakers: usize, num_emotions: usize, utterances_per_cell: usize) -> Self {
        let all = EmotionProfile::defaults();
        let n = num_emotions.clamp(1, all.len());
        let mut emotions: Vec<_> = all[..n - 1].to_vec();
        emotions.push(all[all.len() - 1].clone());
        Self {
            seed: 0,
            speaker_f0_hz: (0..num_speakers).map(|s| DEFAULT_SPEAKER_F0[s % DEFAULT_SPEAKER_F0.len()]).collect(),
            emotions,
            utterances_per_cell,
            min_seconds: 0.5,
            max_seconds: 1.0,
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker_f0_hz.len()
    }

    pub fn num_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.speaker_f0_hz.is_empty() || self.emotions.is_empty() || self.utterances_per_cell == 0 {
            return Err(invalid!("synthetic corpus needs speakers, emotions and utterances"));
        }
        if !(self.min_seconds > 0.0 && self.max_seconds >= self.min_seconds) {
            return Err(invalid!("duration range {}..{} s is invalid", self.min_seconds, self.max_seconds));
        }
        if self.speaker_f0_hz.iter().any(|f| !(40.0..=1000.0).contains(f)) {
            return Err(invalid!("speaker base F0 must lie in 40..1000 Hz"));
        }
        for e in &self.emotions {
            if !(e.f0_multiplier > 0.0 && e.duration_warp > 0.0 && e.vibrato_depth >= 0.0 && e.vibrato_depth < 0.5) {
                return Err(invalid!("emotion profile {:?} is invalid", e.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Unit {
    vowel: usize,
    semitones: f64,
    energy: f64,
    seconds: f64,
}

impl Unit {
    fn class(&self) -> usize {
        let p = (((self.semitones + SEMITONE_RANGE) / (2.0 * SEMITONE_RANGE)) * PITCH_BINS as f64) as usize;
        let (lo, hi) = ENERGY_RANGE;
        let e = (((self.energy - lo) / (hi - lo)) * ENERGY_BINS as f64) as usize;
        (self.vowel * PITCH_BINS + p.min(PITCH_BINS - 1)) * ENERGY_BINS + e.min(ENERGY_BINS - 1)
    }
}

fn content(spec: &SyntheticCorpusSpec, index: usize) -> Vec<Unit> {
    let mut r = rng::fork(&mut rng::seeded(spec.seed), index as u64);
    let total = rng::uniform::<f64>(&mut r, spec.min_seconds, spec.max_seconds) - 2.0 * EDGE_SILENCE_SECONDS;
    let mut units = Vec::new();
    let mut t = 0.0;
    while t < total.max(0.1) {
        let seconds: f64 = rng::uniform(&mut r, 0.08, 0.2);
        units.push(Unit {
            vowel: rng::below(&mut r, VOWEL_FORMANTS.len()),
            semitones: rng::uniform(&mut r, -SEMITONE_RANGE, SEMITONE_RANGE),
            energy: rng::uniform(&mut r, ENERGY_RANGE.0, ENERGY_RANGE.1),
            seconds,
        });
        t += seconds;
    }
    units
}

/// Unit active at `t` seconds into a rendering whose unit durations are
/// scaled by `warp`; `None` inside the edge silences.
fn unit_at(units: &[Unit], warp: f64, t: f64) -> Option<&Unit> {
    let mut start = EDGE_SILENCE_SECONDS;
    if t < start {
        return None;
    }
    for u in units {
        start += u.seconds * warp;
        if t < start {
            return Some(u);
        }
    }
    None
}

fn rendered_seconds(units: &[Unit], warp: f64) -> f64 {
    2.0 * EDGE_SILENCE_SECONDS + units.iter().map(|u| u.seconds * warp).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    /// Unique per recording: `spk{s}_{emotion}_{index}`.
    pub utterance_id: String,
    /// Shared by every rendering of the same sentence.
    pub text: String,
    pub speaker: usize,
    pub emotion: usize,
    pub waveform: Waveform,
    pub ppg: PpgMatrix,
}

/// Renders one sentence for one speaker and emotion.
pub fn render(spec: &SyntheticCorpusSpec, speaker: usize, emotion: usize, index: usize, hop: usize) -> Result<SyntheticUtterance> {
    spec.validate()?;
    if speaker >= spec.num_speakers() || emotion >= spec.num_emotions() || hop == 0 {
        return Err(invalid!("speaker {speaker} / emotion {emotion} / hop {hop} out of range"));
    }
    let units = content(spec, index);
    let profile = &spec.emotions[emotion];
    let warp = profile.duration_warp;
    let sr = SAMPLE_RATE as f64;
    let n = (rendered_seconds(&units, warp) * sr).round() as usize;
    let base = spec.speaker_f0_hz[speaker] * profile.f0_multiplier;
    let alpha = 1.0 - (-1.0 / (SMOOTHING_SECONDS * sr)).exp();
    let tilt = profile.tilt_db_per_octave;

    let mut samples = Vec::with_capacity(n);
    let (mut log_f0, mut energy, mut f1, mut f2) = (base.ln(), 0.0, 500.0, 1500.0);
    let mut phase = 0.0f64;
    let mut amps: Vec<f64> = Vec::new();
    for i in 0..n {
        let t = i as f64 / sr;
        let (target_f0, target_e, tf1, tf2) = match unit_at(&units, warp, t) {
            Some(u) => {
                let (a, b) = VOWEL_FORMANTS[u.vowel];
                (base.ln() + u.semitones / 12.0 * core::f64::consts::LN_2, u.energy, a, b)
            }
            None => (log_f0, 0.0, f1, f2),
        };
        log_f0 += alpha * (target_f0 - log_f0);
        energy += alpha * (target_e - energy);
        f1 += alpha * (tf1 - f1);
        f2 += alpha * (tf2 - f2);
        let f0 = log_f0.exp() * (1.0 + profile.vibrato_depth * (TAU * profile.vibrato_hz * t).sin());
        phase = (phase + TAU * f0 / sr) % (TAU * 1024.0);
        if i % 32 == 0 {
            amps.clear();
            let mut k = 1;
            while (k as f64) * f0 < 7000.0 {
                let f = k as f64 * f0;
                let env = (-((f - f1) / 150.0).powi(2)).exp() + 0.6 * (-((f - f2) / 250.0).powi(2)).exp() + 0.08;
                let octaves = (k as f64).log2();
                amps.push(env * (k as f64).powf(-0.6) * 10f64.powf(tilt * octaves / 20.0));
                k += 1;
            }
        }
        let s: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
        samples.push((energy * s) as f32);
    }
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= PEAK / peak;
        }
    }
    let waveform = Waveform::new(samples, SAMPLE_RATE)?;

    let frames = n / hop + 1;
    let floor = 0.1 / PPG_DIM as f64;
    let mut ppg = Matrix::from_fn(frames, PPG_DIM, |_, _| floor);
    for f in 0..frames {
        let class = unit_at(&units, warp, (f * hop) as f64 / sr).map_or(SILENCE_CLASS, Unit::class);
        ppg.set(f, class, ppg.at(f, class) + 0.9);
    }

    Ok(SyntheticUtterance {
        utterance_id: format!("spk{speaker}_{}_{index:03}", profile.name),
        text: format!("sentence{index:03}"),
        speaker,
        emotion,
        waveform,
        ppg: PpgMatrix::new(ppg)?,
    })
}

/// Every (speaker, emotion, sentence) rendering, speaker-major.
pub fn generate(spec: &SyntheticCorpusSpec, hop: usize) -> Result<Vec<SyntheticUtterance>> {
    let mut out = Vec::new();
    for s in 0..spec.num_speakers() {
        for e in 0..spec.num_emotions() {
            for u in 0..spec.utterances_per_cell {
                out.push(render(spec, s, e, u, hop)?);
            }
        }
    }
    Ok(out)
}
