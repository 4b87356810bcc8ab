use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: alloc::vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Clamps every sample into `[-1, 1]`.
    pub fn clamped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        self
    }

    /// Scales so the peak is `target` (no-op on silence).
    pub fn normalized(mut self, target: f32) -> Self {
        let p = self.peak();
        if p > 0.0 {
            let g = target / p;
            for s in &mut self.samples {
                *s *= g;
            }
        }
        self
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn with_len(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}
