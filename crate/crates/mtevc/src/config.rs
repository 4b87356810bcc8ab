//! The single JSON run configuration every command reads.

use std::fs;
use std::path::Path;

use mtevc_core::conversion::ConversionConfig;
use mtevc_core::dsp::SpectrogramConfig;
use mtevc_core::flow::FlowConfig;
use mtevc_core::synth::SyntheticCorpusSpec;
use mtevc_core::wavenet::{SamplingMode, WaveNetConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of the synthetic corpus written by `synth-dataset`; the generator
/// draws from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub utterances_per_cell: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { num_speakers: 2, num_emotions: 6, utterances_per_cell: 10, min_seconds: 0.5, max_seconds: 1.0 }
    }
}

impl CorpusConfig {
    pub fn spec(&self, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            seed,
            min_seconds: self.min_seconds,
            max_seconds: self.max_seconds,
            ..SyntheticCorpusSpec::new(self.num_speakers, self.num_emotions, self.utterances_per_cell)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Emotion name every conversion pair starts from.
    pub source_emotion: String,
    pub conversion_steps: u64,
    pub vocoder_steps: u64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    pub validate_every: u64,
    /// Share of sentences held out from conversion training.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            source_emotion: "neutral".into(),
            conversion_steps: 2000,
            vocoder_steps: 2000,
            checkpoint_every: 500,
            keep_checkpoints: 3,
            validate_every: 100,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub griffin_lim_iters: usize,
    pub wavenet_mode: SamplingMode,
    pub temperature: f64,
    /// Overrides the flow's configured prior scale.
    pub prior_scale: Option<f64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { griffin_lim_iters: 60, wavenet_mode: SamplingMode::Fast, temperature: 1.0, prior_scale: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub features: SpectrogramConfig,
    pub corpus: CorpusConfig,
    pub conversion: ConversionConfig,
    pub wavenet: WaveNetConfig,
    pub flow: FlowConfig,
    pub training: TrainingConfig,
    pub synthesis: SynthesisConfig,
}

pub type Fingerprint = [u8; 32];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn validate(&self) -> mtevc_core::Result<()> {
        self.features.validate()?;
        self.conversion.validate()?;
        self.wavenet.validate()?;
        self.flow.validate()?;
        self.corpus.spec(self.seed).validate()?;
        let hop = self.features.hop_length;
        for (name, vocoder_hop) in [("wavenet", self.wavenet.hop()), ("flow", self.flow.hop())] {
            if vocoder_hop != hop {
                return Err(mtevc_core::Error::InvalidInput(format!("{name} upsamples by {vocoder_hop} but the Mel hop is {hop}")));
            }
        }
        let mels = self.features.num_mels;
        if [self.conversion.mel_dim, self.wavenet.mel_dim, self.flow.mel_dim].iter().any(|&d| d != mels) {
            return Err(mtevc_core::Error::InvalidInput(format!("every model must take {mels} Mel bands")));
        }
        Ok(())
    }

    /// Compact JSON in declaration order; the fingerprint is taken over it.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
