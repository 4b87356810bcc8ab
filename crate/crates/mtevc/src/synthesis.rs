//! Waveform generation from Mel frames and the conversion command.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtevc_core::conversion::{ConversionModel, PpgMatrix};
use mtevc_core::dsp::{griffin_lim, mel_spectrogram, MelSpectrogram, Waveform};
use mtevc_core::flow::{FloWaveNet, FlowSampleOptions};
use mtevc_core::wavenet::{GlobalConditioning, SampleOptions, WaveNet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::read_ppg;
use crate::manifest::Manifest;
use crate::models;
use crate::train::{parallel_pairs, validation_sentences};
use crate::wav::{read_wav, write_wav};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    GriffinLim,
    WaveNet,
    FloWaveNet,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 3] = [GeneratorKind::GriffinLim, GeneratorKind::WaveNet, GeneratorKind::FloWaveNet];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::GriffinLim => "griffinlim",
            GeneratorKind::WaveNet => models::WAVENET,
            GeneratorKind::FloWaveNet => models::FLOWAVENET,
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown generator {s:?} (expected griffinlim, wavenet or flowavenet)")))
    }
}

/// A loaded waveform generator.
pub enum Generator {
    GriffinLim { iters: usize },
    WaveNet(Box<WaveNet>),
    FloWaveNet(Box<FloWaveNet>),
}

impl Generator {
    /// Griffin-Lim needs no checkpoint; the neural vocoders require one
    /// written under the current config.
    pub fn load(kind: GeneratorKind, checkpoint: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        let need = || checkpoint.ok_or_else(|| Error::Usage(format!("--vocoder is required with --generator {kind}")));
        Ok(match kind {
            GeneratorKind::GriffinLim => Generator::GriffinLim { iters: cfg.synthesis.griffin_lim_iters },
            GeneratorKind::WaveNet => Generator::WaveNet(Box::new(models::load_wavenet(need()?, cfg)?.model)),
            GeneratorKind::FloWaveNet => Generator::FloWaveNet(Box::new(models::load_flow(need()?, cfg)?.model)),
        })
    }

    fn check(&self, gc: GlobalConditioning) -> Result<()> {
        match self {
            Generator::GriffinLim { .. } => Ok(()),
            Generator::WaveNet(m) => Ok(gc.check(m.config().num_speakers, m.config().num_emotions)?),
            Generator::FloWaveNet(m) => Ok(gc.check(m.config().num_speakers, m.config().num_emotions)?),
        }
    }

    /// Renders Mel frames; neural vocoders return `frames * hop` samples.
    pub fn render(&self, mel: &MelSpectrogram, gc: GlobalConditioning, cfg: &RunConfig, seed: u64) -> Result<Waveform> {
        self.check(gc)?;
        let s = &cfg.synthesis;
        Ok(match self {
            Generator::GriffinLim { iters } => griffin_lim(mel, *iters)?,
            Generator::WaveNet(m) => {
                let opts = SampleOptions { mode: s.wavenet_mode, temperature: s.temperature, seed, record_logits: false };
                m.sample(mel, gc, &opts)?.waveform
            }
            Generator::FloWaveNet(m) => m.sample(mel, gc, &FlowSampleOptions { prior_scale: s.prior_scale, seed })?.waveform,
        })
    }
}

/// Converts one source utterance and renders it.
pub fn convert_utterance(
    cfg: &RunConfig,
    model: &ConversionModel,
    generator: &Generator,
    wav: &Waveform,
    ppg: Option<&PpgMatrix>,
    gc: GlobalConditioning,
    seed: u64,
) -> Result<(MelSpectrogram, Waveform)> {
    if gc.emotion >= model.config().num_emotions {
        return Err(Error::Usage(format!("emotion {} outside the model's {} codes", gc.emotion, model.config().num_emotions)));
    }
    let mel = model.convert_utterance(wav, ppg, gc.emotion, &cfg.features)?;
    let out = generator.render(&mel, gc, cfg, seed)?;
    Ok((mel, out))
}

/// One converted file and the reference it should be scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub system: String,
    pub emotion: String,
    pub converted: PathBuf,
    pub target: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<EvalPair>,
}

impl PairList {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("pairs serialize") + "\n").map_err(Error::io(path))
    }
}

/// Which source utterances a batch conversion covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    /// Only sentences the conversion model did not train on.
    HeldOut,
}

/// Converts the speaker's source-emotion utterances to every parallel
/// target emotion. Writes `out/<generator>/<emotion>/<utterance>.wav` and
/// returns the (converted, target) list the evaluator reads, with converted
/// paths relative to `out`.
#[allow(clippy::too_many_arguments)]
pub fn convert_manifest(
    cfg: &RunConfig,
    manifest: &Manifest,
    model: &ConversionModel,
    kind: GeneratorKind,
    generator: &Generator,
    speaker: usize,
    selection: Selection,
    out: &Path,
) -> Result<PairList> {
    let src = manifest.emotion(&cfg.training.source_emotion)?;
    let pairs = parallel_pairs(manifest, src, None);
    let held_out = validation_sentences(&pairs, cfg);
    let mut list = PairList::default();
    for (i, p) in pairs.iter().enumerate() {
        if p.source.speaker_id != speaker {
            continue;
        }
        if selection == Selection::HeldOut && !p.source.text.as_ref().is_some_and(|t| held_out.contains(t)) {
            continue;
        }
        let emotion = manifest.emotions[&p.target.emotion_id].clone();
        let wav = read_wav(&manifest.resolve(&p.source.wav_path))?;
        let ppg = match (&p.source.ppg_path, model.config().use_ppg) {
            (Some(path), true) => Some(read_ppg(&manifest.resolve(path))?),
            (None, true) => return Err(Error::Data(format!("entry {}: the PPG model needs a ppg_path", p.source.utterance_id))),
            (_, false) => None,
        };
        let gc = GlobalConditioning::new(speaker, p.target.emotion_id);
        let (_, audio) = convert_utterance(cfg, model, generator, &wav, ppg.as_ref(), gc, cfg.seed.wrapping_add(i as u64))?;
        let rel = PathBuf::from(kind.name()).join(&emotion).join(format!("{}.wav", p.source.utterance_id));
        let path = out.join(&rel);
        let dir = path.parent().expect("joined path has a parent");
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        write_wav(&path, &audio)?;
        let target = manifest.resolve(&p.target.wav_path);
        list.pairs.push(EvalPair {
            system: kind.name().into(),
            emotion,
            converted: rel,
            target: fs::canonicalize(&target).map_err(Error::io(&target))?,
        });
    }
    if list.pairs.is_empty() {
        return Err(Error::Data(format!("speaker {speaker} has no parallel source utterances to convert")));
    }
    Ok(list)
}

/// Mel input for `synthesize`: a feature file or a WAV to analyze.
pub fn analysis_mel(path: &Path, cfg: &RunConfig) -> Result<MelSpectrogram> {
    if path.extension().is_some_and(|e| e == "wav") {
        Ok(mel_spectrogram(&read_wav(path)?, &cfg.features)?)
    } else {
        crate::features::read_mel(path, &cfg.features)
    }
}
