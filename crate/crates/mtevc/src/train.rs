//! Training commands for the conversion model and both vocoders.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtevc_core::autodiff::AdamState;
use mtevc_core::conversion::{prepare_pairs, ConversionModel, TrainingPair};
use mtevc_core::dsp::{MelSpectrogram, Waveform};
use mtevc_core::flow::FloWaveNet;
use mtevc_core::rng::{self, Rng};
use mtevc_core::wavenet::{GlobalConditioning, WaveNet};
use serde::{Deserialize, Serialize};

use crate::cache::FeatureCache;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::read_ppg;
use crate::manifest::{Entry, Manifest};
use crate::models;
use crate::wav::read_wav;

/// RNG streams forked from the run seed, one per purpose.
mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderKind {
    WaveNet,
    FloWaveNet,
}

impl VocoderKind {
    pub fn name(self) -> &'static str {
        match self {
            VocoderKind::WaveNet => models::WAVENET,
            VocoderKind::FloWaveNet => models::FLOWAVENET,
        }
    }
}

impl fmt::Display for VocoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VocoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            models::WAVENET => Ok(VocoderKind::WaveNet),
            models::FLOWAVENET => Ok(VocoderKind::FloWaveNet),
            other => Err(Error::Usage(format!("unknown vocoder kind {other:?} (expected wavenet or flowavenet)"))),
        }
    }
}

/// Loss history written next to the final checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub model: String,
    pub steps: u64,
    pub train_loss: Vec<f64>,
    /// `(step, mean validation loss)`; step 0 is the untrained model.
    pub validation: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("log serializes") + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Writes periodic checkpoints and keeps only the most recent ones.
struct Checkpointer {
    dir: PathBuf,
    every: u64,
    keep: usize,
    kept: Vec<PathBuf>,
}

impl Checkpointer {
    fn new(out: &Path, cfg: &RunConfig) -> Result<Self> {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        Ok(Self { dir, every: cfg.training.checkpoint_every, keep: cfg.training.keep_checkpoints.max(1), kept: Vec::new() })
    }

    fn due(&self, step: u64) -> bool {
        self.every > 0 && step % self.every == 0
    }

    fn save(&mut self, kind: &str, step: u64, ckpt: &Checkpoint) -> Result<()> {
        let path = self.dir.join(format!("{kind}-{step:08}.ckpt"));
        ckpt.save(&path)?;
        self.kept.push(path);
        while self.kept.len() > self.keep {
            let old = self.kept.remove(0);
            fs::remove_file(&old).map_err(Error::io(&old))?;
        }
        Ok(())
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// One source-to-target pairing found in the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub source: Entry,
    pub target: Entry,
}

/// Pairs every `source_emotion` utterance with the other-emotion renderings
/// of the same sentence by the same speaker. Entries missing from the cache
/// or lacking a sentence id are left out.
pub fn parallel_pairs(manifest: &Manifest, source_emotion: usize, cache: Option<&FeatureCache>) -> Vec<ParallelPair> {
    let usable = |e: &&Entry| e.text.is_some() && cache.map_or(true, |c| c.contains(&e.utterance_id));
    let mut by_sentence: BTreeMap<(usize, &str), Vec<&Entry>> = BTreeMap::new();
    for e in manifest.entries.iter().filter(usable) {
        by_sentence.entry((e.speaker_id, e.text.as_deref().unwrap_or_default())).or_default().push(e);
    }
    let mut out = Vec::new();
    for group in by_sentence.values() {
        for src in group.iter().filter(|e| e.emotion_id == source_emotion) {
            for tgt in group.iter().filter(|e| e.emotion_id != source_emotion) {
                out.push(ParallelPair { source: (*src).clone(), target: (*tgt).clone() });
            }
        }
    }
    out
}

/// Sentences held out from conversion training: a seeded shuffle of the
/// distinct sentence ids, of which the first `fraction` (at least one when
/// two or more exist) is held out.
pub fn validation_sentences(pairs: &[ParallelPair], cfg: &RunConfig) -> BTreeSet<String> {
    let mut texts: Vec<String> = pairs.iter().filter_map(|p| p.source.text.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut r = rng::fork(&mut rng::seeded(cfg.seed), stream::SPLIT);
    for i in (1..texts.len()).rev() {
        texts.swap(i, rng::below(&mut r, i + 1));
    }
    let n = if texts.len() < 2 {
        0
    } else {
        ((texts.len() as f64 * cfg.training.validation_fraction).ceil() as usize).clamp(1, texts.len() - 1)
    };
    texts.into_iter().take(n).collect()
}

fn training_pair(p: &ParallelPair, manifest: &Manifest, cache: &FeatureCache, use_ppg: bool) -> Result<TrainingPair> {
    let src = cache.mel(&p.source.utterance_id)?;
    let tgt = cache.mel(&p.target.utterance_id)?;
    let ppg = if use_ppg {
        let path = p
            .source
            .ppg_path
            .as_ref()
            .ok_or_else(|| Error::Data(format!("entry {}: the PPG model needs a ppg_path", p.source.utterance_id)))?;
        Some(read_ppg(&manifest.resolve(path))?)
    } else {
        None
    };
    Ok(prepare_pairs(&src, ppg.as_ref(), &tgt, p.target.emotion_id)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionRun {
    pub checkpoint: PathBuf,
    pub log: TrainingLog,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

fn source_emotion(manifest: &Manifest, cfg: &RunConfig) -> Result<usize> {
    manifest
        .emotion(&cfg.training.source_emotion)
        .map_err(|_| Error::Data(format!("source emotion {:?} is not in the manifest", cfg.training.source_emotion)))
}

/// Trains one multi-target conversion model on every parallel
/// (source emotion, other emotion) pair. `baseline` drops the PPG input.
pub fn train_conversion(cfg: &RunConfig, manifest: &Manifest, cache: &FeatureCache, out: &Path, baseline: bool) -> Result<ConversionRun> {
    let mut conv_cfg = cfg.conversion.clone();
    if baseline {
        conv_cfg.use_ppg = false;
    }
    if manifest.num_emotions() > conv_cfg.num_emotions {
        return Err(Error::Data(format!(
            "manifest has {} emotions but the model has {} emotion codes",
            manifest.num_emotions(),
            conv_cfg.num_emotions
        )));
    }
    let src = source_emotion(manifest, cfg)?;
    let pairs = parallel_pairs(manifest, src, Some(cache));
    if pairs.is_empty() {
        return Err(Error::Data(format!("no parallel pairs from emotion {:?}", cfg.training.source_emotion)));
    }
    let held_out = validation_sentences(&pairs, cfg);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for p in &pairs {
        let tp = training_pair(p, manifest, cache, conv_cfg.use_ppg)?;
        if p.source.text.as_ref().is_some_and(|t| held_out.contains(t)) {
            valid.push(tp);
        } else {
            train.push(tp);
        }
    }

    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut root = rng::seeded(cfg.seed);
    let mut init = rng::fork(&mut root, stream::INIT);
    let mut batch = rng::fork(&mut root, stream::BATCH);
    let mut model = ConversionModel::for_pairs(&conv_cfg, &mut init, &train)?;
    let mut opt = model.optimizer();
    let validate = |m: &ConversionModel| -> Result<f64> {
        let losses = valid.iter().map(|p| m.evaluate(p)).collect::<mtevc_core::Result<Vec<_>>>()?;
        Ok(mean(losses))
    };

    let steps = cfg.training.conversion_steps;
    let mut log = TrainingLog { model: models::CONVERSION.into(), steps, ..TrainingLog::default() };
    if !valid.is_empty() {
        log.validation.push((0, validate(&model)?));
    }
    let mut ckpts = Checkpointer::new(out, cfg)?;
    for step in 1..=steps {
        let pair = &train[rng::below(&mut batch, train.len())];
        log.train_loss.push(model.train_step(&mut opt, pair)?);
        if !valid.is_empty() && cfg.training.validate_every > 0 && step % cfg.training.validate_every == 0 {
            log.validation.push((step, validate(&model)?));
        }
        if ckpts.due(step) {
            ckpts.save(models::CONVERSION, step, &models::conversion_checkpoint(cfg, &model, Some(&opt), step))?;
        }
    }
    log.checkpoints = ckpts.kept.clone();
    let checkpoint = out.join(format!("{}.ckpt", models::CONVERSION));
    models::conversion_checkpoint(cfg, &model, Some(&opt), steps).save(&checkpoint)?;
    log.save(&out.join(format!("{}_log.json", models::CONVERSION)))?;
    Ok(ConversionRun { checkpoint, log, train_pairs: train.len(), validation_pairs: valid.len() })
}

/// One vocoder training example.
struct Example {
    wav: Waveform,
    mel: MelSpectrogram,
    gc: GlobalConditioning,
}

enum Vocoder {
    WaveNet(WaveNet),
    Flow(FloWaveNet),
}

impl Vocoder {
    fn step(&mut self, opt: &mut AdamState<f32>, r: &mut Rng, ex: &Example) -> Result<f64> {
        Ok(match self {
            Vocoder::WaveNet(m) => m.train_step(opt, r, &ex.wav, &ex.mel, ex.gc)?,
            Vocoder::Flow(m) => m.train_step(opt, r, &ex.wav, &ex.mel, ex.gc)?,
        })
    }

    fn checkpoint(&self, cfg: &RunConfig, opt: &AdamState<f32>, step: u64) -> Checkpoint {
        match self {
            Vocoder::WaveNet(m) => models::wavenet_checkpoint(cfg, m, Some(opt), step),
            Vocoder::Flow(m) => models::flow_checkpoint(cfg, m, Some(opt), step),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocoderRun {
    pub checkpoint: PathBuf,
    pub log: TrainingLog,
}

/// Trains the selected vocoder on every cached utterance, each carrying its
/// speaker and emotion as global conditioning.
pub fn train_vocoder(cfg: &RunConfig, manifest: &Manifest, cache: &FeatureCache, kind: VocoderKind, out: &Path) -> Result<VocoderRun> {
    let (speakers, emotions) = match kind {
        VocoderKind::WaveNet => (cfg.wavenet.num_speakers, cfg.wavenet.num_emotions),
        VocoderKind::FloWaveNet => (cfg.flow.num_speakers, cfg.flow.num_emotions),
    };
    // conditioning ids are checked before anything is loaded or trained
    for e in &manifest.entries {
        GlobalConditioning::new(e.speaker_id, e.emotion_id)
            .check(speakers, emotions)
            .map_err(|err| Error::Data(format!("entry {}: {err}", e.utterance_id)))?;
    }
    let mut examples = Vec::new();
    for e in manifest.entries.iter().filter(|e| cache.contains(&e.utterance_id)) {
        examples.push(Example {
            wav: read_wav(&manifest.resolve(&e.wav_path))?,
            mel: cache.mel(&e.utterance_id)?,
            gc: GlobalConditioning::new(e.speaker_id, e.emotion_id),
        });
    }
    if examples.is_empty() {
        return Err(Error::Data("no cached utterances to train on".into()));
    }

    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut root = rng::seeded(cfg.seed);
    let mut init = rng::fork(&mut root, stream::INIT);
    let mut batch = rng::fork(&mut root, stream::BATCH);
    let stats = cache.mel_stats().clone();
    let (mut model, mut opt) = match kind {
        VocoderKind::WaveNet => {
            let m = WaveNet::new(&cfg.wavenet, &mut init, stats)?;
            let o = m.optimizer();
            (Vocoder::WaveNet(m), o)
        }
        VocoderKind::FloWaveNet => {
            let m = FloWaveNet::new(&cfg.flow, &mut init, stats)?;
            let o = m.optimizer();
            (Vocoder::Flow(m), o)
        }
    };

    let steps = cfg.training.vocoder_steps;
    let mut log = TrainingLog { model: kind.name().into(), steps, ..TrainingLog::default() };
    let mut ckpts = Checkpointer::new(out, cfg)?;
    for step in 1..=steps {
        let ex = &examples[rng::below(&mut batch, examples.len())];
        log.train_loss.push(model.step(&mut opt, &mut batch, ex)?);
        if ckpts.due(step) {
            ckpts.save(kind.name(), step, &model.checkpoint(cfg, &opt, step))?;
        }
    }
    log.checkpoints = ckpts.kept.clone();
    let checkpoint = out.join(format!("{kind}.ckpt"));
    model.checkpoint(cfg, &opt, steps).save(&checkpoint)?;
    log.save(&out.join(format!("{kind}_log.json")))?;
    Ok(VocoderRun { checkpoint, log })
}
