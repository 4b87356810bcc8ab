//! Synthetic corpus writing and the Mel feature cache.
//!
//! A cache directory holds `mel/<utterance_id>.mel` files and `index.json`,
//! which maps each utterance to the SHA-256 of its WAV and records the
//! feature-config fingerprint and the pooled Mel statistics. An entry is
//! recomputed only when its WAV hash, the feature config or the Mel file
//! changes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mtevc_core::dsp::{mel_spectrogram, MelSpectrogram, SpectrogramConfig};
use mtevc_core::stats::FeatureStats;
use mtevc_core::synth;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{Error, Result};
use crate::features::{read_mel, write_mel, write_ppg};
use crate::manifest::{Entry, Manifest};
use crate::wav::{read_wav, write_wav};

pub const INDEX_FILE: &str = "index.json";

/// Renders the configured synthetic corpus into `out` and writes its
/// manifest as `out/manifest.json`.
pub fn synth_dataset(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let spec = cfg.corpus.spec(cfg.seed);
    spec.validate()?;
    for sub in ["wav", "ppg"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    let mut manifest = Manifest {
        speakers: (0..spec.num_speakers()).map(|s| (s, format!("speaker{s}"))).collect(),
        emotions: spec.emotions.iter().enumerate().map(|(i, e)| (i, e.name.clone())).collect(),
        root: out.to_path_buf(),
        ..Manifest::default()
    };
    for u in synth::generate(&spec, cfg.features.hop_length)? {
        let wav_path = PathBuf::from("wav").join(format!("{}.wav", u.utterance_id));
        let ppg_path = PathBuf::from("ppg").join(format!("{}.ppg", u.utterance_id));
        write_wav(&out.join(&wav_path), &u.waveform)?;
        write_ppg(&out.join(&ppg_path), &u.ppg)?;
        manifest.entries.push(Entry {
            utterance_id: u.utterance_id,
            wav_path,
            speaker_id: u.speaker,
            emotion_id: u.emotion,
            ppg_path: Some(ppg_path),
            text: Some(u.text),
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Fingerprint of the analysis settings alone.
pub fn features_fingerprint(features: &SpectrogramConfig) -> String {
    sha256_hex(serde_json::to_string(features).expect("config serializes").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedEntry {
    pub wav_sha256: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub utterance_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub features_fingerprint: String,
    pub entries: BTreeMap<String, CachedEntry>,
    pub skipped: Vec<Skipped>,
    /// Pooled per-band statistics over every cached frame.
    pub mel_stats: FeatureStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareReport {
    pub computed: usize,
    pub reused: usize,
    pub skipped: Vec<Skipped>,
}

fn mel_file(dir: &Path, id: &str) -> PathBuf {
    dir.join("mel").join(format!("{id}.mel"))
}

fn read_index(dir: &Path) -> Result<CacheIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Computes (or reuses) the Mel of every manifest entry. Unreadable WAVs are
/// listed and skipped; with `strict` they fail the run once the index is
/// written.
pub fn prepare(cfg: &RunConfig, manifest: &Manifest, out: &Path, strict: bool) -> Result<PrepareReport> {
    let features = &cfg.features;
    features.validate()?;
    let fingerprint = features_fingerprint(features);
    let mel_dir = out.join("mel");
    fs::create_dir_all(&mel_dir).map_err(Error::io(&mel_dir))?;
    let previous = read_index(out).ok().filter(|i| i.features_fingerprint == fingerprint);

    let mut report = PrepareReport::default();
    let mut entries = BTreeMap::new();
    let mut mels = Vec::new();
    for e in &manifest.entries {
        let wav_path = manifest.resolve(&e.wav_path);
        let bytes = fs::read(&wav_path).map_err(Error::io(&wav_path))?;
        let sha = sha256_hex(&bytes);
        let target = mel_file(out, &e.utterance_id);
        let hit = previous.as_ref().and_then(|p| p.entries.get(&e.utterance_id)).filter(|c| c.wav_sha256 == sha);
        if let Some(cached) = hit {
            if let Ok(mel) = read_mel(&target, features) {
                if mel.frames() == cached.frames {
                    entries.insert(e.utterance_id.clone(), cached.clone());
                    mels.push(mel.values);
                    report.reused += 1;
                    continue;
                }
            }
        }
        let mel = match read_wav(&wav_path).and_then(|w| Ok(mel_spectrogram(&w, features)?)) {
            Ok(m) => m,
            Err(err) => {
                report.skipped.push(Skipped { utterance_id: e.utterance_id.clone(), reason: err.to_string() });
                continue;
            }
        };
        write_mel(&target, &mel)?;
        entries.insert(e.utterance_id.clone(), CachedEntry { wav_sha256: sha, frames: mel.frames() });
        mels.push(mel.values);
        report.computed += 1;
    }
    if mels.is_empty() {
        return Err(Error::Data("no readable utterances to prepare".into()));
    }
    let index =
        CacheIndex { features_fingerprint: fingerprint, entries, skipped: report.skipped.clone(), mel_stats: FeatureStats::fit(&mels)? };
    let path = out.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes") + "\n").map_err(Error::io(&path))?;
    if strict && !report.skipped.is_empty() {
        let ids: Vec<_> = report.skipped.iter().map(|s| s.utterance_id.as_str()).collect();
        return Err(Error::Data(format!("{} unreadable WAV file(s): {}", ids.len(), ids.join(", "))));
    }
    Ok(report)
}

/// A prepared cache opened for reading.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub dir: PathBuf,
    pub index: CacheIndex,
    features: SpectrogramConfig,
}

impl FeatureCache {
    /// Opens a cache, refusing one prepared under different analysis
    /// settings.
    pub fn open(dir: &Path, features: &SpectrogramConfig) -> Result<Self> {
        let index = read_index(dir)?;
        if index.features_fingerprint != features_fingerprint(features) {
            return Err(Error::Compatibility {
                path: dir.join(INDEX_FILE),
                message: "feature cache was prepared under different analysis settings".into(),
            });
        }
        Ok(Self { dir: dir.to_path_buf(), index, features: features.clone() })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.entries.contains_key(id)
    }

    pub fn mel(&self, id: &str) -> Result<MelSpectrogram> {
        if !self.contains(id) {
            return Err(Error::Data(format!("utterance {id} is not in the feature cache")));
        }
        read_mel(&mel_file(&self.dir, id), &self.features)
    }

    pub fn mel_stats(&self) -> &FeatureStats {
        &self.index.mel_stats
    }
}
