//! Dataset manifests: one JSON file listing utterances with their speaker
//! and emotion ids. Paths are relative to the manifest's directory unless
//! absolute.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub utterance_id: String,
    pub wav_path: PathBuf,
    pub speaker_id: usize,
    pub emotion_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppg_path: Option<PathBuf>,
    /// Sentence identity shared by parallel renderings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub speakers: BTreeMap<usize, String>,
    pub emotions: BTreeMap<usize, String>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

fn dense(table: &BTreeMap<usize, String>, what: &str) -> std::result::Result<(), String> {
    if table.is_empty() {
        return Err(format!("{what} table is empty"));
    }
    for (i, (&id, _)) in table.iter().enumerate() {
        if id != i {
            return Err(format!("{what} ids must be dense from 0; id {i} is missing"));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks id tables, id ranges, uniqueness and that every referenced
    /// file exists; messages name the offending entry.
    pub fn validate(&self) -> std::result::Result<(), String> {
        dense(&self.speakers, "speaker")?;
        dense(&self.emotions, "emotion")?;
        if self.entries.is_empty() {
            return Err("manifest has no entries".into());
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            let id = &e.utterance_id;
            if !seen.insert(id.as_str()) {
                return Err(format!("entry {id}: duplicate utterance_id"));
            }
            if e.speaker_id >= self.speakers.len() {
                return Err(format!("entry {id}: speaker_id {} outside 0..{}", e.speaker_id, self.speakers.len()));
            }
            if e.emotion_id >= self.emotions.len() {
                return Err(format!("entry {id}: emotion_id {} outside 0..{}", e.emotion_id, self.emotions.len()));
            }
            for p in std::iter::once(&e.wav_path).chain(&e.ppg_path) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(format!("entry {id}: file {} does not exist", full.display()));
                }
            }
        }
        Ok(())
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn num_emotions(&self) -> usize {
        self.emotions.len()
    }

    /// Looks an emotion up by name or numeric id.
    pub fn emotion(&self, key: &str) -> Result<usize> {
        lookup(&self.emotions, key, "emotion")
    }

    pub fn speaker(&self, key: &str) -> Result<usize> {
        lookup(&self.speakers, key, "speaker")
    }

    pub fn entry(&self, utterance_id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }
}

fn lookup(table: &BTreeMap<usize, String>, key: &str, what: &str) -> Result<usize> {
    if let Ok(id) = key.parse::<usize>() {
        if table.contains_key(&id) {
            return Ok(id);
        }
    }
    table
        .iter()
        .find(|(_, name)| name.as_str() == key)
        .map(|(&id, _)| id)
        .ok_or_else(|| Error::Usage(format!("unknown {what} {key:?}; known: {}", table.values().cloned().collect::<Vec<_>>().join(", "))))
}
