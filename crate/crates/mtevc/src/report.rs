//! The `evaluate` command: objective scores of converted speech per system
//! and emotion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtevc_core::dsp::SpectrogramConfig;
use mtevc_core::eval::{aggregate, evaluate_pair, Aggregate, UtteranceScore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::PairList;
use crate::wav::read_wav;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub path: PathBuf,
    pub reason: String,
}

/// `systems[system][emotion]` holds the aggregate over that cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub systems: BTreeMap<String, BTreeMap<String, Aggregate>>,
    pub missing: Vec<Problem>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let emotions: Vec<&String> =
            self.systems.values().flat_map(|m| m.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut out = String::new();
        for (metric, pick) in [("MCD (dB)", 0), ("LogF0-MSE", 1)] {
            let _ = write!(out, "{metric:<14}");
            for e in &emotions {
                let _ = write!(out, "{e:>12}");
            }
            out.push('\n');
            for (system, cells) in &self.systems {
                let _ = write!(out, "{system:<14}");
                for e in &emotions {
                    let cell = cells.get(*e).map(|a| if pick == 0 { Some(a.mcd_db) } else { a.logf0_mse });
                    match cell.flatten() {
                        Some(v) => {
                            let _ = write!(out, "{v:>12.4}");
                        }
                        None => {
                            let _ = write!(out, "{:>12}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        for m in &self.missing {
            let _ = writeln!(out, "missing: {} ({})", m.path.display(), m.reason);
        }
        out
    }
}

/// Scores every pair and writes `report.json` and `report.txt` into `out`.
/// Unreadable files are listed in the report; with `strict` they fail the
/// run after the report is written.
pub fn evaluate(pairs: &PairList, root: &Path, features: &SpectrogramConfig, out: &Path, strict: bool) -> Result<EvalReport> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    let mut cells: BTreeMap<(String, String), Vec<UtteranceScore>> = BTreeMap::new();
    let mut report = EvalReport::default();
    for pair in &pairs.pairs {
        let (c, t) = (resolve(&pair.converted), resolve(&pair.target));
        let loaded = read_wav(&c).and_then(|cw| Ok((cw, read_wav(&t)?)));
        let (cw, tw) = match loaded {
            Ok(w) => w,
            Err(e) => {
                let path = match &e {
                    Error::Io { path, .. } | Error::Format { path, .. } => path.clone(),
                    _ => c.clone(),
                };
                report.missing.push(Problem { path, reason: e.to_string() });
                continue;
            }
        };
        let score = evaluate_pair(&cw, &tw, features)?;
        cells.entry((pair.system.clone(), pair.emotion.clone())).or_default().push(score);
    }
    for ((system, emotion), scores) in &cells {
        report.systems.entry(system.clone()).or_default().insert(emotion.clone(), aggregate(scores));
    }

    fs::create_dir_all(out).map_err(Error::io(out))?;
    let json = out.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(Error::io(&json))?;
    let txt = out.join("report.txt");
    fs::write(&txt, report.table()).map_err(Error::io(&txt))?;
    if strict && !report.missing.is_empty() {
        return Err(Error::Data(format!("{} pair file(s) could not be read", report.missing.len())));
    }
    Ok(report)
}
