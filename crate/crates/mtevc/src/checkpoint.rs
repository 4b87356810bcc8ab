//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTEVC" | u32 version | [u8; 32] config fingerprint
//! u32 kind length | kind | u64 training step
//! params section | state section | optimizer section
//! ```
//!
//! Each section is a `u32` record count followed by records of the form
//! `u32 name length | name | u8 dtype (1 = f32, 2 = f64) | u32 rank |
//! u64 dims.. | raw values`. The state section carries normalization
//! statistics and flags; the optimizer section is empty when no optimizer
//! state was saved.

use std::fs;
use std::path::Path;

use mtevc_core::autodiff::{AdamConfig, AdamState, ParamStore, Tensor};
use mtevc_core::stats::FeatureStats;

use crate::config::{hex, Fingerprint};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MTEVC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Record {
    pub fn f32(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), values: Values::F32(data) }
    }

    pub fn f64(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self { name: name.into(), shape: vec![n], values: Values::F64(data) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: Fingerprint,
    pub step: u64,
    pub params: Vec<Record>,
    pub state: Vec<Record>,
    pub optimizer: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, records: &[Record]) {
    put_u32(out, records.len());
    for r in records {
        put_u32(out, r.name.len());
        out.extend_from_slice(r.name.as_bytes());
        out.push(match r.values {
            Values::F32(_) => 1,
            Values::F64(_) => 2,
        });
        put_u32(out, r.shape.len());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.values {
            Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn section(&mut self) -> std::result::Result<Vec<Record>, String> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.string()?;
            let dtype = self.take(1)?[0];
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
            let values = match dtype {
                1 => Values::F32(
                    self.take(count.checked_mul(4).ok_or("shape overflows")?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                2 => Values::F64(
                    self.take(count.checked_mul(8).ok_or("shape overflows")?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                d => return Err(format!("record {name} has unknown dtype {d}")),
            };
            out.push(Record { name, shape, values });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: Fingerprint, step: u64) -> Self {
        Self { kind: kind.into(), fingerprint, step, params: Vec::new(), state: Vec::new(), optimizer: Vec::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        out.extend_from_slice(&self.fingerprint);
        put_u32(&mut out, self.kind.len());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_section(&mut out, &self.params);
        put_section(&mut out, &self.state);
        put_section(&mut out, &self.optimizer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint (missing MTEVC magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(format!("format version {version}, this build reads {VERSION}"));
        }
        let fingerprint: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
        let kind = r.string()?;
        let step = r.u64()?;
        let ckpt = Self { kind, fingerprint, step, params: r.section()?, state: r.section()?, optimizer: r.section()? };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    /// Reads a checkpoint of `kind`, refusing it unless it was written under
    /// the `expected` configuration fingerprint.
    pub fn load(path: &Path, kind: &str, expected: &Fingerprint) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        let ckpt = Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))?;
        let incompatible = |message: String| Error::Compatibility { path: path.to_path_buf(), message };
        if ckpt.kind != kind {
            return Err(incompatible(format!("holds a {} model, expected {kind}", ckpt.kind)));
        }
        if &ckpt.fingerprint != expected {
            return Err(incompatible(format!("written under config {}, current config is {}", hex(&ckpt.fingerprint), hex(expected))));
        }
        Ok(ckpt)
    }

    fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
        records.iter().find(|r| r.name == name).ok_or_else(|| Error::Data(format!("checkpoint lacks record {name}")))
    }

    pub fn put_params(&mut self, store: &ParamStore<f32>) {
        self.params = store.iter().map(|(_, p)| Record::f32(p.name.clone(), p.value.shape(), p.value.data().to_vec())).collect();
    }

    /// Overwrites every parameter of `store` by name; the record set must
    /// match the store exactly.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!("checkpoint has {} parameters, model has {}", self.params.len(), store.len())));
        }
        for r in &self.params {
            let id = store.id(&r.name).ok_or_else(|| Error::Data(format!("model has no parameter {}", r.name)))?;
            let Values::F32(data) = &r.values else {
                return Err(Error::Data(format!("parameter {} is not 32-bit", r.name)));
            };
            store.set(id, Tensor::new(r.shape.clone(), data.clone())?)?;
        }
        Ok(())
    }

    pub fn put_stats(&mut self, prefix: &str, stats: &FeatureStats) {
        self.state.push(Record::f64(format!("{prefix}/mean"), stats.mean.clone()));
        self.state.push(Record::f64(format!("{prefix}/std"), stats.std.clone()));
    }

    pub fn stats(&self, prefix: &str) -> Result<FeatureStats> {
        let get = |field: &str| -> Result<Vec<f64>> {
            match &Self::find(&self.state, &format!("{prefix}/{field}"))?.values {
                Values::F64(v) => Ok(v.clone()),
                Values::F32(_) => Err(Error::Data(format!("{prefix}/{field} is not 64-bit"))),
            }
        };
        let (mean, std) = (get("mean")?, get("std")?);
        if mean.len() != std.len() {
            return Err(Error::Data(format!("{prefix} statistics have mismatched widths")));
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn put_flag(&mut self, name: &str, value: bool) {
        self.state.push(Record::f64(name, vec![if value { 1.0 } else { 0.0 }]));
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        match &Self::find(&self.state, name)?.values {
            Values::F64(v) if v.len() == 1 => Ok(v[0] != 0.0),
            _ => Err(Error::Data(format!("{name} is not a flag"))),
        }
    }

    /// Stores both Adam moments as `first/<param>` and `second/<param>`;
    /// the step counter is the checkpoint's step.
    pub fn put_optimizer(&mut self, store: &ParamStore<f32>, opt: &AdamState<f32>) {
        self.optimizer.clear();
        for (moment, values) in [("first", &opt.first), ("second", &opt.second)] {
            for ((_, p), v) in store.iter().zip(values) {
                self.optimizer.push(Record::f32(format!("{moment}/{}", p.name), p.value.shape(), v.clone()));
            }
        }
    }

    /// Rebuilds optimizer state for `store`, or `None` when none was saved.
    pub fn optimizer(&self, store: &ParamStore<f32>, config: AdamConfig) -> Result<Option<AdamState<f32>>> {
        if self.optimizer.is_empty() {
            return Ok(None);
        }
        let mut opt = AdamState::new(config, store);
        opt.step = self.step;
        for (moment, slots) in [("first", &mut opt.first), ("second", &mut opt.second)] {
            for ((_, p), slot) in store.iter().zip(slots.iter_mut()) {
                let r = Self::find(&self.optimizer, &format!("{moment}/{}", p.name))?;
                match &r.values {
                    Values::F32(v) if v.len() == slot.len() => slot.copy_from_slice(v),
                    other => {
                        return Err(Error::Data(format!(
                            "optimizer record {} holds {} values for {} parameters",
                            r.name,
                            other.len(),
                            slot.len()
                        )))
                    }
                }
            }
        }
        Ok(Some(opt))
    }
}
