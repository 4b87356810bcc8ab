//! Saving and restoring the three trained models.

use std::path::Path;

use mtevc_core::autodiff::AdamState;
use mtevc_core::conversion::ConversionModel;
use mtevc_core::flow::FloWaveNet;
use mtevc_core::rng;
use mtevc_core::wavenet::WaveNet;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;

pub const CONVERSION: &str = "conversion";
pub const WAVENET: &str = "wavenet";
pub const FLOWAVENET: &str = "flowavenet";

const ACTNORM_FLAG: &str = "flow/actnorm_initialized";

/// A model restored from disk with its optimizer state, if saved.
pub struct Restored<M> {
    pub model: M,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
}

fn base(kind: &str, cfg: &RunConfig, step: u64) -> Checkpoint {
    Checkpoint::new(kind, cfg.fingerprint(), step)
}

pub fn conversion_checkpoint(cfg: &RunConfig, m: &ConversionModel, opt: Option<&AdamState<f32>>, step: u64) -> Checkpoint {
    let mut c = base(CONVERSION, cfg, step);
    c.put_params(&m.params);
    c.put_stats("input", &m.input_stats);
    c.put_stats("target", &m.target_stats);
    if let Some(o) = opt {
        c.put_optimizer(&m.params, o);
    }
    c
}

/// Baseline (no-PPG) checkpoints are recognized by their input width.
pub fn load_conversion(path: &Path, cfg: &RunConfig) -> Result<Restored<ConversionModel>> {
    let ckpt = Checkpoint::load(path, CONVERSION, &cfg.fingerprint())?;
    let (input, target) = (ckpt.stats("input")?, ckpt.stats("target")?);
    let mut conv_cfg = cfg.conversion.clone();
    conv_cfg.use_ppg = input.dim() != conv_cfg.mel_dim;
    let mut model = ConversionModel::new(&conv_cfg, &mut rng::seeded(0), input, target)?;
    ckpt.restore_params(&mut model.params)?;
    let optimizer = ckpt.optimizer(&model.params, conv_cfg.adam.clone())?;
    Ok(Restored { model, optimizer, step: ckpt.step })
}

pub fn wavenet_checkpoint(cfg: &RunConfig, m: &WaveNet, opt: Option<&AdamState<f32>>, step: u64) -> Checkpoint {
    let mut c = base(WAVENET, cfg, step);
    c.put_params(&m.params);
    c.put_stats("mel", &m.mel_stats);
    if let Some(o) = opt {
        c.put_optimizer(&m.params, o);
    }
    c
}

pub fn load_wavenet(path: &Path, cfg: &RunConfig) -> Result<Restored<WaveNet>> {
    let ckpt = Checkpoint::load(path, WAVENET, &cfg.fingerprint())?;
    let mut model = WaveNet::new(&cfg.wavenet, &mut rng::seeded(0), ckpt.stats("mel")?)?;
    ckpt.restore_params(&mut model.params)?;
    let optimizer = ckpt.optimizer(&model.params, cfg.wavenet.adam.clone())?;
    Ok(Restored { model, optimizer, step: ckpt.step })
}

pub fn flow_checkpoint(cfg: &RunConfig, m: &FloWaveNet, opt: Option<&AdamState<f32>>, step: u64) -> Checkpoint {
    let mut c = base(FLOWAVENET, cfg, step);
    c.put_params(&m.params);
    c.put_stats("mel", &m.mel_stats);
    c.put_flag(ACTNORM_FLAG, m.actnorm_initialized);
    if let Some(o) = opt {
        c.put_optimizer(&m.params, o);
    }
    c
}

pub fn load_flow(path: &Path, cfg: &RunConfig) -> Result<Restored<FloWaveNet>> {
    let ckpt = Checkpoint::load(path, FLOWAVENET, &cfg.fingerprint())?;
    let mut model = FloWaveNet::new(&cfg.flow, &mut rng::seeded(0), ckpt.stats("mel")?)?;
    ckpt.restore_params(&mut model.params)?;
    model.actnorm_initialized = ckpt.flag(ACTNORM_FLAG)?;
    let optimizer = ckpt.optimizer(&model.params, cfg.flow.adam.clone())?;
    Ok(Restored { model, optimizer, step: ckpt.step })
}
