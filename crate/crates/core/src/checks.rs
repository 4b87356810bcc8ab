//! Finite-difference checks of tiny end-to-end models in 64-bit, the model
//! counterpart of [`crate::autodiff::suite`].

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::suite::PrimitiveCheck;
use crate::autodiff::{grad_check, GradCheckOptions, ParamStore, Tensor};
use crate::conversion::{ConversionConfig, ConversionNet};
use crate::dsp::Matrix;
use crate::error::Result;
use crate::flow::{FlowConfig, FlowNet};
use crate::rng::{self, Rng};
use crate::wavenet::{shifted_inputs, GlobalConditioning, WaveNetConfig, WaveNetNet};
use num_traits::Float;

/// Relative-error bound every model check is held to.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Moves zero-initialized parameters (biases, zero heads) off zero so their
/// gradients are exercised.
fn unzero(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng::uniform(rng, -0.3, 0.3);
            }
        }
    }
}

fn normal(rng: &mut Rng, shape: [usize; 2], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::normal(rng, 0.0, std))
}

fn conversion(seed: u64, use_ppg: bool) -> Result<PrimitiveCheck> {
    let cfg = ConversionConfig {
        num_emotions: 3,
        emotion_embed_dim: 4,
        dense_layers: 2,
        dense_units: 5,
        blstm_layers: 1,
        blstm_units: 3,
        use_ppg,
        mel_dim: 4,
        ppg_dim: 3,
        ..ConversionConfig::default()
    };
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let net = ConversionNet::new(&cfg, &mut store, &mut r)?;
    unzero(&mut store, &mut r);
    let input = Matrix::from_fn(5, cfg.input_dim(), |i, c| Float::sin((i * 7 + c * 3) as f64 * 0.37));
    let target = Matrix::from_fn(5, cfg.mel_dim, |i, c| Float::cos((i + c) as f64 * 0.91) * 2.0);
    let report = grad_check(&store, |g| net.loss(g, &input, &target, 2), &GradCheckOptions::default())?;
    let name = if use_ppg { "conversion (Mel+PPG)" } else { "conversion (Mel only)" };
    Ok(PrimitiveCheck { name, tolerance: MODEL_TOLERANCE, report })
}

fn wavenet(seed: u64) -> Result<PrimitiveCheck> {
    let cfg = WaveNetConfig {
        cycles: 2,
        cycle_dilations: vec![1, 2, 4],
        residual_channels: 6,
        gate_channels: 5,
        skip_channels: 7,
        num_speakers: 2,
        num_emotions: 3,
        speaker_embed_dim: 3,
        emotion_embed_dim: 2,
        mel_dim: 4,
        upsample_strides: vec![2, 3],
        crop_samples: 24,
        ..WaveNetConfig::default()
    };
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let net = WaveNetNet::new(&cfg, &mut store, &mut r)?;
    unzero(&mut store, &mut r);
    let mel = normal(&mut r, [4, 3], 1.0);
    let targets: Vec<usize> = (0..18).map(|_| rng::below(&mut r, cfg.classes)).collect();
    let inputs = shifted_inputs(&targets, 128);
    let gc = GlobalConditioning::new(1, 2);
    let report = grad_check(
        &store,
        |g| {
            let m = g.input(mel.clone())?;
            let cond = net.upsample(g, m)?;
            let logits = net.forward(g, &inputs, cond, gc)?;
            g.cross_entropy(logits, &targets)
        },
        &GradCheckOptions::default(),
    )?;
    Ok(PrimitiveCheck { name: "wavenet", tolerance: MODEL_TOLERANCE, report })
}

fn flowavenet(seed: u64) -> Result<PrimitiveCheck> {
    let cfg = FlowConfig {
        blocks: 2,
        flows_per_block: 2,
        coupling_layers: 2,
        residual_channels: 6,
        gate_channels: 5,
        skip_channels: 7,
        num_speakers: 2,
        num_emotions: 3,
        speaker_embed_dim: 3,
        emotion_embed_dim: 2,
        mel_dim: 3,
        upsample_strides: vec![2, 4],
        crop_samples: 64,
        ..FlowConfig::default()
    };
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let net = FlowNet::new(&cfg, &mut store, &mut r)?;
    // ActNorm scales near one, everything else moved off its initial value
    for id in store.ids().collect::<Vec<_>>() {
        let is_scale = store.name(id).ends_with("actnorm/scale");
        for v in store.get_mut(id).data_mut() {
            let n: f64 = rng::normal(&mut r, 0.0, 0.2);
            *v = if is_scale { Float::exp(n) } else { *v + n };
        }
    }
    let mel = normal(&mut r, [3, 2], 1.0);
    let x = normal(&mut r, [1, 16], 0.5);
    let gc = GlobalConditioning::new(1, 2);
    let report = grad_check(
        &store,
        |g| {
            let m = g.input(mel.clone())?;
            let cond = net.upsample(g, m)?;
            let xv = g.input(x.clone())?;
            net.nll(g, xv, cond, gc)
        },
        &GradCheckOptions::default(),
    )?;
    Ok(PrimitiveCheck { name: "flowavenet", tolerance: MODEL_TOLERANCE, report })
}

/// Gradient checks of the tiny conversion (both input variants), WaveNet
/// and FloWaveNet models.
pub fn model_checks(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    Ok(vec![conversion(seed, false)?, conversion(seed + 1, true)?, wavenet(seed + 2)?, flowavenet(seed + 3)?])
}
