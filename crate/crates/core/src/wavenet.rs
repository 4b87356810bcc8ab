//! Conditional WaveNet over 8-bit mu-law classes with local Mel and global
//! speaker/emotion conditioning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::matvec_acc;
use crate::autodiff::{init, softmax_into, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::conversion::to_tensor;
use crate::dsp::{mu_law_decode, mu_law_encode, Matrix, MelSpectrogram, Waveform, MU_LAW_CLASSES, MU_LAW_ZERO};
use crate::error::{diverged, invalid, shape_err, Error, Result};
use crate::rng::{self, Rng};
use crate::stats::FeatureStats;
use crate::{Real, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveNetConfig {
    pub cycles: usize,
    pub cycle_dilations: Vec<usize>,
    pub kernel: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub classes: usize,
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub speaker_embed_dim: usize,
    pub emotion_embed_dim: usize,
    pub mel_dim: usize,
    pub upsample_strides: Vec<usize>,
    /// Samples per training crop; a multiple of the hop.
    pub crop_samples: usize,
    pub adam: AdamConfig,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self {
            cycles: 4,
            cycle_dilations: vec![1, 2, 4, 8, 16, 32],
            kernel: 2,
            residual_channels: 256,
            gate_channels: 256,
            skip_channels: 256,
            classes: MU_LAW_CLASSES,
            num_speakers: 2,
            num_emotions: 6,
            speaker_embed_dim: 16,
            emotion_embed_dim: 16,
            mel_dim: 80,
            upsample_strides: vec![16, 16],
            crop_samples: 4096,
            adam: AdamConfig::vocoder(),
        }
    }
}

impl WaveNetConfig {
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.cycles).flat_map(|_| self.cycle_dilations.iter().copied()).collect()
    }

    pub fn layers(&self) -> usize {
        self.cycles * self.cycle_dilations.len()
    }

    /// Number of input positions a logit can see, itself included.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilations().iter().sum::<usize>() + 1
    }

    pub fn hop(&self) -> usize {
        self.upsample_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.cycles,
            self.cycle_dilations.len(),
            self.residual_channels,
            self.gate_channels,
            self.skip_channels,
            self.num_speakers,
            self.num_emotions,
            self.speaker_embed_dim,
            self.emotion_embed_dim,
            self.mel_dim,
        ];
        if dims.contains(&0) || self.cycle_dilations.contains(&0) || self.kernel < 2 {
            return Err(invalid!("WaveNet dimensions must be positive and the kernel at least 2"));
        }
        if self.classes != MU_LAW_CLASSES {
            return Err(invalid!("WaveNet predicts {MU_LAW_CLASSES} mu-law classes, not {}", self.classes));
        }
        if self.upsample_strides.is_empty() || self.upsample_strides.contains(&0) {
            return Err(invalid!("upsample strides must be positive"));
        }
        if self.crop_samples == 0 || self.crop_samples % self.hop() != 0 {
            return Err(invalid!("crop of {} samples is not a multiple of the hop {}", self.crop_samples, self.hop()));
        }
        Ok(())
    }
}

/// Speaker and emotion identity of an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalConditioning {
    pub speaker: usize,
    pub emotion: usize,
}

impl GlobalConditioning {
    pub fn new(speaker: usize, emotion: usize) -> Self {
        Self { speaker, emotion }
    }

    pub fn check(&self, num_speakers: usize, num_emotions: usize) -> Result<()> {
        if self.speaker >= num_speakers {
            return Err(Error::UnknownCode { code: self.speaker, limit: num_speakers });
        }
        if self.emotion >= num_emotions {
            return Err(Error::UnknownCode { code: self.emotion, limit: num_emotions });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct UpsampleStage {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

/// Transposed-convolution stack lifting Mel frames to sample resolution.
#[derive(Clone, Debug)]
pub(crate) struct Upsampler {
    mel_dim: usize,
    stages: Vec<UpsampleStage>,
}

impl Upsampler {
    pub(crate) fn new<T: Real>(store: &mut ParamStore<T>, mel_dim: usize, strides: &[usize]) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            let k = 2 * stride;
            // each output sample starts as the average of the two frames it straddles
            let w = Tensor::from_fn([mel_dim, mel_dim, k], |idx| {
                let (ci, co) = (idx / (mel_dim * k), idx / k % mel_dim);
                if ci == co {
                    T::of(stride as f64 / k as f64)
                } else {
                    T::zero()
                }
            });
            stages.push(UpsampleStage {
                w: store.add(format!("upsample{i}/w"), w)?,
                b: store.add(format!("upsample{i}/b"), Tensor::zeros([mel_dim, 1]))?,
                stride,
            });
        }
        Ok(Self { mel_dim, stages })
    }

    /// `[mel_dim, frames]` to `[mel_dim, frames * hop]`.
    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mel: Var) -> Result<Var> {
        if g.rows(mel) != self.mel_dim {
            return Err(shape_err!("conditioning has {} channels, expected {}", g.rows(mel), self.mel_dim));
        }
        let mut h = mel;
        for u in &self.stages {
            let (w, b) = (g.param(u.w), g.param(u.b));
            h = g.conv_transpose1d(h, w, u.stride)?;
            h = g.add_col(h, b)?;
        }
        Ok(h)
    }
}

/// Channel widths of a gated residual layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerDims {
    pub residual: usize,
    pub gate: usize,
    pub skip: usize,
    pub cond: usize,
    pub speaker: usize,
    pub emotion: usize,
    pub kernel: usize,
}

/// Dilated convolution, local and global conditioning, tanh-sigmoid gate,
/// skip and residual 1x1 outputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layer {
    dilation: usize,
    gate: usize,
    conv_w: ParamId,
    conv_b: ParamId,
    cond_w: ParamId,
    speaker_w: ParamId,
    emotion_w: ParamId,
    skip_w: ParamId,
    skip_b: ParamId,
    residual: Option<(ParamId, ParamId)>,
}

impl Layer {
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut Rng,
        d: &LayerDims,
        dilation: usize,
        with_residual: bool,
    ) -> Result<Self> {
        let p = |n: &str| format!("{prefix}/{n}");
        let (r, g2, k) = (d.residual, 2 * d.gate, d.kernel);
        let residual = if with_residual {
            Some((
                store.add(p("residual/w"), init::xavier(rng, &[r, d.gate, 1], d.gate, r))?,
                store.add(p("residual/b"), Tensor::zeros([r, 1]))?,
            ))
        } else {
            None
        };
        Ok(Self {
            dilation,
            gate: d.gate,
            conv_w: store.add(p("dilated/w"), init::xavier(rng, &[g2, r, k], r * k, g2))?,
            conv_b: store.add(p("dilated/b"), Tensor::zeros([g2, 1]))?,
            cond_w: store.add(p("local/w"), init::xavier(rng, &[g2, d.cond, 1], d.cond, g2))?,
            speaker_w: store.add(p("speaker/w"), init::xavier(rng, &[g2, d.speaker], d.speaker, g2))?,
            emotion_w: store.add(p("emotion/w"), init::xavier(rng, &[g2, d.emotion], d.emotion, g2))?,
            skip_w: store.add(p("skip/w"), init::xavier(rng, &[d.skip, d.gate, 1], d.gate, d.skip))?,
            skip_b: store.add(p("skip/b"), Tensor::zeros([d.skip, 1]))?,
            residual,
        })
    }

    /// Returns the skip contribution and, unless this is a last layer, the
    /// next residual stream. `embeds` are the speaker and emotion embedding
    /// columns.
    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        cond: Var,
        embeds: (Var, Var),
        causal: bool,
    ) -> Result<(Var, Option<Var>)> {
        let (w, b) = (g.param(self.conv_w), g.param(self.conv_b));
        let mut z = g.conv1d(x, w, self.dilation, causal)?;
        z = g.add_col(z, b)?;
        let cw = g.param(self.cond_w);
        let local = g.conv1d(cond, cw, 1, true)?;
        z = g.add(z, local)?;
        let (sw, ew) = (g.param(self.speaker_w), g.param(self.emotion_w));
        let a = g.matmul(sw, embeds.0)?;
        let e = g.matmul(ew, embeds.1)?;
        let global = g.add(a, e)?;
        z = g.add_col(z, global)?;
        let filt = g.slice_rows(z, 0, self.gate)?;
        let gate = g.slice_rows(z, self.gate, self.gate)?;
        let filt = g.tanh(filt)?;
        let gate = g.sigmoid(gate)?;
        let out = g.mul(filt, gate)?;

        let (sw, sb) = (g.param(self.skip_w), g.param(self.skip_b));
        let s = g.conv1d(out, sw, 1, true)?;
        let s = g.add_col(s, sb)?;
        let next = match self.residual {
            Some((rw, rb)) => {
                let (rw, rb) = (g.param(rw), g.param(rb));
                let r = g.conv1d(out, rw, 1, true)?;
                let r = g.add_col(r, rb)?;
                Some(g.add(x, r)?)
            }
            None => None,
        };
        Ok((s, next))
    }
}

/// Speaker and emotion embeddings as `[dim, 1]` columns.
pub(crate) fn embed_codes<T: Real>(g: &mut Graph<'_, T>, tables: (ParamId, ParamId), gc: GlobalConditioning) -> Result<(Var, Var)> {
    let st = g.param(tables.0);
    let et = g.param(tables.1);
    let se = g.gather_rows(st, &[gc.speaker])?;
    let ee = g.gather_rows(et, &[gc.emotion])?;
    Ok((g.transpose(se)?, g.transpose(ee)?))
}

/// ReLU, 1x1, ReLU, 1x1 over the summed skips.
pub(crate) fn skip_head<T: Real>(g: &mut Graph<'_, T>, skips: Var, head: &[(ParamId, ParamId); 2]) -> Result<Var> {
    let mut h = g.relu(skips)?;
    for (i, &(w, b)) in head.iter().enumerate() {
        let (w, b) = (g.param(w), g.param(b));
        h = g.conv1d(h, w, 1, true)?;
        h = g.add_col(h, b)?;
        if i == 0 {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Parameter layout, independent of precision.
#[derive(Clone, Debug)]
pub struct WaveNetNet {
    config: WaveNetConfig,
    embed: ParamId,
    speaker_table: ParamId,
    emotion_table: ParamId,
    upsample: Upsampler,
    layers: Vec<Layer>,
    head: [(ParamId, ParamId); 2],
}

/// Scale applied to the final head layer at initialization so the initial
/// predictive distribution is close to uniform.
const HEAD_INIT_SCALE: f64 = 0.1;

impl WaveNetNet {
    pub fn new<T: Real>(config: &WaveNetConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (r, s) = (c.residual_channels, c.skip_channels);
        let embed = store.add("input/embed", init::xavier(rng, &[r, c.classes], c.classes, r))?;
        let speaker_table = store.add("speaker/table", init::normal(rng, &[c.num_speakers, c.speaker_embed_dim], 0.1))?;
        let emotion_table = store.add("emotion/table", init::normal(rng, &[c.num_emotions, c.emotion_embed_dim], 0.1))?;

        let upsample = Upsampler::new(store, c.mel_dim, &c.upsample_strides)?;
        let dims = LayerDims {
            residual: r,
            gate: c.gate_channels,
            skip: s,
            cond: c.mel_dim,
            speaker: c.speaker_embed_dim,
            emotion: c.emotion_embed_dim,
            kernel: c.kernel,
        };
        let dilations = c.dilations();
        let mut layers = Vec::new();
        for (l, &dilation) in dilations.iter().enumerate() {
            layers.push(Layer::new(store, &format!("layer{l}"), rng, &dims, dilation, l + 1 < dilations.len())?);
        }

        let h1 = (store.add("head1/w", init::xavier(rng, &[s, s, 1], s, s))?, store.add("head1/b", Tensor::zeros([s, 1]))?);
        let mut w2: Tensor<T> = init::xavier(rng, &[c.classes, s, 1], s, c.classes);
        for v in w2.data_mut() {
            *v *= T::of(HEAD_INIT_SCALE);
        }
        let h2 = (store.add("head2/w", w2)?, store.add("head2/b", Tensor::zeros([c.classes, 1]))?);
        Ok(Self { config: c.clone(), embed, speaker_table, emotion_table, upsample, layers, head: [h1, h2] })
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.config
    }

    /// Parameters of the last head layer, which emit the logits.
    pub fn output_head(&self) -> (ParamId, ParamId) {
        self.head[1]
    }

    /// Upsamples normalized Mel `[mel_dim, frames]` to `[mel_dim, frames * hop]`.
    pub fn upsample<T: Real>(&self, g: &mut Graph<'_, T>, mel: Var) -> Result<Var> {
        self.upsample.forward(g, mel)
    }

    /// Teacher-forced logits `[T, classes]`; `inputs[t]` is the class of the
    /// previous sample and `cond` is upsampled conditioning `[mel_dim, T]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &[usize], cond: Var, gc: GlobalConditioning) -> Result<Var> {
        let c = &self.config;
        gc.check(c.num_speakers, c.num_emotions)?;
        if g.cols(cond) != inputs.len() {
            return Err(shape_err!("{} conditioning steps for {} inputs", g.cols(cond), inputs.len()));
        }
        let table = g.param(self.embed);
        let mut x = g.gather_cols(table, inputs)?;
        let embeds = embed_codes(g, (self.speaker_table, self.emotion_table), gc)?;
        let mut skips: Option<Var> = None;
        for layer in &self.layers {
            let (s, next) = layer.forward(g, x, cond, embeds, true)?;
            skips = Some(match skips {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
            if let Some(next) = next {
                x = next;
            }
        }
        let h = skip_head(g, skips.expect("at least one layer"), &self.head)?;
        g.transpose(h)
    }
}

/// Shifts target classes right by one, starting from `first`.
pub fn shifted_inputs(targets: &[usize], first: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(targets.len());
    if !targets.is_empty() {
        v.push(first);
        v.extend_from_slice(&targets[..targets.len() - 1]);
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Recompute the network over the receptive field at every step.
    Naive,
    /// Incremental evaluation from per-layer caches.
    Fast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub seed: u64,
    /// Keep every step's logits (for equivalence checks).
    pub record_logits: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { mode: SamplingMode::Fast, temperature: 1.0, seed: 0, record_logits: false }
    }
}

#[derive(Clone, Debug)]
pub struct Sampled {
    pub waveform: Waveform,
    pub classes: Vec<usize>,
    /// `steps x classes` when recorded, else empty.
    pub logits: Vec<f32>,
}

/// WaveNet vocoder with 32-bit parameters and the Mel statistics its
/// conditioning is normalized with.
#[derive(Clone, Debug)]
pub struct WaveNet {
    pub net: WaveNetNet,
    pub params: ParamStore<f32>,
    pub mel_stats: FeatureStats,
}

/// A waveform trimmed to whole frames together with its Mel frames.
pub(crate) fn frame_aligned(wav: &Waveform, mel: &MelSpectrogram, hop: usize) -> Result<(usize, Vec<f32>)> {
    if mel.hop_length() != hop {
        return Err(shape_err!("Mel hop {} does not match the vocoder hop {hop}", mel.hop_length()));
    }
    let frames = mel.frames().min(wav.len() / hop);
    if frames == 0 {
        return Err(invalid!("utterance shorter than one frame"));
    }
    Ok((frames, wav.samples()[..frames * hop].to_vec()))
}

/// Random frame-aligned crop `(start_frame, frames)` of at most `max_frames`.
pub(crate) fn crop_frames(rng: &mut Rng, frames: usize, max_frames: usize) -> (usize, usize) {
    if frames <= max_frames {
        (0, frames)
    } else {
        (rng::below(rng, frames - max_frames + 1), max_frames)
    }
}

impl WaveNet {
    pub fn new(config: &WaveNetConfig, rng: &mut Rng, mel_stats: FeatureStats) -> Result<Self> {
        if mel_stats.dim() != config.mel_dim {
            return Err(shape_err!("Mel statistics of width {} for {} channels", mel_stats.dim(), config.mel_dim));
        }
        let mut params = ParamStore::new();
        let net = WaveNetNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, mel_stats })
    }

    pub fn config(&self) -> &WaveNetConfig {
        self.net.config()
    }

    pub fn optimizer(&self) -> AdamState<f32> {
        AdamState::new(self.config().adam.clone(), &self.params)
    }

    fn cond_input(&self, mel: &Matrix) -> Result<Tensor<f32>> {
        Ok(to_tensor::<f32>(&self.mel_stats.normalize(mel)?).transpose())
    }

    /// Teacher-forced loss on frames `[start, start + n)`; returns the graph
    /// outputs through `f`.
    fn with_loss<R>(
        &self,
        wav: &Waveform,
        mel: &MelSpectrogram,
        gc: GlobalConditioning,
        crop: Option<(usize, usize)>,
        f: impl FnOnce(&Graph<'_, f32>, Var, Var, &[usize]) -> Result<R>,
    ) -> Result<R> {
        let hop = self.config().hop();
        let (frames, samples) = frame_aligned(wav, mel, hop)?;
        let (start, n) = crop.unwrap_or((0, frames));
        let classes = mu_law_encode(&Waveform::new(samples, wav.sample_rate())?)?;
        let first = if start == 0 { MU_LAW_ZERO } else { classes[start * hop - 1] };
        let targets = &classes[start * hop..(start + n) * hop];
        let inputs = shifted_inputs(targets, first);

        let mut g = Graph::with_params(&self.params);
        let m = g.input(self.cond_input(&mel.values.slice_rows(0, frames))?)?;
        let up = self.net.upsample(&mut g, m)?;
        let cond = g.slice_cols(up, start * hop, n * hop)?;
        let logits = self.net.forward(&mut g, &inputs, cond, gc)?;
        let loss = g.cross_entropy(logits, targets)?;
        f(&g, logits, loss, targets)
    }

    /// One Adam update on a random frame-aligned crop; returns the loss
    /// before the update.
    pub fn train_step(
        &mut self,
        opt: &mut AdamState<f32>,
        rng: &mut Rng,
        wav: &Waveform,
        mel: &MelSpectrogram,
        gc: GlobalConditioning,
    ) -> Result<f64> {
        let hop = self.config().hop();
        let frames = mel.frames().min(wav.len() / hop);
        let crop = crop_frames(rng, frames, self.config().crop_samples / hop);
        let (loss, grads) =
            self.with_loss(wav, mel, gc, Some(crop), |g, _, l, _| Ok((g.scalar(l).f64(), g.backward(l)?))).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("WaveNet loss {loss}")));
        }
        opt.update(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Teacher-forced `(loss, argmax accuracy)` over the whole utterance.
    pub fn evaluate(&self, wav: &Waveform, mel: &MelSpectrogram, gc: GlobalConditioning) -> Result<(f64, f64)> {
        self.with_loss(wav, mel, gc, None, |g, logits, loss, targets| {
            let c = g.cols(logits);
            let v = g.value(logits);
            let hits = targets
                .iter()
                .enumerate()
                .filter(|&(t, &y)| {
                    let row = &v[t * c..(t + 1) * c];
                    let arg = (0..c).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                    arg == y
                })
                .count();
            Ok((g.scalar(loss).f64(), hits as f64 / targets.len() as f64))
        })
    }

    /// Teacher-forced logits `[T, classes]` for explicit input classes and
    /// already-upsampled normalized conditioning `[mel_dim, T]`.
    pub fn logits(&self, inputs: &[usize], cond: &Tensor<f32>, gc: GlobalConditioning) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let c = g.input(cond.clone())?;
        let l = self.net.forward(&mut g, inputs, c, gc)?;
        Ok(g.tensor(l))
    }

    /// Normalized, upsampled conditioning `[mel_dim, frames * hop]`.
    pub fn conditioning(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let m = g.input(self.cond_input(&mel.values)?)?;
        let up = self.net.upsample(&mut g, m)?;
        Ok(g.tensor(up))
    }

    /// Autoregressive generation of `frames * hop` samples.
    pub fn sample(&self, mel: &MelSpectrogram, gc: GlobalConditioning, opts: &SampleOptions) -> Result<Sampled> {
        let c = self.config();
        gc.check(c.num_speakers, c.num_emotions)?;
        if !(opts.temperature > 0.0) {
            return Err(invalid!("temperature must be positive"));
        }
        let cond = self.conditioning(mel)?;
        let steps = cond.cols();
        let mut rng = rng::seeded(opts.seed);
        let mut classes = Vec::with_capacity(steps);
        let mut logits_log = Vec::new();
        let mut probs = vec![0f64; c.classes];
        let mut scaled = vec![0f64; c.classes];
        let mut draw = |logits: &[f32], classes: &mut Vec<usize>, rng: &mut Rng| {
            for (s, &l) in scaled.iter_mut().zip(logits) {
                *s = l as f64 / opts.temperature;
            }
            softmax_into(&scaled, &mut probs);
            let u = rng::unit(rng);
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            classes.push(pick);
        };
        match opts.mode {
            SamplingMode::Naive => {
                let field = c.receptive_field();
                let cond_t = cond.transpose();
                for t in 0..steps {
                    let lo = (t + 1).saturating_sub(field);
                    let mut inputs = Vec::with_capacity(t + 1 - lo);
                    for s in lo..=t {
                        inputs.push(if s == 0 { MU_LAW_ZERO } else { classes[s - 1] });
                    }
                    let window =
                        Tensor::new([t + 1 - lo, c.mel_dim], cond_t.data()[lo * c.mel_dim..(t + 1) * c.mel_dim].to_vec())?.transpose();
                    let l = self.logits(&inputs, &window, gc)?;
                    let last = l.row(l.rows() - 1);
                    if opts.record_logits {
                        logits_log.extend_from_slice(last);
                    }
                    draw(last, &mut classes, &mut rng);
                }
            }
            SamplingMode::Fast => {
                let mut state = FastState::new(self, gc)?;
                let mut column = vec![0f32; c.mel_dim];
                let mut out = vec![0f32; c.classes];
                for t in 0..steps {
                    for (ch, v) in column.iter_mut().enumerate() {
                        *v = cond.at(ch, t);
                    }
                    let prev = if t == 0 { MU_LAW_ZERO } else { classes[t - 1] };
                    state.step(prev, &column, &mut out);
                    if opts.record_logits {
                        logits_log.extend_from_slice(&out);
                    }
                    draw(&out, &mut classes, &mut rng);
                }
            }
        }
        let waveform = mu_law_decode(&classes, SAMPLE_RATE)?;
        Ok(Sampled { waveform, classes, logits: logits_log })
    }
}

struct FastLayer {
    dilation: usize,
    /// `kernel` matrices `[2G, R]`, oldest tap first.
    taps: Vec<Vec<f32>>,
    bias: Vec<f32>,
    cond_w: Vec<f32>,
    skip_w: Vec<f32>,
    skip_b: Vec<f32>,
    residual: Option<(Vec<f32>, Vec<f32>)>,
    /// Layer inputs of the last `(kernel - 1) * dilation` steps, ring-indexed by time.
    history: Vec<f32>,
}

/// Per-layer caches for incremental generation.
struct FastState<'m> {
    model: &'m WaveNet,
    layers: Vec<FastLayer>,
    head: [(Vec<f32>, Vec<f32>); 2],
    t: usize,
    x: Vec<f32>,
    z: Vec<f32>,
    gated: Vec<f32>,
    skip: Vec<f32>,
    hidden: Vec<f32>,
}

impl<'m> FastState<'m> {
    fn new(model: &'m WaveNet, gc: GlobalConditioning) -> Result<Self> {
        let c = model.config();
        let p = |id: ParamId| model.params.get(id).data().to_vec();
        let (r, g2) = (c.residual_channels, 2 * c.gate_channels);
        let se = model.params.get(model.net.speaker_table).row(gc.speaker).to_vec();
        let ee = model.params.get(model.net.emotion_table).row(gc.emotion).to_vec();
        let mut layers = Vec::new();
        for l in &model.net.layers {
            let w = model.params.get(l.conv_w).data();
            let taps = (0..c.kernel).map(|k| (0..g2 * r).map(|i| w[i * c.kernel + k]).collect()).collect();
            let mut bias = p(l.conv_b);
            matvec_acc(g2, c.speaker_embed_dim, model.params.get(l.speaker_w).data(), &se, &mut bias);
            matvec_acc(g2, c.emotion_embed_dim, model.params.get(l.emotion_w).data(), &ee, &mut bias);
            layers.push(FastLayer {
                dilation: l.dilation,
                taps,
                bias,
                cond_w: p(l.cond_w),
                skip_w: p(l.skip_w),
                skip_b: p(l.skip_b),
                residual: l.residual.map(|(w, b)| (p(w), p(b))),
                history: vec![0.0; (c.kernel - 1) * l.dilation * r],
            });
        }
        let head = [(p(model.net.head[0].0), p(model.net.head[0].1)), (p(model.net.head[1].0), p(model.net.head[1].1))];
        Ok(Self {
            model,
            layers,
            head,
            t: 0,
            x: vec![0.0; r],
            z: vec![0.0; g2],
            gated: vec![0.0; c.gate_channels],
            skip: vec![0.0; c.skip_channels],
            hidden: vec![0.0; c.skip_channels],
        })
    }

    fn step(&mut self, prev_class: usize, cond: &[f32], logits: &mut [f32]) {
        let c = self.model.config();
        let (r, gch, k) = (c.residual_channels, c.gate_channels, c.kernel);
        let embed = self.model.params.get(self.model.net.embed).data();
        for (i, v) in self.x.iter_mut().enumerate() {
            *v = embed[i * c.classes + prev_class];
        }
        self.skip.fill(0.0);
        let t = self.t;
        for layer in &mut self.layers {
            let d = layer.dilation;
            let span = (k - 1) * d;
            self.z.copy_from_slice(&layer.bias);
            for (tap, w) in layer.taps.iter().enumerate() {
                let back = (k - 1 - tap) * d;
                if back == 0 {
                    matvec_acc(2 * gch, r, w, &self.x, &mut self.z);
                } else if t >= back {
                    let slot = (t - back) % span;
                    matvec_acc(2 * gch, r, w, &layer.history[slot * r..(slot + 1) * r], &mut self.z);
                }
            }
            matvec_acc(2 * gch, c.mel_dim, &layer.cond_w, cond, &mut self.z);
            for i in 0..gch {
                self.gated[i] = self.z[i].tanh() * crate::autodiff::sigmoid(self.z[gch + i]);
            }
            for (s, b) in self.skip.iter_mut().zip(&layer.skip_b) {
                *s += *b;
            }
            matvec_acc(c.skip_channels, gch, &layer.skip_w, &self.gated, &mut self.skip);
            let slot = t % span;
            layer.history[slot * r..(slot + 1) * r].copy_from_slice(&self.x);
            if let Some((w, b)) = &layer.residual {
                for (x, bb) in self.x.iter_mut().zip(b) {
                    *x += *bb;
                }
                matvec_acc(r, gch, w, &self.gated, &mut self.x);
            }
        }
        let s = c.skip_channels;
        for v in &mut self.skip {
            *v = v.max(0.0);
        }
        self.hidden.copy_from_slice(&self.head[0].1);
        matvec_acc(s, s, &self.head[0].0, &self.skip, &mut self.hidden);
        for v in &mut self.hidden {
            *v = v.max(0.0);
        }
        logits.copy_from_slice(&self.head[1].1);
        matvec_acc(c.classes, s, &self.head[1].0, &self.hidden, logits);
        self.t += 1;
    }
}
