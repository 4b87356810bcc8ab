//! Conditional FloWaveNet: context blocks of squeeze followed by flows of
//! ActNorm, affine coupling and change order, trained by exact likelihood and
//! sampled in parallel through the inverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::conversion::to_tensor;
use crate::dsp::{Matrix, MelSpectrogram, Waveform};
use crate::error::{diverged, invalid, shape_err, Error, Result};
use crate::rng::{self, Rng};
use crate::stats::FeatureStats;
use crate::wavenet::{crop_frames, embed_codes, frame_aligned, skip_head, GlobalConditioning, Layer, LayerDims, Upsampler};
use crate::{Real, SAMPLE_RATE};

/// Smallest standard deviation ActNorm initialization divides by.
pub const ACTNORM_STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub flows_per_block: usize,
    /// Gated layers in each coupling network; layer `i` has dilation `2^i`.
    pub coupling_layers: usize,
    pub kernel: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub speaker_embed_dim: usize,
    pub emotion_embed_dim: usize,
    pub mel_dim: usize,
    pub upsample_strides: Vec<usize>,
    pub crop_samples: usize,
    /// Standard deviation of the latent drawn at sampling time.
    pub prior_scale: f64,
    pub adam: AdamConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            flows_per_block: 6,
            coupling_layers: 2,
            kernel: 3,
            residual_channels: 256,
            gate_channels: 256,
            skip_channels: 256,
            num_speakers: 2,
            num_emotions: 6,
            speaker_embed_dim: 16,
            emotion_embed_dim: 16,
            mel_dim: 80,
            upsample_strides: vec![16, 16],
            crop_samples: 4096,
            prior_scale: 0.8,
            adam: AdamConfig::vocoder(),
        }
    }
}

impl FlowConfig {
    pub fn hop(&self) -> usize {
        self.upsample_strides.iter().product()
    }

    /// Waveform lengths must be multiples of this.
    pub fn length_multiple(&self) -> usize {
        1 << self.blocks
    }

    /// Audio channels inside block `b` (counting from 0), after its squeeze.
    pub fn channels(&self, block: usize) -> usize {
        2 << block
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.blocks,
            self.flows_per_block,
            self.coupling_layers,
            self.residual_channels,
            self.gate_channels,
            self.skip_channels,
            self.num_speakers,
            self.num_emotions,
            self.speaker_embed_dim,
            self.emotion_embed_dim,
            self.mel_dim,
        ];
        if dims.contains(&0) || self.kernel % 2 == 0 {
            return Err(invalid!("flow dimensions must be positive and the coupling kernel odd"));
        }
        if self.blocks > 16 {
            return Err(invalid!("{} context blocks is more than the supported 16", self.blocks));
        }
        if self.upsample_strides.is_empty() || self.upsample_strides.contains(&0) {
            return Err(invalid!("upsample strides must be positive"));
        }
        if self.hop() % self.length_multiple() != 0 {
            return Err(invalid!("hop {} is not a multiple of 2^{} blocks", self.hop(), self.blocks));
        }
        if self.crop_samples == 0 || self.crop_samples % self.hop() != 0 {
            return Err(invalid!("crop of {} samples is not a multiple of the hop {}", self.crop_samples, self.hop()));
        }
        if !(self.prior_scale > 0.0) {
            return Err(invalid!("prior scale must be positive"));
        }
        Ok(())
    }
}

/// Source flat index of each output entry when squeezing `[c, t]`.
///
/// Output channel `2i + j` at time `u` holds input channel `i` at time
/// `2u + j`.
fn squeeze_source(c: usize, t: usize) -> Vec<u32> {
    let half = t / 2;
    let mut src = Vec::with_capacity(c * t);
    for i in 0..c {
        for j in 0..2 {
            for u in 0..half {
                src.push((i * t + 2 * u + j) as u32);
            }
        }
    }
    src
}

/// `[C, T]` to `[2C, T/2]`, stacking each pair of neighbouring samples on
/// the channel axis.
pub fn squeeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, t) = (x.rows(), x.cols());
    if t % 2 != 0 {
        return Err(shape_err!("cannot squeeze odd length {t}"));
    }
    let v = x.data();
    let data = squeeze_source(c, t).iter().map(|&i| v[i as usize]).collect();
    Tensor::new([2 * c, t / 2], data)
}

/// Inverse of [`squeeze`].
pub fn unsqueeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c2, half) = (x.rows(), x.cols());
    if c2 % 2 != 0 {
        return Err(shape_err!("cannot unsqueeze {c2} channels"));
    }
    let v = x.data();
    let mut out = vec![T::zero(); v.len()];
    for (o, &i) in squeeze_source(c2 / 2, 2 * half).iter().enumerate() {
        out[i as usize] = v[o];
    }
    Tensor::new([c2 / 2, 2 * half], out)
}

fn halves<T: Real>(x: &Tensor<T>) -> Result<(&[T], &[T], usize)> {
    let c = x.rows();
    if c % 2 != 0 {
        return Err(shape_err!("cannot split {c} channels in halves"));
    }
    let (a, b) = x.data().split_at(x.len() / 2);
    Ok((a, b, c / 2))
}

/// Swaps the first and second channel halves. An involution.
pub fn change_order<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b, _) = halves(x)?;
    let mut data = Vec::with_capacity(x.len());
    data.extend_from_slice(b);
    data.extend_from_slice(a);
    Tensor::new(x.shape().to_vec(), data)
}

fn check_scale<T: Real>(scale: &[T]) -> Result<()> {
    match scale.iter().position(|s| *s == T::zero() || !s.is_finite()) {
        Some(c) => Err(Error::Singularity(format!("ActNorm scale of channel {c} is {}", scale[c]))),
        None => Ok(()),
    }
}

/// `y = scale * x + bias` per channel; returns `y` and `T * sum ln|scale|`.
pub fn actnorm_forward<T: Real>(x: &Tensor<T>, scale: &[T], bias: &[T]) -> Result<(Tensor<T>, f64)> {
    let (c, t) = (x.rows(), x.cols());
    if scale.len() != c || bias.len() != c {
        return Err(shape_err!("ActNorm of {c} channels with {} scales and {} biases", scale.len(), bias.len()));
    }
    check_scale(scale)?;
    let data = x.data().iter().enumerate().map(|(i, &v)| scale[i / t] * v + bias[i / t]).collect();
    let logdet = t as f64 * scale.iter().map(|s| Float::ln(s.f64().abs())).sum::<f64>();
    Ok((Tensor::new([c, t], data)?, logdet))
}

pub fn actnorm_inverse<T: Real>(y: &Tensor<T>, scale: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (c, t) = (y.rows(), y.cols());
    if scale.len() != c || bias.len() != c {
        return Err(shape_err!("ActNorm of {c} channels with {} scales and {} biases", scale.len(), bias.len()));
    }
    check_scale(scale)?;
    let data = y.data().iter().enumerate().map(|(i, &v)| (v - bias[i / t]) / scale[i / t]).collect();
    Tensor::new([c, t], data)
}

/// Scale and bias that give every channel of `x` zero mean and unit
/// variance.
pub fn actnorm_init<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let t = x.cols();
    let mut scale = Vec::with_capacity(x.rows());
    let mut bias = Vec::with_capacity(x.rows());
    for c in 0..x.rows() {
        let row = x.row(c);
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v.f64() - mean) * (v.f64() - mean)).sum::<f64>() / t as f64;
        let s = 1.0 / Float::sqrt(var).max(ACTNORM_STD_FLOOR);
        scale.push(T::of(s));
        bias.push(T::of(-mean * s));
    }
    (scale, bias)
}

/// Keeps the first half and maps the second to `x_b * exp(log_s) + m`.
/// Returns the output and `sum(log_s)`.
pub fn affine_forward<T: Real>(x: &Tensor<T>, log_s: &Tensor<T>, m: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
    let (a, b, _) = halves(x)?;
    if log_s.len() != b.len() || m.len() != b.len() {
        return Err(shape_err!("coupling of {:?} with scale {:?} and shift {:?}", x.shape(), log_s.shape(), m.shape()));
    }
    let mut data = a.to_vec();
    data.extend(b.iter().zip(log_s.data()).zip(m.data()).map(|((&v, &s), &m)| v * s.exp() + m));
    let logdet = log_s.data().iter().map(|s| s.f64()).sum();
    Ok((Tensor::new(x.shape().to_vec(), data)?, logdet))
}

pub fn affine_inverse<T: Real>(y: &Tensor<T>, log_s: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b, _) = halves(y)?;
    if log_s.len() != b.len() || m.len() != b.len() {
        return Err(shape_err!("coupling of {:?} with scale {:?} and shift {:?}", y.shape(), log_s.shape(), m.shape()));
    }
    let mut data = a.to_vec();
    data.extend(b.iter().zip(log_s.data()).zip(m.data()).map(|((&v, &s), &m)| (v - m) * (-s).exp()));
    Tensor::new(y.shape().to_vec(), data)
}

/// `ln N(z; 0, I)` summed over every entry.
pub fn gaussian_log_density<T: Real>(z: &[T]) -> f64 {
    let ln2pi = Float::ln(core::f64::consts::TAU);
    -0.5 * z.iter().map(|v| v.f64() * v.f64() + ln2pi).sum::<f64>()
}

/// Sample-rate conditioning squeezed once per context block, so level `k`
/// is `[mel_dim * 2^(k+1), T / 2^(k+1)]`.
#[derive(Clone, Debug)]
pub struct ConditioningPyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Real> ConditioningPyramid<T> {
    pub fn new(cond: &Tensor<T>, blocks: usize) -> Result<Self> {
        let mut levels = Vec::with_capacity(blocks);
        let mut c = squeeze(cond)?;
        for _ in 1..blocks {
            let next = squeeze(&c)?;
            levels.push(c);
            c = next;
        }
        levels.push(c);
        Ok(Self { levels })
    }

    pub fn level(&self, block: usize) -> &Tensor<T> {
        &self.levels[block]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// The running representation and the log-determinant accumulated so far.
#[derive(Clone, Debug)]
pub struct FlowState<T> {
    pub x: Tensor<T>,
    pub logdet: f64,
}

#[derive(Clone, Debug)]
struct Coupling {
    front: (ParamId, ParamId),
    layers: Vec<Layer>,
    head: [(ParamId, ParamId); 2],
    half: usize,
}

#[derive(Clone, Debug)]
struct Flow {
    scale: ParamId,
    bias: ParamId,
    coupling: Coupling,
}

/// Parameter layout, independent of precision.
#[derive(Clone, Debug)]
pub struct FlowNet {
    config: FlowConfig,
    upsample: Upsampler,
    speaker_table: ParamId,
    emotion_table: ParamId,
    blocks: Vec<Vec<Flow>>,
}

impl FlowNet {
    pub fn new<T: Real>(config: &FlowConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let upsample = Upsampler::new(store, c.mel_dim, &c.upsample_strides)?;
        let speaker_table = store.add("speaker/table", init::normal(rng, &[c.num_speakers, c.speaker_embed_dim], 0.1))?;
        let emotion_table = store.add("emotion/table", init::normal(rng, &[c.num_emotions, c.emotion_embed_dim], 0.1))?;
        let (r, s, k) = (c.residual_channels, c.skip_channels, c.kernel);
        let mut blocks = Vec::with_capacity(c.blocks);
        for b in 0..c.blocks {
            let ch = c.channels(b);
            let half = ch / 2;
            let dims = LayerDims {
                residual: r,
                gate: c.gate_channels,
                skip: s,
                cond: c.mel_dim * ch,
                speaker: c.speaker_embed_dim,
                emotion: c.emotion_embed_dim,
                kernel: k,
            };
            let mut flows = Vec::with_capacity(c.flows_per_block);
            for f in 0..c.flows_per_block {
                let p = |n: &str| format!("block{b}/flow{f}/{n}");
                let scale = store.add(p("actnorm/scale"), Tensor::full([ch, 1], T::one()))?;
                let bias = store.add(p("actnorm/bias"), Tensor::zeros([ch, 1]))?;
                let front = (
                    store.add(p("front/w"), init::xavier(rng, &[r, half, k], half * k, r))?,
                    store.add(p("front/b"), Tensor::zeros([r, 1]))?,
                );
                let mut layers = Vec::with_capacity(c.coupling_layers);
                for l in 0..c.coupling_layers {
                    let last = l + 1 == c.coupling_layers;
                    layers.push(Layer::new(store, &p(&format!("layer{l}")), rng, &dims, 1 << l, !last)?);
                }
                // zero output layer: every flow starts as the identity
                let head = [
                    (store.add(p("head1/w"), init::xavier(rng, &[s, s, 1], s, s))?, store.add(p("head1/b"), Tensor::zeros([s, 1]))?),
                    (store.add(p("head2/w"), Tensor::zeros([ch, s, 1]))?, store.add(p("head2/b"), Tensor::zeros([ch, 1]))?),
                ];
                flows.push(Flow { scale, bias, coupling: Coupling { front, layers, head, half } });
            }
            blocks.push(flows);
        }
        Ok(Self { config: c.clone(), upsample, speaker_table, emotion_table, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    /// ActNorm `(scale, bias)` of every flow in forward order.
    pub fn actnorm_params(&self) -> Vec<(ParamId, ParamId)> {
        self.blocks.iter().flatten().map(|f| (f.scale, f.bias)).collect()
    }

    /// Zero-initialized output layers `(weight, bias)` of every coupling.
    pub fn coupling_heads(&self) -> Vec<(ParamId, ParamId)> {
        self.blocks.iter().flatten().map(|f| f.coupling.head[1]).collect()
    }

    /// Upsamples normalized Mel `[mel_dim, frames]` to `[mel_dim, frames * hop]`.
    pub fn upsample<T: Real>(&self, g: &mut Graph<'_, T>, mel: Var) -> Result<Var> {
        self.upsample.forward(g, mel)
    }

    fn tables(&self) -> (ParamId, ParamId) {
        (self.speaker_table, self.emotion_table)
    }

    fn flow(&self, block: usize, flow: usize) -> Result<&Flow> {
        self.blocks.get(block).and_then(|b| b.get(flow)).ok_or_else(|| invalid!("no flow {flow} in block {block}"))
    }

    /// Non-causal WaveNet over the kept half; returns `(log_s, m)`.
    fn coupling_net<T: Real>(&self, g: &mut Graph<'_, T>, c: &Coupling, xa: Var, cond: Var, embeds: (Var, Var)) -> Result<(Var, Var)> {
        let (w, b) = (g.param(c.front.0), g.param(c.front.1));
        let h = g.conv1d(xa, w, 1, false)?;
        let h = g.add_col(h, b)?;
        let mut x = g.relu(h)?;
        let mut skips: Option<Var> = None;
        for layer in &c.layers {
            let (s, next) = layer.forward(g, x, cond, embeds, false)?;
            skips = Some(match skips {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
            if let Some(next) = next {
                x = next;
            }
        }
        let out = skip_head(g, skips.expect("at least one layer"), &c.head)?;
        Ok((g.slice_rows(out, 0, c.half)?, g.slice_rows(out, c.half, c.half)?))
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>, cond: &Tensor<T>, gc: GlobalConditioning) -> Result<()> {
        let c = &self.config;
        gc.check(c.num_speakers, c.num_emotions)?;
        if x.rows() != 1 || x.cols() == 0 || x.cols() % c.length_multiple() != 0 {
            return Err(shape_err!("flow input {:?} must be [1, T] with T a multiple of {}", x.shape(), c.length_multiple()));
        }
        if cond.shape() != [c.mel_dim, x.cols()] {
            return Err(shape_err!("conditioning {:?} for {} samples of {} Mel channels", cond.shape(), x.cols(), c.mel_dim));
        }
        Ok(())
    }

    /// Differentiable `-log p(x) / T` for `x [1, T]` and sample-rate
    /// conditioning `cond [mel_dim, T]`.
    pub fn nll<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var, gc: GlobalConditioning) -> Result<Var> {
        let t = g.cols(x);
        let (z, logdet) = self.forward(g, x, cond, gc)?;
        let nll = g.gaussian_nll(z)?;
        let total = g.sub(nll, logdet)?;
        g.scale(total, T::of(1.0 / t as f64))
    }

    /// Differentiable forward transform; returns the latent and the summed
    /// log-determinant.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var, gc: GlobalConditioning) -> Result<(Var, Var)> {
        let c = &self.config;
        gc.check(c.num_speakers, c.num_emotions)?;
        let t = g.cols(x);
        if g.rows(x) != 1 || t == 0 || t % c.length_multiple() != 0 {
            return Err(shape_err!("flow input {:?} must be [1, T] with T a multiple of {}", g.shape(x), c.length_multiple()));
        }
        if g.shape(cond) != [c.mel_dim, t] {
            return Err(shape_err!("conditioning {:?} for {t} samples of {} Mel channels", g.shape(cond), c.mel_dim));
        }
        let embeds = embed_codes(g, self.tables(), gc)?;
        let mut h = x;
        let mut cond = cond;
        let mut logdet: Option<Var> = None;
        for flows in &self.blocks {
            h = graph_squeeze(g, h)?;
            cond = graph_squeeze(g, cond)?;
            let len = g.cols(h);
            for flow in flows {
                let scale = g.param(flow.scale);
                check_scale(g.value(scale))?;
                let bias = g.param(flow.bias);
                h = g.mul_col(h, scale)?;
                h = g.add_col(h, bias)?;
                let ls = g.log_abs(scale)?;
                let ls = g.sum(ls)?;
                let an = g.scale(ls, T::of(len as f64))?;

                let half = flow.coupling.half;
                let xa = g.slice_rows(h, 0, half)?;
                let xb = g.slice_rows(h, half, half)?;
                let (log_s, m) = self.coupling_net(g, &flow.coupling, xa, cond, embeds)?;
                let e = g.exp(log_s)?;
                let yb = g.mul(xb, e)?;
                let yb = g.add(yb, m)?;
                // coupling output is [xa; yb]; change order leaves [yb; xa]
                h = g.concat_rows(&[yb, xa])?;
                let cs = g.sum(log_s)?;
                let step = g.add(an, cs)?;
                logdet = Some(match logdet {
                    Some(acc) => g.add(acc, step)?,
                    None => step,
                });
            }
        }
        Ok((h, logdet.expect("at least one flow")))
    }

    /// `(log_s, m)` of one coupling, evaluated on its own graph.
    fn coupling_maps<T: Real>(
        &self,
        store: &ParamStore<T>,
        c: &Coupling,
        xa: &[T],
        cond: &Tensor<T>,
        gc: GlobalConditioning,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::with_params(store);
        let xa = g.input(Tensor::new([c.half, cond.cols()], xa.to_vec())?)?;
        let cond = g.input(cond.clone())?;
        let embeds = embed_codes(&mut g, self.tables(), gc)?;
        let (s, m) = self.coupling_net(&mut g, c, xa, cond, embeds)?;
        Ok((g.tensor(s), g.tensor(m)))
    }

    /// Affine coupling of flow `flow` in block `block` on `x`, which has that
    /// block's shape; `cond` is the block's pyramid level.
    pub fn coupling_forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        block: usize,
        flow: usize,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        gc: GlobalConditioning,
    ) -> Result<(Tensor<T>, f64)> {
        let c = &self.flow(block, flow)?.coupling;
        let (a, _, _) = halves(x)?;
        let (s, m) = self.coupling_maps(store, c, a, cond, gc)?;
        affine_forward(x, &s, &m)
    }

    /// Inverse of [`Self::coupling_forward`]; also returns the forward
    /// log-determinant at the recovered input.
    pub fn coupling_inverse<T: Real>(
        &self,
        store: &ParamStore<T>,
        block: usize,
        flow: usize,
        y: &Tensor<T>,
        cond: &Tensor<T>,
        gc: GlobalConditioning,
    ) -> Result<(Tensor<T>, f64)> {
        let c = &self.flow(block, flow)?.coupling;
        let (a, _, _) = halves(y)?;
        let (s, m) = self.coupling_maps(store, c, a, cond, gc)?;
        let logdet = s.data().iter().map(|v| v.f64()).sum();
        Ok((affine_inverse(y, &s, &m)?, logdet))
    }

    fn actnorm<'a, T: Real>(&self, store: &'a ParamStore<T>, flow: &Flow) -> (&'a [T], &'a [T]) {
        (store.get(flow.scale).data(), store.get(flow.bias).data())
    }

    /// Forward transform without a tape, holding one coupling's activations
    /// at a time. `x [1, T]`, `cond [mel_dim, T]`.
    pub fn transform<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        gc: GlobalConditioning,
    ) -> Result<FlowState<T>> {
        self.check_input(x, cond, gc)?;
        let pyramid = ConditioningPyramid::new(cond, self.config.blocks)?;
        let mut state = FlowState { x: x.clone(), logdet: 0.0 };
        for (b, flows) in self.blocks.iter().enumerate() {
            state.x = squeeze(&state.x)?;
            for f in 0..flows.len() {
                self.flow_step(store, b, f, &mut state, pyramid.level(b), gc)?;
            }
        }
        Ok(state)
    }

    fn flow_step<T: Real>(
        &self,
        store: &ParamStore<T>,
        block: usize,
        flow: usize,
        state: &mut FlowState<T>,
        cond: &Tensor<T>,
        gc: GlobalConditioning,
    ) -> Result<()> {
        let (scale, bias) = self.actnorm(store, &self.blocks[block][flow]);
        let (h, an) = actnorm_forward(&state.x, scale, bias)?;
        let (h, cs) = self.coupling_forward(store, block, flow, &h, cond, gc)?;
        state.x = change_order(&h)?;
        state.logdet += an + cs;
        Ok(())
    }

    /// Inverse transform of a latent `[2^blocks, T / 2^blocks]` back to audio
    /// `[1, T]`. The returned log-determinant is that of the forward map at
    /// the recovered audio.
    pub fn inverse<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>, cond: &Tensor<T>, gc: GlobalConditioning) -> Result<FlowState<T>> {
        let c = &self.config;
        let top = c.channels(c.blocks - 1);
        if z.rows() != top || z.cols() * top != cond.cols() {
            return Err(shape_err!("latent {:?} for conditioning {:?}", z.shape(), cond.shape()));
        }
        self.check_input(&Tensor::zeros([1, cond.cols()]), cond, gc)?;
        let pyramid = ConditioningPyramid::new(cond, c.blocks)?;
        let mut h = z.clone();
        let mut logdet = 0.0;
        for (b, flows) in self.blocks.iter().enumerate().rev() {
            for (f, flow) in flows.iter().enumerate().rev() {
                let y = change_order(&h)?;
                let (y, cs) = self.coupling_inverse(store, b, f, &y, pyramid.level(b), gc)?;
                let (scale, bias) = self.actnorm(store, flow);
                h = actnorm_inverse(&y, scale, bias)?;
                logdet += cs + h.cols() as f64 * scale.iter().map(|s| Float::ln(s.f64().abs())).sum::<f64>();
            }
            h = unsqueeze(&h)?;
        }
        Ok(FlowState { x: h, logdet })
    }

    /// Exact `log p(x)` in nats.
    pub fn log_likelihood<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, cond: &Tensor<T>, gc: GlobalConditioning) -> Result<f64> {
        let state = self.transform(store, x, cond, gc)?;
        Ok(gaussian_log_density(state.x.data()) + state.logdet)
    }

    /// Data-dependent ActNorm initialization: each ActNorm in turn is set so
    /// that its output on `x` has zero mean and unit variance per channel.
    pub fn init_actnorm<T: Real>(&self, store: &mut ParamStore<T>, x: &Tensor<T>, cond: &Tensor<T>, gc: GlobalConditioning) -> Result<()> {
        self.check_input(x, cond, gc)?;
        let pyramid = ConditioningPyramid::new(cond, self.config.blocks)?;
        let mut state = FlowState { x: x.clone(), logdet: 0.0 };
        for (b, flows) in self.blocks.iter().enumerate() {
            state.x = squeeze(&state.x)?;
            for (f, flow) in flows.iter().enumerate() {
                let (scale, bias) = actnorm_init(&state.x);
                let ch = scale.len();
                store.set(flow.scale, Tensor::new([ch, 1], scale)?)?;
                store.set(flow.bias, Tensor::new([ch, 1], bias)?)?;
                self.flow_step(store, b, f, &mut state, pyramid.level(b), gc)?;
            }
        }
        Ok(())
    }
}

fn graph_squeeze<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (c, t) = (g.rows(x), g.cols(x));
    if t % 2 != 0 {
        return Err(shape_err!("cannot squeeze odd length {t}"));
    }
    g.permute(x, squeeze_source(c, t), &[2 * c, t / 2])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowSampleOptions {
    /// Latent standard deviation; `None` uses the configured prior scale.
    pub prior_scale: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FlowSample {
    pub waveform: Waveform,
    /// The latent the waveform was decoded from.
    pub latent: Tensor<f32>,
}

/// Log-likelihood of one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Likelihood {
    pub log_p: f64,
    pub samples: usize,
}

impl Likelihood {
    pub fn nats_per_sample(&self) -> f64 {
        self.log_p / self.samples as f64
    }
}

/// FloWaveNet vocoder with 32-bit parameters and the Mel statistics its
/// conditioning is normalized with.
#[derive(Clone, Debug)]
pub struct FloWaveNet {
    pub net: FlowNet,
    pub params: ParamStore<f32>,
    pub mel_stats: FeatureStats,
    /// Whether ActNorm has had its data-dependent initialization.
    pub actnorm_initialized: bool,
}

impl FloWaveNet {
    pub fn new(config: &FlowConfig, rng: &mut Rng, mel_stats: FeatureStats) -> Result<Self> {
        if mel_stats.dim() != config.mel_dim {
            return Err(shape_err!("Mel statistics of width {} for {} channels", mel_stats.dim(), config.mel_dim));
        }
        let mut params = ParamStore::new();
        let net = FlowNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, mel_stats, actnorm_initialized: false })
    }

    pub fn config(&self) -> &FlowConfig {
        self.net.config()
    }

    pub fn optimizer(&self) -> AdamState<f32> {
        AdamState::new(self.config().adam.clone(), &self.params)
    }

    fn cond_input(&self, mel: &Matrix) -> Result<Tensor<f32>> {
        Ok(to_tensor::<f32>(&self.mel_stats.normalize(mel)?).transpose())
    }

    /// Normalized, upsampled conditioning `[mel_dim, frames * hop]`.
    pub fn conditioning(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>> {
        if mel.hop_length() != self.config().hop() {
            return Err(shape_err!("Mel hop {} does not match the vocoder hop {}", mel.hop_length(), self.config().hop()));
        }
        let mut g = Graph::with_params(&self.params);
        let m = g.input(self.cond_input(&mel.values)?)?;
        let up = self.net.upsample(&mut g, m)?;
        Ok(g.tensor(up))
    }

    /// Audio as `[1, frames * hop]`, zero-padded or trimmed to whole frames.
    fn padded(&self, wav: &Waveform, frames: usize) -> Result<Tensor<f32>> {
        let n = frames * self.config().hop();
        let mut data = wav.samples()[..n.min(wav.len())].to_vec();
        data.resize(n, 0.0);
        Tensor::new([1, n], data)
    }

    /// Exact log-likelihood of a whole utterance, padded to its Mel frames.
    pub fn log_likelihood(&self, wav: &Waveform, mel: &MelSpectrogram, gc: GlobalConditioning) -> Result<Likelihood> {
        let cond = self.conditioning(mel)?;
        let x = self.padded(wav, mel.frames())?;
        let log_p = self.net.log_likelihood(&self.params, &x, &cond, gc)?;
        if !log_p.is_finite() {
            return Err(Error::TrainingDiverged(format!("log-likelihood {log_p}")));
        }
        Ok(Likelihood { log_p, samples: x.cols() })
    }

    /// One Adam update of `-log p(x) / T` on a random frame-aligned crop;
    /// returns the loss before the update. The first call initializes
    /// ActNorm from that crop.
    pub fn train_step(
        &mut self,
        opt: &mut AdamState<f32>,
        rng: &mut Rng,
        wav: &Waveform,
        mel: &MelSpectrogram,
        gc: GlobalConditioning,
    ) -> Result<f64> {
        let hop = self.config().hop();
        let (frames, samples) = frame_aligned(wav, mel, hop)?;
        let (start, n) = crop_frames(rng, frames, self.config().crop_samples / hop);
        let crop = samples[start * hop..(start + n) * hop].to_vec();
        let x = Tensor::new([1, n * hop], crop)?;
        let mel_in = self.cond_input(&mel.values.slice_rows(0, frames))?;

        if !self.actnorm_initialized {
            let cond = {
                let mut g = Graph::with_params(&self.params);
                let m = g.input(mel_in.clone())?;
                let up = self.net.upsample(&mut g, m)?;
                let cond = g.slice_cols(up, start * hop, n * hop)?;
                g.tensor(cond)
            };
            self.net.init_actnorm(&mut self.params, &x, &cond, gc).map_err(diverged)?;
            self.actnorm_initialized = true;
        }

        let (loss, grads) = {
            let mut g = Graph::with_params(&self.params);
            let m = g.input(mel_in)?;
            let up = self.net.upsample(&mut g, m)?;
            let cond = g.slice_cols(up, start * hop, n * hop)?;
            let xv = g.input(x)?;
            let l = self.net.nll(&mut g, xv, cond, gc).map_err(diverged)?;
            (g.scalar(l).f64(), g.backward(l).map_err(diverged)?)
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("FloWaveNet loss {loss}")));
        }
        opt.update(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Draws a latent and decodes `frames * hop` samples in parallel.
    pub fn sample(&self, mel: &MelSpectrogram, gc: GlobalConditioning, opts: &FlowSampleOptions) -> Result<FlowSample> {
        let scale = opts.prior_scale.unwrap_or(self.config().prior_scale);
        if !(scale > 0.0) {
            return Err(invalid!("prior scale must be positive"));
        }
        let cond = self.conditioning(mel)?;
        let top = self.config().channels(self.config().blocks - 1);
        let mut rng = rng::seeded(opts.seed);
        let latent = Tensor::from_fn([top, cond.cols() / top], |_| rng::normal::<f32>(&mut rng, 0.0, scale));
        let state = self.net.inverse(&self.params, &latent, &cond, gc)?;
        if !state.x.all_finite() {
            return Err(Error::NonFinite("FloWaveNet sampling".into()));
        }
        Ok(FlowSample { waveform: Waveform::new(state.x.into_data(), SAMPLE_RATE)?, latent })
    }
}
