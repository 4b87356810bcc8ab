//! DBLSTM Mel-to-Mel conversion conditioned on a target emotion code, with
//! optional phonetic posteriorgram (PPG) inputs.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::layers::{BiLstm, Dense};
use crate::autodiff::{init, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::dsp::{dtw_align, mel_spectrogram, Matrix, MelSpectrogram, SpectrogramConfig, Waveform};
use crate::error::{diverged, invalid, shape_err, Error, Result};
use crate::rng::Rng;
use crate::stats::FeatureStats;
use crate::Real;

/// Frames of disagreement between a PPG and its Mel that are trimmed away
/// rather than rejected.
pub const PPG_FRAME_TOLERANCE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub num_emotions: usize,
    pub emotion_embed_dim: usize,
    pub dense_layers: usize,
    pub dense_units: usize,
    pub blstm_layers: usize,
    pub blstm_units: usize,
    pub use_ppg: bool,
    pub mel_dim: usize,
    pub ppg_dim: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            num_emotions: 6,
            emotion_embed_dim: 16,
            dense_layers: 2,
            dense_units: 256,
            blstm_layers: 4,
            blstm_units: 256,
            use_ppg: true,
            mel_dim: 80,
            ppg_dim: 131,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
        }
    }
}

impl ConversionConfig {
    /// The proposed system (`use_ppg`) or the Mel-only baseline.
    pub fn paper(use_ppg: bool) -> Self {
        Self { use_ppg, ..Self::default() }
    }

    pub fn input_dim(&self) -> usize {
        if self.use_ppg {
            self.mel_dim + self.ppg_dim
        } else {
            self.mel_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_emotions, self.emotion_embed_dim, self.dense_units, self.blstm_units, self.mel_dim, self.blstm_layers];
        if dims.contains(&0) || (self.use_ppg && self.ppg_dim == 0) {
            return Err(invalid!("conversion dimensions must be positive: {self:?}"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid!("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Frames x phone-class posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct PpgMatrix {
    values: Matrix,
}

impl PpgMatrix {
    /// Checks that rows are distributions (entries in [0, 1], sums 1 +- 1e-4).
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid!("PPG frame {r} has an entry outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(invalid!("PPG frame {r} sums to {s}"));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Nearest-frame resampling to `frames` rows, renormalizing each row.
    pub fn resample(&self, frames: usize) -> Result<Self> {
        let n = self.frames();
        if n == 0 || frames == 0 {
            return Err(invalid!("cannot resample {n} PPG frames to {frames}"));
        }
        let mut out = Matrix::zeros(frames, self.dim());
        for j in 0..frames {
            let src = (((j as f64 + 0.5) * n as f64 / frames as f64) as usize).min(n - 1);
            let row = self.values.row(src);
            let s: f64 = row.iter().sum();
            for (o, &p) in out.row_mut(j).iter_mut().zip(row) {
                *o = p / s;
            }
        }
        Self::new(out)
    }
}

/// Aligned model input and target for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Source Mel (optionally followed by PPG columns) warped onto the
    /// target timeline.
    pub input: Matrix,
    pub target: Matrix,
    pub emotion: usize,
}

/// Reconciles a PPG with the Mel it belongs to: up to
/// [`PPG_FRAME_TOLERANCE`] frames of difference are trimmed.
fn match_ppg(frames: usize, ppg: &PpgMatrix) -> Result<usize> {
    let diff = frames.abs_diff(ppg.frames());
    if diff > PPG_FRAME_TOLERANCE {
        return Err(Error::Alignment(format!(
            "PPG has {} frames but the Mel has {frames} (tolerance {PPG_FRAME_TOLERANCE})",
            ppg.frames()
        )));
    }
    Ok(frames.min(ppg.frames()))
}

fn input_rows(mel: &Matrix, ppg: Option<&PpgMatrix>, rows: impl Iterator<Item = usize>) -> Matrix {
    let width = mel.cols() + ppg.map_or(0, PpgMatrix::dim);
    let mut data = Vec::new();
    let mut n = 0;
    for i in rows {
        data.extend_from_slice(mel.row(i));
        if let Some(p) = ppg {
            data.extend_from_slice(p.values.row(i));
        }
        n += 1;
    }
    Matrix::new(n, width, data).expect("rows have the declared width")
}

/// DTW-aligns a source utterance onto the target timeline. Each target
/// frame takes the lowest-index source frame the path pairs it with.
pub fn prepare_pairs(src: &MelSpectrogram, src_ppg: Option<&PpgMatrix>, tgt: &MelSpectrogram, emotion: usize) -> Result<TrainingPair> {
    let mut src_mel = src.values.clone();
    if let Some(p) = src_ppg {
        let n = match_ppg(src_mel.rows(), p)?;
        src_mel = src_mel.slice_rows(0, n);
    }
    let path = dtw_align(&src_mel, &tgt.values)?;
    let map = path.project_onto_second(tgt.frames());
    Ok(TrainingPair { input: input_rows(&src_mel, src_ppg, map.into_iter()), target: tgt.values.clone(), emotion })
}

/// Parameter layout of the conversion network, independent of precision.
#[derive(Clone, Debug)]
pub struct ConversionNet {
    config: ConversionConfig,
    emotion_table: ParamId,
    emotion_dense: Dense,
    dense: Vec<Dense>,
    blstm: Vec<BiLstm>,
    projection: Dense,
}

impl ConversionNet {
    pub fn new<T: Real>(config: &ConversionConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let e = config.emotion_embed_dim;
        let emotion_table = store.add("emotion/table", init::normal(rng, &[config.num_emotions, e], 0.1))?;
        let emotion_dense = Dense::new(store, "emotion/dense", rng, e, e)?;
        let mut width = config.input_dim() + e;
        let mut dense = Vec::new();
        for i in 0..config.dense_layers {
            dense.push(Dense::new(store, &format!("dense{i}"), rng, width, config.dense_units)?);
            width = config.dense_units;
        }
        let mut blstm = Vec::new();
        for i in 0..config.blstm_layers {
            blstm.push(BiLstm::new(store, &format!("blstm{i}"), rng, width, config.blstm_units)?);
            width = 2 * config.blstm_units;
        }
        let projection = Dense::new(store, "projection", rng, width, config.mel_dim)?;
        Ok(Self { config: config.clone(), emotion_table, emotion_dense, dense, blstm, projection })
    }

    pub fn config(&self) -> &ConversionConfig {
        &self.config
    }

    pub fn projection(&self) -> Dense {
        self.projection
    }

    /// Maps normalized inputs `[T, input_dim]` to normalized Mel `[T, mel_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, input: Var, emotion: usize) -> Result<Var> {
        if g.cols(input) != self.config.input_dim() {
            return Err(shape_err!("conversion input width {} (expected {})", g.cols(input), self.config.input_dim()));
        }
        if emotion >= self.config.num_emotions {
            return Err(Error::UnknownCode { code: emotion, limit: self.config.num_emotions });
        }
        let frames = g.rows(input);
        let table = g.param(self.emotion_table);
        let e = g.gather_rows(table, &[emotion])?;
        let e = self.emotion_dense.forward(g, e)?;
        let e = g.softsign(e)?;
        let e = g.repeat_rows(e, frames)?;
        let mut h = g.concat_cols(&[input, e])?;
        for d in &self.dense {
            h = d.forward(g, h)?;
            h = g.tanh(h)?;
        }
        for b in &self.blstm {
            h = b.forward(g, h)?;
        }
        self.projection.forward(g, h)
    }

    /// Mean absolute error of the prediction against a normalized target.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, input: &Matrix, target: &Matrix, emotion: usize) -> Result<Var> {
        let x = g.input(to_tensor(input))?;
        let y = self.forward(g, x, emotion)?;
        let t: Vec<T> = target.data().iter().map(|&v| T::of(v)).collect();
        g.l1_loss(y, &t)
    }
}

pub(crate) fn to_tensor<T: Real>(m: &Matrix) -> Tensor<T> {
    Tensor::from_fn([m.rows(), m.cols()], |i| T::of(m.data()[i]))
}

pub(crate) fn to_matrix<T: Real>(t: &Tensor<T>) -> Matrix {
    Matrix::new(t.rows(), t.cols(), t.data().iter().map(|v| v.f64()).collect()).expect("tensor is 2-d")
}

/// Trained (or trainable) conversion model: 32-bit parameters plus the
/// normalization statistics its inputs and outputs pass through.
#[derive(Clone, Debug)]
pub struct ConversionModel {
    pub net: ConversionNet,
    pub params: ParamStore<f32>,
    pub input_stats: FeatureStats,
    pub target_stats: FeatureStats,
}

impl ConversionModel {
    pub fn new(config: &ConversionConfig, rng: &mut Rng, input_stats: FeatureStats, target_stats: FeatureStats) -> Result<Self> {
        if input_stats.dim() != config.input_dim() || target_stats.dim() != config.mel_dim {
            return Err(shape_err!(
                "statistics of width {}/{} for a model with input {} and output {}",
                input_stats.dim(),
                target_stats.dim(),
                config.input_dim(),
                config.mel_dim
            ));
        }
        let mut params = ParamStore::new();
        let net = ConversionNet::new(config, &mut params, rng)?;
        Ok(Self { net, params, input_stats, target_stats })
    }

    /// Fits statistics on the pairs and initializes a fresh model.
    pub fn for_pairs(config: &ConversionConfig, rng: &mut Rng, pairs: &[TrainingPair]) -> Result<Self> {
        let input_stats = FeatureStats::fit(pairs.iter().map(|p| &p.input))?;
        let target_stats = FeatureStats::fit(pairs.iter().map(|p| &p.target))?;
        Self::new(config, rng, input_stats, target_stats)
    }

    pub fn config(&self) -> &ConversionConfig {
        self.net.config()
    }

    pub fn optimizer(&self) -> AdamState<f32> {
        AdamState::new(self.config().adam.clone(), &self.params)
    }

    /// One clipped Adam update on a pair; returns the loss before the update.
    pub fn train_step(&mut self, opt: &mut AdamState<f32>, pair: &TrainingPair) -> Result<f64> {
        let input = self.input_stats.normalize(&pair.input)?;
        let target = self.target_stats.normalize(&pair.target)?;
        if input.rows() != target.rows() {
            return Err(shape_err!("pair has {} input and {} target frames", input.rows(), target.rows()));
        }
        let (loss, mut grads) = {
            let mut g = Graph::with_params(&self.params);
            let l = self.net.loss(&mut g, &input, &target, pair.emotion).map_err(diverged)?;
            (g.scalar(l).f64(), g.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("conversion loss {loss}")));
        }
        grads.clip_global_norm(self.config().clip_norm);
        opt.update(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Loss without updating, in normalized units.
    pub fn evaluate(&self, pair: &TrainingPair) -> Result<f64> {
        let input = self.input_stats.normalize(&pair.input)?;
        let target = self.target_stats.normalize(&pair.target)?;
        let mut g = Graph::with_params(&self.params);
        let l = self.net.loss(&mut g, &input, &target, pair.emotion)?;
        Ok(g.scalar(l).f64())
    }

    /// Raw features in, raw log-Mel out.
    pub fn predict(&self, input: &Matrix, emotion: usize) -> Result<Matrix> {
        let x = self.input_stats.normalize(input)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(to_tensor::<f32>(&x))?;
        let y = self.net.forward(&mut g, xv, emotion)?;
        self.target_stats.denormalize(&to_matrix(&g.tensor(y)))
    }

    /// Analyzes a source waveform and converts it; the output keeps the
    /// source's frame count.
    pub fn convert_utterance(
        &self,
        src: &Waveform,
        src_ppg: Option<&PpgMatrix>,
        emotion: usize,
        analysis: &SpectrogramConfig,
    ) -> Result<MelSpectrogram> {
        let mel = mel_spectrogram(src, analysis)?;
        self.convert_mel(&mel, src_ppg, emotion)
    }

    pub fn convert_mel(&self, mel: &MelSpectrogram, src_ppg: Option<&PpgMatrix>, emotion: usize) -> Result<MelSpectrogram> {
        let frames = mel.frames();
        let input = match (self.config().use_ppg, src_ppg) {
            (true, Some(p)) => {
                match_ppg(frames, p)?;
                // repeat the last posterior frame when the PPG is slightly short
                let rows = (0..frames).map(|i| i.min(p.frames() - 1));
                let mut m = Matrix::zeros(frames, mel.num_mels() + p.dim());
                for (j, i) in rows.enumerate() {
                    let row = m.row_mut(j);
                    row[..mel.num_mels()].copy_from_slice(mel.values.row(j));
                    row[mel.num_mels()..].copy_from_slice(p.values.row(i));
                }
                m
            }
            (true, None) => return Err(invalid!("this model needs PPG inputs")),
            (false, _) => mel.values.clone(),
        };
        let out = self.predict(&input, emotion)?;
        MelSpectrogram::new(out, mel.config.clone())
    }
}
