use mtevc_core::autodiff::suite::project;
use mtevc_core::autodiff::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};
use mtevc_core::dsp::{mel_spectrogram, MelSpectrogram, SpectrogramConfig, Waveform};
use mtevc_core::rng;
use mtevc_core::stats::FeatureStats;
use mtevc_core::synth::{render, SyntheticCorpusSpec};
use mtevc_core::wavenet::*;

fn tiny() -> WaveNetConfig {
    WaveNetConfig {
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
    }
}

fn random_classes(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| rng::below(&mut r, 256)).collect()
}

fn random_cond(channels: usize, n: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn([channels, n], |_| rng::normal(&mut r, 0.0, 1.0))
}

fn model(cfg: &WaveNetConfig, seed: u64) -> WaveNet {
    let mut r = rng::seeded(seed);
    WaveNet::new(cfg, &mut r, FeatureStats::identity(cfg.mel_dim)).unwrap()
}

#[test]
fn paper_receptive_field_formula() {
    let cfg = WaveNetConfig::default();
    assert_eq!(cfg.layers(), 24);
    assert_eq!(cfg.receptive_field(), 4 * (1 + 2 + 4 + 8 + 16 + 32) + 1);
    assert_eq!(cfg.receptive_field(), 253);
    assert_eq!(cfg.hop(), 256);
}

#[test]
fn upsampling_length_and_constant_input() {
    let cfg = WaveNetConfig { residual_channels: 4, gate_channels: 4, skip_channels: 4, cycles: 1, ..WaveNetConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let net = WaveNetNet::new(&cfg, &mut store, &mut rng::seeded(1)).unwrap();
    let mut g = Graph::with_params(&store);
    let mel = g.input(Tensor::full([80, 10], 0.7)).unwrap();
    let up = net.upsample(&mut g, mel).unwrap();
    assert_eq!(g.shape(up), &[80, 2560]);
    let v = g.value(up);
    // the leading and trailing half-kernels of each stage see only one frame
    let edge = 8 * 16 + 8 + 8;
    for c in 0..80 {
        for t in edge..2560 - edge {
            assert!((v[c * 2560 + t] - 0.7).abs() < 1e-12, "channel {c} t {t}");
        }
    }
}

#[test]
fn upsampling_gradient_check() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let net = WaveNetNet::new(&cfg, &mut store, &mut rng::seeded(2)).unwrap();
    let mel = random_cond(4, 3, 3).cast::<f64>();
    let report = grad_check(
        &store,
        |g| {
            let m = g.input(mel.clone())?;
            let up = net.upsample(g, m)?;
            project(g, up)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.params.iter().filter(|p| p.name.starts_with("upsample")).all(|p| p.checked > 0));
    assert!(report.passed(1e-4), "{}", report.max_rel_error());
}

#[test]
fn tiny_wavenet_end_to_end_gradient_check() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let net = WaveNetNet::new(&cfg, &mut store, &mut rng::seeded(4)).unwrap();
    // move zero biases off zero so their gradients are exercised
    let mut r = rng::seeded(5);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng::uniform(&mut r, -0.3, 0.3);
            }
        }
    }
    let mel = random_cond(4, 3, 6).cast::<f64>();
    let targets = random_classes(18, 7);
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
    )
    .unwrap();
    assert!(
        report.passed(1e-4),
        "{:?}",
        report.params.iter().filter(|p| p.max_rel_error > 5e-5).map(|p| (&p.name, p.max_rel_error, p.max_abs_error)).collect::<Vec<_>>()
    );
    assert!(report.params.iter().all(|p| p.max_abs_error.is_finite()));
}

#[test]
fn teacher_forced_logits_are_causal() {
    let cfg = tiny();
    let m = model(&cfg, 8);
    let gc = GlobalConditioning::new(0, 1);
    let n = 40;
    let inputs = random_classes(n, 9);
    let cond = random_cond(4, n, 10);
    let base = m.logits(&inputs, &cond, gc).unwrap();
    for pos in [0usize, 7, 25, 39] {
        let mut p = inputs.clone();
        p[pos] = (p[pos] + 100) % 256;
        let out = m.logits(&p, &cond, gc).unwrap();
        let field = cfg.receptive_field();
        for t in 0..n {
            let same = out.row(t) == base.row(t);
            assert_eq!(same, t < pos || t >= pos + field, "input {pos}, logits {t}");
        }
        let mut c2 = cond.clone();
        c2.data_mut()[pos] += 1.0;
        let out = m.logits(&inputs, &c2, gc).unwrap();
        for t in 0..pos {
            assert_eq!(out.row(t), base.row(t));
        }
    }
}

#[test]
fn paper_config_receptive_field_by_perturbation() {
    let cfg = WaveNetConfig { num_speakers: 1, num_emotions: 1, ..WaveNetConfig::default() };
    let m = model(&cfg, 11);
    let gc = GlobalConditioning::new(0, 0);
    let n = 300;
    let t = n - 1;
    let inputs = random_classes(n, 12);
    let cond = random_cond(80, n, 13);
    let base = m.logits(&inputs, &cond, gc).unwrap();
    let changed = |sample: usize| {
        // inputs[s] holds sample s - 1
        let mut p = inputs.clone();
        p[sample + 1] = (p[sample + 1] + 77) % 256;
        m.logits(&p, &cond, gc).unwrap().row(t) != base.row(t)
    };
    assert!(changed(t - 1));
    assert!(changed(t - 253));
    assert!(!changed(t - 254));
    assert!(!changed(t - 280));
}

#[test]
fn zero_head_gives_uniform_softmax() {
    let cfg = tiny();
    let mut m = model(&cfg, 14);
    let (w, b) = m.net.output_head();
    m.params.get_mut(w).data_mut().fill(0.0);
    m.params.get_mut(b).data_mut().fill(0.0);
    let logits = m.logits(&random_classes(10, 1), &random_cond(4, 10, 2), GlobalConditioning::new(0, 0)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn global_ids_change_logits_and_are_checked() {
    let cfg = tiny();
    let m = model(&cfg, 15);
    let (inputs, cond) = (random_classes(12, 3), random_cond(4, 12, 4));
    let a = m.logits(&inputs, &cond, GlobalConditioning::new(0, 0)).unwrap();
    let b = m.logits(&inputs, &cond, GlobalConditioning::new(1, 0)).unwrap();
    let c = m.logits(&inputs, &cond, GlobalConditioning::new(0, 2)).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0 && a.max_abs_diff(&c) > 0.0);
    assert!(m.logits(&inputs, &cond, GlobalConditioning::new(2, 0)).is_err());
    assert!(m.logits(&inputs, &cond, GlobalConditioning::new(0, 3)).is_err());
}

fn tone_mel(seconds: f64, freq: f64) -> (Waveform, MelSpectrogram) {
    let n = (seconds * 16000.0) as usize;
    let w =
        Waveform::new((0..n).map(|t| (0.5 * (std::f64::consts::TAU * freq * t as f64 / 16000.0).sin()) as f32).collect(), 16000).unwrap();
    let mel = mel_spectrogram(&w, &SpectrogramConfig::default()).unwrap();
    (w, mel)
}

#[test]
fn paper_config_initial_loss_is_near_uniform() {
    let spec = SyntheticCorpusSpec::new(2, 6, 1);
    let u = render(&spec, 0, 5, 0, 256).unwrap();
    let mel = mel_spectrogram(&u.waveform, &SpectrogramConfig::default()).unwrap();
    let stats = FeatureStats::fit([&mel.values]).unwrap();
    let cfg = WaveNetConfig::default();
    let mut m = WaveNet::new(&cfg, &mut rng::seeded(16), stats).unwrap();
    let mut opt = m.optimizer();
    let loss = m.train_step(&mut opt, &mut rng::seeded(1), &u.waveform, &mel, GlobalConditioning::new(0, 5)).unwrap();
    assert!((loss - 256f64.ln()).abs() < 0.1, "initial loss {loss}");
}

#[test]
fn fast_sampling_matches_naive() {
    let cfg = tiny();
    let m = model(&cfg, 17);
    let mel = MelSpectrogram::new(
        mtevc_core::dsp::Matrix::from_fn(20, 4, |i, c| ((i * 3 + c) as f64 * 0.4).sin()),
        SpectrogramConfig { num_mels: 4, hop_length: 6, ..SpectrogramConfig::default() },
    )
    .unwrap();
    let gc = GlobalConditioning::new(1, 2);
    let opts = SampleOptions { seed: 5, record_logits: true, ..SampleOptions::default() };
    let fast = m.sample(&mel, gc, &opts).unwrap();
    let naive = m.sample(&mel, gc, &SampleOptions { mode: SamplingMode::Naive, ..opts.clone() }).unwrap();
    assert_eq!(fast.classes.len(), 120);
    assert_eq!(fast.waveform.len(), 120);
    assert_eq!(fast.classes, naive.classes);
    let worst = fast.logits.iter().zip(&naive.logits).fold(0f32, |w, (a, b)| w.max((a - b).abs()));
    assert!(worst < 1e-5, "{worst}");
    let again = m.sample(&mel, gc, &opts).unwrap();
    assert_eq!(again.classes, fast.classes);
    assert_ne!(m.sample(&mel, gc, &SampleOptions { seed: 6, ..opts }).unwrap().classes, fast.classes);
}

#[test]
fn training_reduces_loss_on_a_tone() {
    let cfg = WaveNetConfig {
        cycles: 1,
        cycle_dilations: vec![1, 2, 4, 8],
        residual_channels: 16,
        gate_channels: 16,
        skip_channels: 16,
        num_speakers: 1,
        num_emotions: 1,
        crop_samples: 1024,
        ..WaveNetConfig::default()
    };
    let (w, mel) = tone_mel(0.25, 250.0);
    let stats = FeatureStats::fit([&mel.values]).unwrap();
    let mut m = WaveNet::new(&cfg, &mut rng::seeded(3), stats).unwrap();
    let mut opt = m.optimizer();
    let mut r = rng::seeded(4);
    let gc = GlobalConditioning::new(0, 0);
    let (first, _) = m.evaluate(&w, &mel, gc).unwrap();
    for _ in 0..60 {
        m.train_step(&mut opt, &mut r, &w, &mel, gc).unwrap();
    }
    let (last, _) = m.evaluate(&w, &mel, gc).unwrap();
    assert!(last < first - 0.5, "{first} -> {last}");
}
