use mtevc_core::autodiff::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};
use mtevc_core::dsp::{mel_spectrogram, SpectrogramConfig, Waveform};
use mtevc_core::flow::*;
use mtevc_core::rng::{self, Rng};
use mtevc_core::stats::FeatureStats;
use mtevc_core::wavenet::GlobalConditioning;
use mtevc_core::{Error, Real};
use nalgebra::DMatrix;

fn tiny(blocks: usize, flows: usize) -> FlowConfig {
    FlowConfig {
        blocks,
        flows_per_block: flows,
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
    }
}

fn normal<T: Real>(shape: [usize; 2], std: f64, seed: u64) -> Tensor<T> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng::normal(&mut r, 0.0, std))
}

/// Moves every parameter off its initial value: ActNorm scales to
/// `exp(N(0, 0.2))`, everything else by `N(0, std)`.
fn perturb<T: Real>(store: &mut ParamStore<T>, r: &mut Rng, std: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let is_scale = store.name(id).ends_with("actnorm/scale");
        for v in store.get_mut(id).data_mut() {
            *v = if is_scale { T::of(rng::normal::<f64>(r, 0.0, 0.2).exp()) } else { *v + rng::normal::<T>(r, 0.0, std) };
        }
    }
}

fn build<T: Real>(cfg: &FlowConfig, seed: u64, std: Option<f64>) -> (FlowNet, ParamStore<T>) {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let net = FlowNet::new(cfg, &mut store, &mut r).unwrap();
    if let Some(std) = std {
        perturb(&mut store, &mut r, std);
    }
    (net, store)
}

fn ln_abs_det(j: Vec<f64>, n: usize) -> f64 {
    DMatrix::from_row_slice(n, n, &j).determinant().abs().ln()
}

/// Central-difference Jacobian of `f` at `x`, row `i` = d out_i.
fn jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = x.len();
    let mut j = vec![0.0; n * n];
    for k in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        assert_eq!(fp.len(), n);
        for i in 0..n {
            j[i * n + k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    j
}

const GC: GlobalConditioning = GlobalConditioning { speaker: 1, emotion: 2 };

#[test]
fn squeeze_shape_and_pairing() {
    let x = Tensor::<f64>::from_fn([1, 8], |i| i as f64);
    let s = squeeze(&x).unwrap();
    assert_eq!(s.shape(), &[2, 4]);
    assert_eq!(s.row(0), &[0.0, 2.0, 4.0, 6.0]);
    assert_eq!(s.row(1), &[1.0, 3.0, 5.0, 7.0]);
    assert!(matches!(squeeze(&Tensor::<f64>::zeros([1, 7])), Err(Error::Shape(_))));
}

#[test]
fn squeeze_round_trips_and_keeps_values() {
    let x = normal::<f32>([3, 32], 1.0, 1);
    let s = squeeze(&x).unwrap();
    assert_eq!(unsqueeze(&s).unwrap(), x);
    let mut a = x.data().to_vec();
    let mut b = s.data().to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn change_order_swaps_halves() {
    let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]).unwrap();
    let y = change_order(&x).unwrap();
    assert_eq!(y.data(), &[5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(change_order(&y).unwrap(), x);
    assert!(matches!(change_order(&Tensor::<f64>::zeros([3, 2])), Err(Error::Shape(_))));
}

#[test]
fn actnorm_identity_round_trip_and_singular_scale() {
    let x = normal::<f32>([4, 50], 2.0, 2);
    let (y, ld) = actnorm_forward(&x, &[1.0; 4], &[0.0; 4]).unwrap();
    assert_eq!(y, x);
    assert_eq!(ld, 0.0);

    let scale = [0.5f32, -2.0, 3.0, 0.1];
    let bias = [1.0f32, -1.0, 0.2, 0.0];
    let (y, ld) = actnorm_forward(&x, &scale, &bias).unwrap();
    let expected = 50.0 * scale.iter().map(|s| (s.abs() as f64).ln()).sum::<f64>();
    assert!((ld - expected).abs() < 1e-9);
    let back = actnorm_inverse(&y, &scale, &bias).unwrap();
    assert!(back.max_abs_diff(&x) <= 1e-6, "{}", back.max_abs_diff(&x));

    assert!(matches!(actnorm_forward(&x, &[1.0, 0.0, 1.0, 1.0], &[0.0; 4]), Err(Error::Singularity(_))));
    assert!(matches!(actnorm_inverse(&x, &[1.0, 0.0, 1.0, 1.0], &[0.0; 4]), Err(Error::Singularity(_))));
}

#[test]
fn actnorm_data_dependent_init_normalizes_channels() {
    let mut r = rng::seeded(3);
    let x = Tensor::<f32>::from_fn([4, 400], |i| rng::normal::<f32>(&mut r, (i / 400) as f64 - 1.5, 0.3 + (i / 400) as f64));
    let (scale, bias) = actnorm_init(&x);
    let (y, _) = actnorm_forward(&x, &scale, &bias).unwrap();
    for c in 0..4 {
        let row: Vec<f64> = y.row(c).iter().map(|&v| v as f64).collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} variance {var}");
    }
}

#[test]
fn affine_inverse_hand_case() {
    // y = (1, 3), s = ln 2, m = 1 gives x_even = (3 - 1) / 2
    let y = Tensor::<f64>::new([2, 1], vec![1.0, 3.0]).unwrap();
    let s = Tensor::new([1, 1], vec![2f64.ln()]).unwrap();
    let m = Tensor::new([1, 1], vec![1.0]).unwrap();
    let x = affine_inverse(&y, &s, &m).unwrap();
    assert_eq!(x.data()[0], 1.0);
    assert!((x.data()[1] - 1.0).abs() < 1e-15);
    let (again, ld) = affine_forward(&x, &s, &m).unwrap();
    assert!(again.max_abs_diff(&y) < 1e-15);
    assert!((ld - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_initialized_coupling_is_identity() {
    let cfg = tiny(2, 1);
    let (net, store) = build::<f64>(&cfg, 4, None);
    let x = normal::<f64>([4, 8], 1.0, 5);
    let cond = normal::<f64>([12, 8], 1.0, 6);
    let (y, ld) = net.coupling_forward(&store, 1, 0, &x, &cond, GC).unwrap();
    assert_eq!(y, x);
    assert_eq!(ld, 0.0);
    let (back, _) = net.coupling_inverse(&store, 1, 0, &x, &cond, GC).unwrap();
    assert_eq!(back, x);
}

#[test]
fn coupling_round_trip_keeps_first_half() {
    let cfg = tiny(2, 1);
    let (net, store) = build::<f64>(&cfg, 7, Some(0.3));
    let x = normal::<f64>([4, 16], 1.0, 8);
    let cond = normal::<f64>([12, 16], 1.0, 9);
    let (y, ld) = net.coupling_forward(&store, 1, 0, &x, &cond, GC).unwrap();
    assert_eq!(&y.data()[..32], &x.data()[..32]);
    assert!(ld.abs() > 1e-3, "coupling should not be the identity");
    let (back, ld_back) = net.coupling_inverse(&store, 1, 0, &y, &cond, GC).unwrap();
    assert!(back.max_abs_diff(&x) <= 1e-10, "{}", back.max_abs_diff(&x));
    assert_eq!(ld, ld_back);

    let store32 = store.cast::<f32>();
    let (x32, c32) = (x.cast::<f32>(), cond.cast::<f32>());
    let (y, _) = net.coupling_forward(&store32, 1, 0, &x32, &c32, GC).unwrap();
    let (back, _) = net.coupling_inverse(&store32, 1, 0, &y, &c32, GC).unwrap();
    assert!(back.max_abs_diff(&x32) <= 1e-4, "{}", back.max_abs_diff(&x32));
}

#[test]
fn coupling_jacobian_is_triangular_with_matching_logdet() {
    let cfg = tiny(1, 1);
    let (net, store) = build::<f64>(&cfg, 10, Some(0.3));
    let x = normal::<f64>([2, 4], 1.0, 11);
    let cond = normal::<f64>([6, 4], 1.0, 12);
    let f = |v: &[f64]| {
        let t = Tensor::new([2, 4], v.to_vec()).unwrap();
        net.coupling_forward(&store, 0, 0, &t, &cond, GC).unwrap().0.into_data()
    };
    let j = jacobian(x.data(), 1e-6, f);
    let (_, ld) = net.coupling_forward(&store, 0, 0, &x, &cond, GC).unwrap();
    // the kept half ignores the transformed half, which is scaled elementwise
    for i in 0..8 {
        for k in 0..8 {
            let structurally_zero = (i < 4 && k != i) || (i >= 4 && k >= 4 && k != i);
            if structurally_zero {
                assert!(j[i * 8 + k].abs() < 1e-8, "J[{i}][{k}] = {}", j[i * 8 + k]);
            }
        }
    }
    let numeric = ln_abs_det(j, 8);
    assert!((numeric - ld).abs() < 1e-4, "analytic {ld} numeric {numeric}");
}

#[test]
fn tiny_flow_logdet_matches_numerical_jacobian() {
    let cfg = tiny(1, 2);
    let (net, store) = build::<f64>(&cfg, 13, Some(0.3));
    let x = normal::<f64>([1, 16], 1.0, 14);
    let cond = normal::<f64>([3, 16], 1.0, 15);
    let state = net.transform(&store, &x, &cond, GC).unwrap();
    let j = jacobian(x.data(), 1e-6, |v| {
        let t = Tensor::new([1, 16], v.to_vec()).unwrap();
        net.transform(&store, &t, &cond, GC).unwrap().x.into_data()
    });
    let numeric = ln_abs_det(j, 16);
    assert!(state.logdet.abs() > 0.1);
    assert!((numeric - state.logdet).abs() < 1e-4, "analytic {} numeric {numeric}", state.logdet);
}

#[test]
fn tiny_flow_likelihood_matches_jacobian_oracle() {
    let cfg = tiny(1, 2);
    let (net, store) = build::<f64>(&cfg, 16, Some(0.3));
    let x = normal::<f64>([1, 64], 0.5, 17);
    let cond = normal::<f64>([3, 64], 1.0, 18);
    let log_p = net.log_likelihood(&store, &x, &cond, GC).unwrap();
    let run = |v: &[f64]| {
        let t = Tensor::new([1, 64], v.to_vec()).unwrap();
        net.transform(&store, &t, &cond, GC).unwrap().x.into_data()
    };
    let z = run(x.data());
    let oracle = gaussian_log_density(&z) + ln_abs_det(jacobian(x.data(), 1e-6, run), 64);
    assert!((log_p - oracle).abs() < 1e-3, "{log_p} vs {oracle}");
}

#[test]
fn identity_flow_likelihood_is_the_prior() {
    let cfg = tiny(3, 2);
    let (net, store) = build::<f64>(&cfg, 19, None);
    let x = normal::<f64>([1, 64], 0.7, 20);
    let cond = normal::<f64>([3, 64], 1.0, 21);
    let log_p = net.log_likelihood(&store, &x, &cond, GC).unwrap();
    let prior = -0.5 * x.data().iter().map(|v| v * v + std::f64::consts::TAU.ln()).sum::<f64>();
    assert!((log_p - prior).abs() <= 1e-6, "{log_p} vs {prior}");

    // the training loss at identity initialization is the per-sample Gaussian NLL
    let mut g = Graph::with_params(&store);
    let (xv, cv) = (g.input(x.clone()).unwrap(), g.input(cond.clone()).unwrap());
    let loss = net.nll(&mut g, xv, cv, GC).unwrap();
    assert!((g.scalar(loss) + prior / 64.0).abs() < 1e-12);
}

#[test]
fn graph_forward_matches_tape_free_transform() {
    let cfg = tiny(2, 2);
    let (net, store) = build::<f64>(&cfg, 22, Some(0.2));
    let x = normal::<f64>([1, 32], 0.5, 23);
    let cond = normal::<f64>([3, 32], 1.0, 24);
    let state = net.transform(&store, &x, &cond, GC).unwrap();
    let mut g = Graph::with_params(&store);
    let (xv, cv) = (g.input(x.clone()).unwrap(), g.input(cond.clone()).unwrap());
    let (z, ld) = net.forward(&mut g, xv, cv, GC).unwrap();
    assert!(g.tensor(z).max_abs_diff(&state.x) < 1e-12);
    assert!((g.scalar(ld) - state.logdet).abs() < 1e-9);
    let loss = net.nll(&mut g, xv, cv, GC).unwrap();
    let log_p = gaussian_log_density(state.x.data()) + state.logdet;
    assert!((g.scalar(loss) + log_p / 32.0).abs() < 1e-10);
}

#[test]
fn likelihood_agrees_along_both_directions() {
    let cfg = tiny(3, 2);
    let (net, store) = build::<f64>(&cfg, 25, Some(0.2));
    let cond = normal::<f64>([3, 64], 1.0, 26);
    let z = normal::<f64>([8, 8], 1.0, 27);
    let back = net.inverse(&store, &z, &cond, GC).unwrap();
    let via_inverse = gaussian_log_density(z.data()) + back.logdet;
    let fwd = net.transform(&store, &back.x, &cond, GC).unwrap();
    assert!(fwd.x.max_abs_diff(&z) < 1e-10);
    let via_forward = gaussian_log_density(fwd.x.data()) + fwd.logdet;
    assert!((via_forward - via_inverse).abs() < 1e-4, "{via_forward} vs {via_inverse}");
}

#[test]
fn bijective_in_both_precisions() {
    let cfg = tiny(3, 3);
    let (net, store) = build::<f64>(&cfg, 28, Some(0.2));
    let x = normal::<f64>([1, 128], 0.5, 29);
    let cond = normal::<f64>([3, 128], 1.0, 30);
    let z = net.transform(&store, &x, &cond, GC).unwrap();
    let back = net.inverse(&store, &z.x, &cond, GC).unwrap();
    assert!(back.x.max_abs_diff(&x) <= 1e-10);
    assert!((back.logdet - z.logdet).abs() < 1e-9);

    let s32 = store.cast::<f32>();
    let (x32, c32) = (x.cast::<f32>(), cond.cast::<f32>());
    let z = net.transform(&s32, &x32, &c32, GC).unwrap();
    let back = net.inverse(&s32, &z.x, &c32, GC).unwrap();
    assert!(back.x.max_abs_diff(&x32) <= 1e-4);
}

#[test]
fn tiny_flow_gradient_check() {
    let cfg = tiny(2, 2);
    let (net, store) = build::<f64>(&cfg, 31, Some(0.2));
    let mel = normal::<f64>([3, 2], 1.0, 32);
    let x = normal::<f64>([1, 16], 0.5, 33);
    let report = grad_check(
        &store,
        |g| {
            let m = g.input(mel.clone())?;
            let cond = net.upsample(g, m)?;
            let xv = g.input(x.clone())?;
            net.nll(g, xv, cond, GC)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.params.iter().all(|p| p.checked > 0));
    assert!(
        report.passed(1e-4),
        "{:?}",
        report.params.iter().filter(|p| p.max_rel_error > 5e-5).map(|p| (&p.name, p.max_rel_error)).collect::<Vec<_>>()
    );
}

#[test]
fn shape_and_code_errors() {
    let cfg = tiny(2, 1);
    let (net, store) = build::<f64>(&cfg, 34, None);
    let cond = normal::<f64>([3, 16], 1.0, 35);
    let bad_len = Tensor::zeros([1, 14]);
    assert!(matches!(net.transform(&store, &bad_len, &cond, GC), Err(Error::Shape(_))));
    let x = Tensor::zeros([1, 16]);
    let bad = GlobalConditioning::new(0, 3);
    assert!(matches!(net.transform(&store, &x, &cond, bad), Err(Error::UnknownCode { code: 3, limit: 3 })));
    assert!(tiny(2, 1).validate().is_ok());
    assert!(FlowConfig { kernel: 2, ..tiny(2, 1) }.validate().is_err());
    assert!(FlowConfig { blocks: 4, ..tiny(2, 1) }.validate().is_err(), "hop 8 is not a multiple of 16");
    assert!(FlowConfig::default().validate().is_ok());
}

fn tone(seconds: f64, freq: f64) -> Waveform {
    let n = (seconds * 16_000.0) as usize;
    let s = (0..n).map(|i| (0.5 * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin()) as f32).collect();
    Waveform::new(s, 16_000).unwrap()
}

#[test]
fn sampling_length_and_latent_round_trip() {
    let cfg = FlowConfig { mel_dim: 80, upsample_strides: vec![16, 16], crop_samples: 1024, ..tiny(3, 2) };
    let wav = tone(0.2, 250.0);
    let mel = mel_spectrogram(&wav, &SpectrogramConfig::default()).unwrap();
    let stats = FeatureStats::fit([&mel.values]).unwrap();
    let mut model = FloWaveNet::new(&cfg, &mut rng::seeded(36), stats).unwrap();
    perturb(&mut model.params, &mut rng::seeded(37), 0.1);
    let out = model.sample(&mel, GC, &FlowSampleOptions { prior_scale: Some(1.0), seed: 3 }).unwrap();
    assert_eq!(out.waveform.len(), mel.frames() * 256);
    let cond = model.conditioning(&mel).unwrap();
    let x = Tensor::new([1, out.waveform.len()], out.waveform.samples().to_vec()).unwrap();
    let z = model.net.transform(&model.params, &x, &cond, GC).unwrap();
    assert!(z.x.max_abs_diff(&out.latent) <= 1e-3, "{}", z.x.max_abs_diff(&out.latent));

    let again = model.sample(&mel, GC, &FlowSampleOptions { prior_scale: Some(1.0), seed: 3 }).unwrap();
    assert_eq!(again.waveform, out.waveform);
    assert!(model.log_likelihood(&wav, &mel, GC).unwrap().nats_per_sample().is_finite());
}

#[test]
fn first_training_step_initializes_actnorm() {
    let cfg = FlowConfig { mel_dim: 80, upsample_strides: vec![16, 16], crop_samples: 1024, ..tiny(2, 2) };
    let wav = tone(0.25, 250.0);
    let mel = mel_spectrogram(&wav, &SpectrogramConfig::default()).unwrap();
    let stats = FeatureStats::fit([&mel.values]).unwrap();
    let mut model = FloWaveNet::new(&cfg, &mut rng::seeded(38), stats).unwrap();
    let mut opt = model.optimizer();
    let mut r = rng::seeded(39);
    assert!(!model.actnorm_initialized);
    let first = model.train_step(&mut opt, &mut r, &wav, &mel, GC).unwrap();
    assert!(model.actnorm_initialized);
    let (scale, _) = model.net.actnorm_params()[0];
    assert!(model.params.get(scale).data().iter().any(|&s| (s - 1.0).abs() > 0.1));
    // after init the latent is unit-variance: 0.5 ln(2 pi e) + ln(std of the tone)
    let expected = 0.5 * (std::f64::consts::TAU * std::f64::consts::E).ln() + (0.5 / 2f64.sqrt()).ln();
    assert!((first - expected).abs() < 0.01, "{first} vs {expected}");
    let mut last = first;
    for _ in 0..30 {
        last = model.train_step(&mut opt, &mut r, &wav, &mel, GC).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}
