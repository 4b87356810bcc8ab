// oracles index in lockstep on purpose
#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use mtevc_core::dsp::*;
use mtevc_core::rng;
use proptest::prelude::*;

fn tone(freqs: &[(f64, f64)], seconds: f64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let s = (0..n).map(|t| freqs.iter().map(|(f, a)| a * (2.0 * PI * f * t as f64 / 16000.0).sin()).sum::<f64>() as f32).collect();
    Waveform::new(s, 16000).unwrap()
}

fn noise(n: usize, seed: u64, amp: f64) -> Waveform {
    let mut r = rng::seeded(seed);
    Waveform::new((0..n).map(|_| rng::uniform::<f32>(&mut r, -amp, amp)).collect(), 16000).unwrap()
}

/// Dominant frequency via a zero-padded direct DFT scan around the peak.
fn dominant_frequency(w: &Waveform, lo: f64, hi: f64) -> f64 {
    let x: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let mut best = (0.0, lo);
    let mut f = lo;
    while f <= hi {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * PI * f * t as f64 / 16000.0;
            re += v * a.cos();
            im -= v * a.sin();
        }
        let p = re * re + im * im;
        if p > best.0 {
            best = (p, f);
        }
        f += 0.25;
    }
    best.1
}

#[test]
fn stft_of_silence_is_zero_with_centered_frame_count() {
    let cfg = SpectrogramConfig::default();
    let spec = stft(&Waveform::silence(16000, 16000), &cfg).unwrap();
    assert_eq!(spec.frames, 63);
    assert!(spec.magnitude().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stft_rejects_empty_input() {
    let cfg = SpectrogramConfig::default();
    assert!(matches!(stft(&Waveform::silence(0, 16000), &cfg), Err(mtevc_core::Error::InvalidInput(_))));
}

#[test]
fn stft_frame_matches_direct_dft_and_peaks_at_expected_bin() {
    let cfg = SpectrogramConfig::default();
    let w = tone(&[(1000.0, 0.5)], 0.5);
    let spec = stft(&w, &cfg).unwrap();
    let mag = spec.magnitude();
    let frame = 10;
    // direct DFT oracle on the same windowed segment
    let x: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let start = frame * cfg.hop_length as isize as usize - 512;
    for k in [0usize, 17, 63, 64, 65, 300, 512] {
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..1024 {
            let win = 0.5 - 0.5 * (2.0 * PI * n as f64 / 1024.0).cos();
            let a = -2.0 * PI * (k * n) as f64 / 1024.0;
            re += x[start + n] * win * a.cos();
            im += x[start + n] * win * a.sin();
        }
        assert!((mag.at(frame, k) - re.hypot(im)).abs() < 1e-9, "bin {k}");
    }
    let peak = (0..cfg.num_bins()).max_by(|&a, &b| mag.at(frame, a).total_cmp(&mag.at(frame, b))).unwrap();
    assert_eq!(peak, (1000.0f64 * 1024.0 / 16000.0).round() as usize);
}

#[test]
fn impulse_has_flat_spectrum_in_first_frame() {
    let cfg = SpectrogramConfig::default();
    let mut s = vec![0.0f32; 4096];
    s[0] = 1.0;
    let mag = stft(&Waveform::new(s, 16000).unwrap(), &cfg).unwrap().magnitude();
    // frame 0 is centered on sample 0, where the Hann window peaks at 1
    for k in 0..cfg.num_bins() {
        assert!((mag.at(0, k) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn istft_inverts_stft_in_the_interior() {
    let cfg = SpectrogramConfig::default();
    let w = noise(8000, 3, 0.5);
    let spec = stft(&w, &cfg).unwrap();
    let back = istft(&spec, &cfg, w.len()).unwrap();
    for t in 0..w.len() {
        assert!((back[t] - w.samples()[t] as f64).abs() < 1e-6, "sample {t}");
    }
}

#[test]
fn mel_filterbank_rows_are_nonnegative_and_nonempty() {
    let cfg = SpectrogramConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    assert_eq!((fb.weights.rows(), fb.weights.cols()), (80, 513));
    for m in 0..80 {
        let row = fb.weights.row(m);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!(row.iter().any(|&v| v > 0.0));
    }
    let flat = vec![1.0; 513];
    assert!(fb.apply(&flat).iter().all(|&v| v > 0.0));
    // Slaney scale is linear below 1 kHz
    assert!((hz_to_mel(500.0) - 7.5).abs() < 1e-12);
    assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
}

#[test]
fn silence_maps_to_the_log_floor() {
    let cfg = SpectrogramConfig::default();
    let mel = mel_spectrogram(&Waveform::silence(4000, 16000), &cfg).unwrap();
    assert!(mel.values.data().iter().all(|&v| v == cfg.log_floor.ln()));
}

#[test]
fn noise_mel_has_expected_shape() {
    let cfg = SpectrogramConfig::default();
    let w = noise(16000, 1, 0.3);
    let mel = mel_spectrogram(&w, &cfg).unwrap();
    assert_eq!((mel.frames(), mel.num_mels()), (63, 80));
    assert!(mel.values.all_finite());
    assert!(mel.values.data().iter().all(|&v| v >= cfg.log_floor.ln()));
}

#[test]
fn sine_energy_lands_in_the_nearest_mel_band() {
    let cfg = SpectrogramConfig::default();
    let fb = mel_filterbank(&cfg).unwrap();
    let nearest = (0..80).min_by(|&a, &b| (fb.centers_hz[a] - 440.0).abs().total_cmp(&(fb.centers_hz[b] - 440.0).abs())).unwrap();
    let mel = mel_spectrogram(&tone(&[(440.0, 0.5)], 0.5), &cfg).unwrap();
    for f in 2..mel.frames() - 2 {
        let row = mel.values.row(f);
        let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest, "frame {f}");
    }
}

#[test]
fn griffin_lim_recovers_sine_frequency_from_magnitude() {
    let cfg = SpectrogramConfig::default();
    let mag = stft(&tone(&[(220.0, 0.5)], 0.5), &cfg).unwrap().magnitude();
    let out = griffin_lim_linear(&mag, &cfg, DEFAULT_GRIFFIN_LIM_ITERS).unwrap().waveform;
    let f = dominant_frequency(&out, 150.0, 300.0);
    assert!((f - 220.0).abs() <= 2.0, "dominant {f}");
}

#[test]
fn griffin_lim_from_mel_stays_within_band_resolution() {
    // 80 bands over 8 kHz are ~37 Hz apart at 220 Hz, so the pseudo-inverse blurs the line
    let cfg = SpectrogramConfig::default();
    let mel = mel_spectrogram(&tone(&[(220.0, 0.5)], 0.5), &cfg).unwrap();
    let out = griffin_lim(&mel, DEFAULT_GRIFFIN_LIM_ITERS).unwrap();
    let f = dominant_frequency(&out, 150.0, 300.0);
    assert!((f - 220.0).abs() <= 5.0, "dominant {f}");
}

#[test]
fn griffin_lim_of_silence_is_silent() {
    let cfg = SpectrogramConfig::default();
    let mel = mel_spectrogram(&Waveform::silence(4096, 16000), &cfg).unwrap();
    let out = griffin_lim(&mel, 5).unwrap();
    assert!(out.samples().iter().all(|&s| s == 0.0));
    assert_eq!(out.len(), (mel.frames() - 1) * 256);
}

#[test]
fn griffin_lim_convergence_does_not_increase() {
    let cfg = SpectrogramConfig::default();
    // speech-like: noise shaped by a slowly moving resonance
    let base = noise(12000, 9, 0.2);
    let mut y = 0.0f32;
    let s: Vec<f32> = base
        .samples()
        .iter()
        .map(|&x| {
            y = 0.9 * y + x;
            y * 0.3
        })
        .collect();
    let w = Waveform::new(s, 16000).unwrap();
    let mel = mel_spectrogram(&w, &cfg).unwrap();
    let lin = mel_to_linear(&mel).unwrap();
    let trace = griffin_lim_linear(&lin, &cfg, 60).unwrap();
    let (e1, e10, e60) = (trace.convergence[0], trace.convergence[9], trace.convergence[59]);
    assert!(e10 <= e1 && e60 <= e10, "{e1} {e10} {e60}");
    assert!(e60 < e1);
}

#[test]
fn mu_law_examples() {
    assert_eq!(mu_law_encode_sample(0.0).unwrap(), 128);
    assert_eq!(mu_law_encode_sample(1.0).unwrap(), 255);
    assert_eq!(mu_law_encode_sample(-1.0).unwrap(), 0);
    let f = 128.5f64.ln() / 256f64.ln();
    assert!((mu_law_compand(0.5) - f).abs() < 1e-15);
    assert!((f - 0.87575).abs() < 1e-4);
    assert_eq!(mu_law_encode_sample(0.5).unwrap(), 240);
    assert!(mu_law_encode_sample(1.0001).is_err());
    let mid = mu_law_decode(&[128], 16000).unwrap().samples()[0];
    assert!(mid > 0.0 && mid.abs() <= 3.1e-3);
    assert!(mu_law_decode(&[256], 16000).is_err());
}

#[test]
fn mu_law_round_trip_over_uniform_samples() {
    let mut r = rng::seeded(42);
    let xs: Vec<f32> = (0..100_000).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
    let w = Waveform::new(xs.clone(), 16000).unwrap();
    let classes = mu_law_encode(&w).unwrap();
    let back = mu_law_decode(&classes, 16000).unwrap();
    for (x, y) in xs.iter().zip(back.samples()) {
        let err = (mu_law_compand(*x as f64) - mu_law_compand(*y as f64)).abs();
        assert!(err <= 1.0 / 256.0 + 1e-6, "x={x} err={err}");
    }
}

#[test]
fn mu_law_decode_is_strictly_increasing_and_encode_inverts_it() {
    let all: Vec<usize> = (0..256).collect();
    let decoded = mu_law_decode(&all, 16000).unwrap();
    for w in decoded.samples().windows(2) {
        assert!(w[0] < w[1]);
    }
    assert_eq!(mu_law_encode(&decoded).unwrap(), all);
}

proptest! {
    #[test]
    fn mu_law_encode_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mu_law_encode_sample(lo).unwrap() <= mu_law_encode_sample(hi).unwrap());
    }

    #[test]
    fn dtw_cost_is_symmetric(seed in 0u64..1000, n in 1usize..9, m in 1usize..9) {
        let mut r = rng::seeded(seed);
        let a = Matrix::from_fn(n, 3, |_, _| rng::normal(&mut r, 0.0, 1.0));
        let b = Matrix::from_fn(m, 3, |_, _| rng::normal(&mut r, 0.0, 1.0));
        let ab = dtw_align(&a, &b).unwrap();
        let ba = dtw_align(&b, &a).unwrap();
        prop_assert_eq!(ab.total_cost, ba.total_cost);
    }
}

fn naive_dct(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * (PI / n * (i as f64 + 0.5) * k as f64).cos()).sum();
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

#[test]
fn mel_cepstrum_matches_naive_dct_and_drops_energy() {
    let cfg = SpectrogramConfig::default();
    let mut r = rng::seeded(5);
    let frame: Vec<f64> = (0..80).map(|_| rng::normal(&mut r, -3.0, 2.0)).collect();
    let mel = MelSpectrogram::new(Matrix::new(1, 80, frame.clone()).unwrap(), cfg.clone()).unwrap();
    let cep = mel_cepstrum(&mel, 13).unwrap();
    let oracle = naive_dct(&frame);
    for j in 0..13 {
        assert!((cep.values.at(0, j) - oracle[j + 1]).abs() < 1e-10);
    }
    let constant = MelSpectrogram::new(Matrix::from_fn(3, 80, |_, _| -2.5), cfg.clone()).unwrap();
    let c = mel_cepstrum(&constant, 13).unwrap();
    assert!(c.values.data().iter().all(|v| v.abs() < 1e-12));
    assert_eq!(mel_cepstrum(&mel, 13).unwrap(), cep);
    assert!(mel_cepstrum(&mel, 81).is_err());
    let back = idct_ii(&dct_ii(&frame));
    for (a, b) in back.iter().zip(&frame) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn f0_of_pure_tones_within_two_hz() {
    for f in [80.0, 110.0, 150.0, 220.0, 310.0, 380.0] {
        let w = tone(&[(f, 0.8)], 0.6);
        let c = estimate_f0(&w, 256);
        let interior: Vec<usize> = (0..c.len()).filter(|&i| i * 256 >= 320 && i * 256 + 320 <= w.len()).collect();
        let good = interior.iter().filter(|&&i| c.voiced[i] && (c.f0_hz[i] - f).abs() <= 2.0).count();
        assert!(good * 10 >= interior.len() * 9, "tone {f}: {good}/{}", interior.len());
        assert!(interior.iter().all(|&i| c.voiced[i]));
    }
}

#[test]
fn f0_prefers_fundamental_over_octave_partial() {
    let w = tone(&[(110.0, 0.6), (220.0, 0.2)], 0.5);
    let c = estimate_f0(&w, 256);
    for i in 0..c.len() {
        if c.voiced[i] {
            assert!((c.f0_hz[i] - 110.0).abs() <= 2.0, "frame {i}: {}", c.f0_hz[i]);
        }
    }
    assert!(c.voiced_count() > 20);
}

#[test]
fn f0_of_silence_is_unvoiced() {
    let c = estimate_f0(&Waveform::silence(8000, 16000), 256);
    assert!(c.voiced.iter().all(|v| !v) && c.f0_hz.iter().all(|&f| f == 0.0));
    assert_eq!(c.len(), 8000 / 256 + 1);
}

/// Minimal path cost over every monotone path, by exhaustive recursion.
fn brute_force_dtw(a: &Matrix, b: &Matrix) -> f64 {
    fn go(a: &Matrix, b: &Matrix, i: usize, j: usize) -> f64 {
        let d = squared_euclidean(a.row(i), b.row(j));
        if i + 1 == a.rows() && j + 1 == b.rows() {
            return d;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.rows() {
            best = best.min(go(a, b, i + 1, j));
        }
        if j + 1 < b.rows() {
            best = best.min(go(a, b, i, j + 1));
        }
        if i + 1 < a.rows() && j + 1 < b.rows() {
            best = best.min(go(a, b, i + 1, j + 1));
        }
        d + best
    }
    go(a, b, 0, 0)
}

#[test]
fn dtw_examples() {
    let a = Matrix::from_fn(6, 2, |i, j| (i * 3 + j) as f64);
    let p = dtw_align(&a, &a).unwrap();
    assert_eq!(p.total_cost, 0.0);
    assert_eq!(p.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());

    let one = Matrix::new(1, 1, vec![0.0]).unwrap();
    let three = Matrix::new(3, 1, vec![0.0; 3]).unwrap();
    let p = dtw_align(&one, &three).unwrap();
    assert_eq!(p.pairs, vec![(0, 0), (0, 1), (0, 2)]);
    assert_eq!(p.total_cost, 0.0);

    let bad = Matrix::zeros(3, 2);
    assert!(dtw_align(&three, &bad).is_err());
}

#[test]
fn dtw_matches_exhaustive_enumeration() {
    let mut r = rng::seeded(11);
    let a = Matrix::from_fn(5, 2, |_, _| rng::normal(&mut r, 0.0, 1.0));
    let b = Matrix::from_fn(7, 2, |_, _| rng::normal(&mut r, 0.0, 1.0));
    let p = dtw_align(&a, &b).unwrap();
    assert!((p.total_cost - brute_force_dtw(&a, &b)).abs() < 1e-12);
    let along: f64 = p.pairs.iter().map(|&(i, j)| squared_euclidean(a.row(i), b.row(j))).sum();
    assert!((along - p.total_cost).abs() < 1e-12);
    for w in p.pairs.windows(2) {
        let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
    }
}
