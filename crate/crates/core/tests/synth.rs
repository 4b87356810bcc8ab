use mtevc_core::dsp::{estimate_f0, SpectrogramConfig};
use mtevc_core::synth::*;

fn classes(u: &SyntheticUtterance) -> Vec<usize> {
    let m = u.ppg.values();
    let mut seq: Vec<usize> = Vec::new();
    for f in 0..m.rows() {
        let row = m.row(f);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        if seq.last() != Some(&arg) {
            seq.push(arg);
        }
    }
    seq
}

#[test]
fn corpus_counts_and_ppg_rows() {
    let spec = SyntheticCorpusSpec::new(2, 3, 5);
    let corpus = generate(&spec, 256).unwrap();
    assert_eq!(corpus.len(), 30);
    let ids: std::collections::BTreeSet<_> = corpus.iter().map(|u| u.utterance_id.clone()).collect();
    assert_eq!(ids.len(), 30);
    for u in &corpus {
        assert_eq!(u.ppg.dim(), PPG_DIM);
        assert_eq!(u.ppg.frames(), u.waveform.len() / 256 + 1);
        for f in 0..u.ppg.frames() {
            let s: f64 = u.ppg.values().row(f).iter().sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
        assert!(u.waveform.peak() <= 0.5 + 1e-6);
    }
    assert_eq!(spec.emotions.last().unwrap().name, "neutral");
}

#[test]
fn parallel_renderings_share_ppg_trajectories_up_to_warp() {
    let spec = SyntheticCorpusSpec::new(2, 6, 3);
    for index in 0..3 {
        let reference = classes(&render(&spec, 0, 5, index, 256).unwrap());
        for speaker in 0..2 {
            for emotion in 0..6 {
                let u = render(&spec, speaker, emotion, index, 256).unwrap();
                assert_eq!(classes(&u), reference, "speaker {speaker} emotion {emotion}");
                assert_eq!(u.text, format!("sentence{index:03}"));
            }
        }
    }
}

#[test]
fn rendering_is_deterministic_and_pitch_follows_profile() {
    let spec = SyntheticCorpusSpec::new(2, 6, 1);
    let a = render(&spec, 1, 0, 0, 256).unwrap();
    let b = render(&spec, 1, 0, 0, 256).unwrap();
    assert_eq!(a.waveform, b.waveform);
    let cfg = SpectrogramConfig::default();
    let median_f0 = |sp: usize, e: usize| {
        let u = render(&spec, sp, e, 0, 256).unwrap();
        let c = estimate_f0(&u.waveform, cfg.hop_length);
        let mut v: Vec<f64> = (0..c.len()).filter(|&i| c.voiced[i]).map(|i| c.f0_hz[i]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let neutral = median_f0(0, 5);
    let happy = median_f0(0, 0);
    let sad = median_f0(0, 1);
    assert!(happy > neutral * 1.1 && sad < neutral * 0.93, "{happy} {neutral} {sad}");
    assert!(median_f0(1, 5) > neutral * 1.3);
    // content pitch stays within three semitones of the emotion's level
    assert!(neutral > 120.0 * 0.79 && neutral < 120.0 * 1.26);
}

#[test]
fn warp_changes_duration() {
    let spec = SyntheticCorpusSpec::new(1, 6, 1);
    let sad = render(&spec, 0, 1, 0, 256).unwrap();
    let neutral = render(&spec, 0, 5, 0, 256).unwrap();
    assert!(sad.waveform.len() > neutral.waveform.len());
}
