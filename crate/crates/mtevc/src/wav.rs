//! 16-bit mono 16 kHz PCM WAV files.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use mtevc_core::dsp::Waveform;
use mtevc_core::SAMPLE_RATE;

use crate::error::{Error, Result};

fn expected_spec() -> WavSpec {
    WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: SampleFormat::Int }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::format(path, other.to_string()),
    }
}

/// Checks a header against the one layout the toolkit reads, naming the
/// first field that differs.
pub fn check_spec(spec: &WavSpec) -> std::result::Result<(), String> {
    let want = expected_spec();
    if spec.sample_format != want.sample_format {
        return Err(format!("sample_format is {:?}, expected integer PCM", spec.sample_format));
    }
    if spec.bits_per_sample != want.bits_per_sample {
        return Err(format!("bits_per_sample is {}, expected 16", spec.bits_per_sample));
    }
    if spec.channels != want.channels {
        return Err(format!("channels is {}, expected 1 (mono)", spec.channels));
    }
    if spec.sample_rate != want.sample_rate {
        return Err(format!("sample_rate is {}, expected {}", spec.sample_rate, want.sample_rate));
    }
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    check_spec(&reader.spec()).map_err(|m| Error::format(path, m))?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_err(path, e))?;
    Ok(Waveform::new(samples, SAMPLE_RATE)?)
}

/// Quantizes to 16 bits with clipping to `[-1, 1)`.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    if wav.sample_rate() != SAMPLE_RATE {
        return Err(Error::Data(format!("refusing to write {} Hz audio; the toolkit runs at {SAMPLE_RATE} Hz", wav.sample_rate())));
    }
    let mut writer = WavWriter::create(path, expected_spec()).map_err(|e| hound_err(path, e))?;
    for &s in wav.samples() {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}
