use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Float sample to PCM16 code: clamp to [-1, 1], scale by 32767 and round
/// half away from zero.
pub fn pcm16_quantize(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16
}

pub fn pcm16_dequantize(q: i16) -> f32 {
    (q as f32 / 32767.0).max(-1.0)
}

/// Snap every sample onto the PCM16 grid, as a save/load round trip would.
pub fn quantize_pcm16(w: &Waveform) -> Waveform {
    let samples = w
        .samples()
        .iter()
        .map(|&s| pcm16_dequantize(pcm16_quantize(s)))
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("quantized samples are finite")
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in w.samples() {
        writer.write_sample(pcm16_quantize(s)).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => {
            Error::io(path, io)
        }
        other => fmt(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fmt(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fmt(format!(
            "expected 16-bit integer PCM, found {} bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(pcm16_dequantize))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fmt(e.to_string()))?;
    if samples.is_empty() {
        return Err(fmt("no samples".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}
