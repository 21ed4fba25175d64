//! Audio representations, mel features, chunking and WAV persistence.

mod mel;
mod stft;
mod wav;

pub use mel::{compute_mel, mel_filterbank, MelExtractor};
pub use stft::{istft, reflect_pad, stft, Spectrogram};
pub use wav::{load_wav, pcm16_dequantize, pcm16_quantize, quantize_pcm16, save_wav};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Samples per hidden chunk: a multiple of the hop (256) and of the flow
/// squeeze factor (8), ~0.743 s at 22050 Hz.
pub const CHUNK_SAMPLES: usize = 16_384;

/// Natural-log floor applied to mel magnitudes before the logarithm.
pub const MEL_MAGNITUDE_FLOOR: f32 = 1e-5;

/// `ln(MEL_MAGNITUDE_FLOOR)`: the value of every silent mel cell.
pub fn log_floor() -> f32 {
    MEL_MAGNITUDE_FLOOR.ln()
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length("waveform must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power `Σx²/n`.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.len() as f64
    }

    pub fn clamped(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Length(format!(
                "slice [{start}, {}) outside waveform of {} samples",
                start + len,
                self.len()
            )));
        }
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    /// Trim or zero-pad to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Result<Waveform> {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform::new(samples, self.sample_rate)
    }

    pub fn concat(parts: &[Waveform]) -> Result<Waveform> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Length("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.sample_rate != first.sample_rate) {
            return Err(Error::Parameter("cannot concatenate mixed sample rates".into()));
        }
        let samples = parts.iter().flat_map(|p| p.samples.iter().copied()).collect();
        Waveform::new(samples, first.sample_rate)
    }
}

/// STFT and mel filterbank settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop: usize,
    pub bands: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window_length: 1024,
            hop: 256,
            bands: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_length < self.hop {
            return Err(Error::Parameter(format!(
                "window length {} must be at least the hop {} (> 0)",
                self.window_length, self.hop
            )));
        }
        if self.bands == 0 {
            return Err(Error::Parameter("mel band count must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Parameter(format!(
                "mel range [{}, {}] must satisfy 0 <= fmin < fmax <= {nyquist}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    /// Number of frames `compute_mel` yields for `samples` input samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop
    }
}

/// Log-magnitude mel spectrogram, `frames × bands`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    frames: usize,
    bands: usize,
    hop: usize,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, frames: usize, bands: usize, hop: usize) -> Result<Self> {
        if values.len() != frames * bands {
            return Err(Error::Shape(format!(
                "mel data has {} values, expected {frames}x{bands}",
                values.len()
            )));
        }
        if frames == 0 || bands == 0 {
            return Err(Error::Shape("mel spectrogram must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mel contains non-finite values".into()));
        }
        Ok(Self {
            values,
            frames,
            bands,
            hop,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.bands..(i + 1) * self.bands]
    }

    pub fn get(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * self.bands + band]
    }

    /// Frames `[start, start + count)`.
    pub fn slice_frames(&self, start: usize, count: usize) -> Result<MelSpectrogram> {
        if count == 0 || start + count > self.frames {
            return Err(Error::Shape(format!(
                "frame range [{start}, {}) outside {} frames",
                start + count,
                self.frames
            )));
        }
        MelSpectrogram::new(
            self.values[start * self.bands..(start + count) * self.bands].to_vec(),
            count,
            self.bands,
            self.hop,
        )
    }

    /// Trim to `frames`, or pad with silent (log-floor) frames.
    pub fn fit_frames(&self, frames: usize) -> Result<MelSpectrogram> {
        let mut values = self.values.clone();
        values.resize(frames * self.bands, log_floor());
        MelSpectrogram::new(values, frames, self.bands, self.hop)
    }

    /// Mean absolute difference to another spectrogram of the same shape.
    pub fn l1_distance(&self, other: &MelSpectrogram) -> Result<f64> {
        if self.frames != other.frames || self.bands != other.bands {
            return Err(Error::Shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.frames, self.bands, other.frames, other.bands
            )));
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.values.len() as f64)
    }
}

/// Split into consecutive non-overlapping chunks; a trailing remainder shorter
/// than `chunk_samples` is dropped.
pub fn chunk_split(w: &Waveform, chunk_samples: usize) -> Result<Vec<Waveform>> {
    if chunk_samples == 0 {
        return Err(Error::Parameter("chunk length must be positive".into()));
    }
    w.samples
        .chunks_exact(chunk_samples)
        .map(|c| Waveform::new(c.to_vec(), w.sample_rate))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i % 100) as f32 / 100.0).collect(), 22050).unwrap()
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_split(&ramp(49152), 16384).unwrap().len(), 3);
        assert_eq!(chunk_split(&ramp(16383), 16384).unwrap().len(), 0);
        let chunks = chunk_split(&ramp(40000), 16384).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(40000 - chunks.len() * 16384, 7232);
        assert!(matches!(chunk_split(&ramp(10), 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn chunks_concatenate_to_prefix() {
        let w = ramp(40000);
        let chunks = chunk_split(&w, 16384).unwrap();
        let joined = Waveform::concat(&chunks).unwrap();
        assert_eq!(joined.samples(), &w.samples()[..joined.len()]);
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(matches!(Waveform::new(vec![], 22050), Err(Error::Length(_))));
        assert!(matches!(
            Waveform::new(vec![f32::NAN], 22050),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn stft_config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad = StftConfig {
            fmax: 12000.0,
            ..StftConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = StftConfig {
            hop: 2048,
            ..StftConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mel_fit_frames_pads_with_floor() {
        let m = MelSpectrogram::new(vec![0.0; 4 * 2], 4, 2, 256).unwrap();
        let p = m.fit_frames(6).unwrap();
        assert_eq!(p.frames(), 6);
        assert_eq!(p.get(5, 1), log_floor());
        assert_eq!(m.fit_frames(2).unwrap().frames(), 2);
    }
}
