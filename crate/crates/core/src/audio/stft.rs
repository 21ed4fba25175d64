use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Complex STFT, `frames × (n_fft / 2 + 1)` row-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bins: Vec<Complex32>,
    pub frames: usize,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame(&self, i: usize) -> &[Complex32] {
        let f = self.freq_bins();
        &self.bins[i * f..(i + 1) * f]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [Complex32] {
        let f = self.freq_bins();
        &mut self.bins[i * f..(i + 1) * f]
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * 2.0 * i as f64 / n as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Mirror-pad `pad` samples on each side without repeating the edge sample.
pub fn reflect_pad(x: &[f32], pad: usize) -> Result<Vec<f32>> {
    if x.len() <= pad {
        return Err(Error::Length(format!(
            "reflect padding of {pad} needs more than {pad} samples, got {}",
            x.len()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    Ok(out)
}

/// Centered STFT with reflect padding of `n_fft / 2`; the trailing frame is
/// dropped so that the frame count is `len / hop`.
pub fn stft(x: &[f32], n_fft: usize, hop: usize) -> Result<Spectrogram> {
    if x.len() < n_fft {
        return Err(Error::Length(format!(
            "need at least one window ({n_fft} samples), got {}",
            x.len()
        )));
    }
    let padded = reflect_pad(x, n_fft / 2)?;
    let frames = x.len() / hop;
    let window = hann(n_fft);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let nb = n_fft / 2 + 1;
    let mut bins = Vec::with_capacity(frames * nb);
    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex32::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex32::new(padded[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        bins.extend_from_slice(&buf[..nb]);
    }
    Ok(Spectrogram {
        bins,
        frames,
        n_fft,
        hop,
    })
}

/// Weighted overlap-add inverse of [`stft`], producing `len` samples.
pub fn istft(spec: &Spectrogram, len: usize) -> Vec<f32> {
    let n_fft = spec.n_fft;
    let pad = n_fft / 2;
    let window = hann(n_fft);
    let ifft = FftPlanner::<f32>::new().plan_fft_inverse(n_fft);
    let total = (spec.frames.saturating_sub(1)) * spec.hop + n_fft;
    let mut acc = vec![0.0f32; total.max(len + 2 * pad)];
    let mut norm = vec![0.0f32; acc.len()];
    let nb = spec.freq_bins();
    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    for f in 0..spec.frames {
        let frame = spec.frame(f);
        buf[..nb].copy_from_slice(frame);
        for k in 1..n_fft - nb + 1 {
            buf[nb - 1 + k] = frame[nb - 1 - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * spec.hop;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re / n_fft as f32 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..len)
        .map(|i| {
            let j = i + pad;
            if norm[j] > 1e-6 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors() {
        let p = reflect_pad(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(p, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn istft_reconstructs_interior() {
        let x: Vec<f32> = (0..4096)
            .map(|i| (i as f32 * 0.031).sin() * 0.5 + (i as f32 * 0.17).cos() * 0.2)
            .collect();
        let s = stft(&x, 1024, 256).unwrap();
        let y = istft(&s, x.len());
        // the last few hundred samples are only covered by the dropped frame
        let err = x[..3584]
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "max error {err}");
    }
}
