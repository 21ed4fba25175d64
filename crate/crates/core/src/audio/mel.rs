use super::stft::stft;
use super::{MelSpectrogram, StftConfig, Waveform, MEL_MAGNITUDE_FLOOR};
use crate::error::{Error, Result};

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney: linear below 1 kHz, logarithmic above
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Area-normalized triangular filters, `bands × (n_fft/2 + 1)` row-major.
pub fn mel_filterbank(cfg: &StftConfig) -> Vec<f32> {
    let nb = cfg.window_length / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.bands + 1) as f64))
        .collect();
    let fft_freqs: Vec<f64> = (0..nb)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.window_length as f64)
        .collect();
    let mut fb = vec![0.0f32; cfg.bands * nb];
    for m in 0..cfg.bands {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (r - l);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let w = up.min(down).max(0.0);
            fb[m * nb + k] = (w * enorm) as f32;
        }
    }
    fb
}

/// Reusable mel front end holding the filterbank for one configuration.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    cfg: StftConfig,
    filters: Vec<f32>,
}

impl MelExtractor {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            filters: mel_filterbank(&cfg),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Parameter(format!(
                "waveform rate {} differs from feature rate {}",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        self.compute_samples(w.samples())
    }

    pub fn compute_samples(&self, x: &[f32]) -> Result<MelSpectrogram> {
        let spec = stft(x, self.cfg.window_length, self.cfg.hop)?;
        let nb = spec.freq_bins();
        let bands = self.cfg.bands;
        let mut values = vec![0.0f32; spec.frames * bands];
        let mut mag = vec![0.0f32; nb];
        for f in 0..spec.frames {
            for (m, c) in mag.iter_mut().zip(spec.frame(f)) {
                *m = c.norm();
            }
            for b in 0..bands {
                let row = &self.filters[b * nb..(b + 1) * nb];
                let e: f32 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                values[f * bands + b] = e.max(MEL_MAGNITUDE_FLOOR).ln();
            }
        }
        MelSpectrogram::new(values, spec.frames, bands, self.cfg.hop)
    }
}

pub fn compute_mel(w: &Waveform, cfg: &StftConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(*cfg)?.compute(w)
}

#[cfg(test)]
mod tests {
    use super::super::log_floor;
    use super::*;

    /// Count every window that fits inside the padded signal, then drop the
    /// trailing one.
    fn enumerate_frames(len: usize, n_fft: usize, hop: usize) -> usize {
        let padded = len + n_fft;
        let mut count = 0;
        let mut start = 0;
        while start + n_fft <= padded {
            count += 1;
            start += hop;
        }
        count - 1
    }

    #[test]
    fn frame_counts_match_enumeration() {
        let cfg = StftConfig::default();
        for len in [1024usize, 16384, 2048, 5000] {
            let w = Waveform::new(vec![0.1; len], 22050).unwrap();
            let m = compute_mel(&w, &cfg).unwrap();
            assert_eq!(m.frames(), enumerate_frames(len, 1024, 256), "len {len}");
        }
        assert_eq!(enumerate_frames(16384, 1024, 256), 64);
        assert_eq!(enumerate_frames(1024, 1024, 256), 4);
    }

    #[test]
    fn zero_signal_is_floor() {
        let w = Waveform::new(vec![0.0; 16384], 22050).unwrap();
        let m = compute_mel(&w, &StftConfig::default()).unwrap();
        assert_eq!((m.frames(), m.bands()), (64, 80));
        assert!(m.values().iter().all(|&v| v == log_floor()));
    }

    #[test]
    fn short_input_rejected() {
        let w = Waveform::new(vec![0.0; 1023], 22050).unwrap();
        assert!(matches!(
            compute_mel(&w, &StftConfig::default()),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn mel_scale_inverts() {
        for hz in [0.0, 300.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn sine_peaks_in_matching_band() {
        let cfg = StftConfig::default();
        let fb = mel_filterbank(&cfg);
        let nb = 513;
        let hz = 2000.0;
        let x: Vec<f32> = (0..16384)
            .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 22050.0).sin() as f32 * 0.5)
            .collect();
        let m = compute_mel(&Waveform::new(x, 22050).unwrap(), &cfg).unwrap();
        let frame = m.frame(32);
        let argmax = (0..80).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        let k = (hz / (22050.0 / 1024.0)).round() as usize;
        let expected = (0..80)
            .max_by(|&a, &b| fb[a * nb + k].total_cmp(&fb[b * nb + k]))
            .unwrap();
        assert!(argmax.abs_diff(expected) <= 1);
    }
}
