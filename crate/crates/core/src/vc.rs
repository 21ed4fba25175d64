//! Voice-conversion adapter. Any converter is a black box that yields either
//! a mel spectrogram (two-stage) or a waveform (one-stage); the adapter turns
//! both into the conditioning mel for hiding.

use std::f32::consts::PI;
use std::path::Path;
use std::process::Command;

use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{
    compute_mel, istft, load_wav, log_floor, save_wav, stft, MelSpectrogram, Spectrogram, StftConfig, Waveform,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VcRequest {
    pub source: Waveform,
    pub target: Waveform,
}

impl VcRequest {
    pub fn new(source: Waveform, target: Waveform) -> Result<Self> {
        if source.sample_rate() != target.sample_rate() {
            return Err(Error::Parameter(format!(
                "source rate {} differs from target rate {}",
                source.sample_rate(),
                target.sample_rate()
            )));
        }
        Ok(Self { source, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    TwoStage,
    OneStage,
    IdentityToy,
}

#[derive(Debug, Clone)]
pub enum VcOutput {
    Mel(MelSpectrogram),
    Wave(Waveform),
}

pub trait VcBackend {
    fn kind(&self) -> BackendKind;
    fn name(&self) -> String;
    fn run(&mut self, req: &VcRequest) -> Result<VcOutput>;
}

/// Converted mel for `req`, per the backend's kind.
pub fn convert_to_mel(req: &VcRequest, backend: &mut dyn VcBackend, cfg: &StftConfig) -> Result<MelSpectrogram> {
    let kind = backend.kind();
    let out = backend.run(req)?;
    match (kind, out) {
        (BackendKind::TwoStage, VcOutput::Mel(m)) => {
            if m.bands() != cfg.bands {
                return Err(Error::Conversion(format!(
                    "{} produced {} mel bands, expected {}",
                    backend.name(),
                    m.bands(),
                    cfg.bands
                )));
            }
            Ok(m)
        }
        (BackendKind::OneStage | BackendKind::IdentityToy, VcOutput::Wave(w)) => {
            if w.sample_rate() != cfg.sample_rate {
                return Err(Error::Conversion(format!(
                    "{} produced {} Hz audio, expected {}",
                    backend.name(),
                    w.sample_rate(),
                    cfg.sample_rate
                )));
            }
            compute_mel(&w, cfg)
        }
        (kind, _) => Err(Error::Conversion(format!(
            "{} returned the wrong output type for a {kind:?} backend",
            backend.name()
        ))),
    }
}

/// Round the frame count to the nearest whole number of chunks (at least
/// one), trimming or padding with the log floor.
pub fn fit_to_chunks(mel: &MelSpectrogram, chunk_frames: usize) -> Result<MelSpectrogram> {
    if chunk_frames == 0 {
        return Err(Error::Parameter("chunk frames must be positive".into()));
    }
    let chunks = ((mel.frames() + chunk_frames / 2) / chunk_frames).max(1);
    mel.fit_frames(chunks * chunk_frames)
}

/// Pass-through converter.
#[derive(Debug, Clone, Default)]
pub struct IdentityToy;

impl VcBackend for IdentityToy {
    fn kind(&self) -> BackendKind {
        BackendKind::IdentityToy
    }
    fn name(&self) -> String {
        "identity".into()
    }
    fn run(&mut self, req: &VcRequest) -> Result<VcOutput> {
        Ok(VcOutput::Wave(req.source.clone()))
    }
}

/// Uniform spectral warp by `2^(semitones/12)`, moving harmonics and
/// envelope together.
#[derive(Debug, Clone)]
pub struct PitchShift {
    pub semitones: f64,
}

impl VcBackend for PitchShift {
    fn kind(&self) -> BackendKind {
        BackendKind::OneStage
    }
    fn name(&self) -> String {
        format!("pitch-shift({:+})", self.semitones)
    }
    fn run(&mut self, req: &VcRequest) -> Result<VcOutput> {
        let r = 2f64.powf(self.semitones / 12.0) as f32;
        Ok(VcOutput::Wave(warp(&req.source, r, r)?))
    }
}

/// Moves the source's spectral envelope and pitch onto the target's.
#[derive(Debug, Clone, Default)]
pub struct TimbreTransfer;

impl VcBackend for TimbreTransfer {
    fn kind(&self) -> BackendKind {
        BackendKind::OneStage
    }
    fn name(&self) -> String {
        "timbre-transfer".into()
    }
    fn run(&mut self, req: &VcRequest) -> Result<VcOutput> {
        let rate = req.source.sample_rate();
        let spec_s = stft(req.source.samples(), N_FFT, HOP)?;
        let spec_t = stft(req.target.samples(), N_FFT, HOP)?;
        let alpha = envelope_ratio(&mean_envelope(&spec_s), &mean_envelope(&spec_t), rate);
        let beta = match (estimate_f0(&req.source), estimate_f0(&req.target)) {
            (Some(a), Some(b)) => (b / a).clamp(0.5, 2.0) as f32,
            _ => 1.0,
        };
        Ok(VcOutput::Wave(warp(&req.source, alpha, beta)?))
    }
}

/// External converter run as `template` with `{source}`, `{target}` and
/// `{out}` substituted; the output is a WAV or a mel text file.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub template: String,
    pub output: CommandOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandOutput {
    Wav,
    Mel,
}

impl VcBackend for CommandBackend {
    fn kind(&self) -> BackendKind {
        match self.output {
            CommandOutput::Wav => BackendKind::OneStage,
            CommandOutput::Mel => BackendKind::TwoStage,
        }
    }
    fn name(&self) -> String {
        self.template.split_whitespace().next().unwrap_or("command").to_string()
    }
    fn run(&mut self, req: &VcRequest) -> Result<VcOutput> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let src = dir.path().join("source.wav");
        let tgt = dir.path().join("target.wav");
        let out = dir.path().join(match self.output {
            CommandOutput::Wav => "out.wav",
            CommandOutput::Mel => "out.mel",
        });
        save_wav(&req.source, &src)?;
        save_wav(&req.target, &tgt)?;
        let args = crate::channel::expand_template(
            &self.template,
            &[("source", &src), ("target", &tgt), ("out", &out)],
            &[],
        )?;
        let output = Command::new(&args[0]).args(&args[1..]).output().map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Environment {
                    binary: args[0].clone(),
                    detail: "voice conversion command not found".into(),
                }
            } else {
                Error::Conversion(format!("{}: {e}", args[0]))
            }
        })?;
        if !output.status.success() {
            return Err(Error::Conversion(format!(
                "{} exited with {}: {}",
                args[0],
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        match self.output {
            CommandOutput::Wav => Ok(VcOutput::Wave(
                load_wav(&out).map_err(|e| Error::Conversion(e.to_string()))?,
            )),
            CommandOutput::Mel => Ok(VcOutput::Mel(
                read_mel_text(&out).map_err(|e| Error::Conversion(e.to_string()))?,
            )),
        }
    }
}

/// Declarative backend choice, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Identity,
    PitchShift { semitones: f64 },
    TimbreTransfer,
    Command { template: String, output: CommandOutput },
}

impl BackendSpec {
    pub fn build(&self) -> Box<dyn VcBackend> {
        match self {
            BackendSpec::Identity => Box::new(IdentityToy),
            BackendSpec::PitchShift { semitones } => Box::new(PitchShift { semitones: *semitones }),
            BackendSpec::TimbreTransfer => Box::new(TimbreTransfer),
            BackendSpec::Command { template, output } => Box::new(CommandBackend {
                template: template.clone(),
                output: *output,
            }),
        }
    }
}

/// Mel text file: a `frames bands hop` header line, then one line of
/// space-separated values per frame.
pub fn write_mel_text(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let mut s = format!("{} {} {}\n", mel.frames(), mel.bands(), mel.hop());
    for f in 0..mel.frames() {
        let row: Vec<String> = mel.frame(f).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    crate::nn::write_atomic(path.as_ref(), s.as_bytes())
}

pub fn read_mel_text(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("empty file"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad header")))
        .collect::<Result<_>>()?;
    let [frames, bands, hop] = header[..] else {
        return Err(bad("header needs frames, bands and hop"));
    };
    let values: Vec<f32> = lines
        .flat_map(|l| l.split_whitespace())
        .map(|t| t.parse().map_err(|_| bad("bad value")))
        .collect::<Result<_>>()?;
    if values.len() != frames * bands {
        return Err(bad("value count does not match header"));
    }
    MelSpectrogram::new(values, frames, bands, hop)
}

const N_FFT: usize = 1024;
const HOP: usize = 256;
const LIFTER: usize = 24;

fn log_mag(frame: &[Complex32]) -> Vec<f32> {
    frame.iter().map(|c| (c.norm() + 1e-7).ln()).collect()
}

/// Cepstrally smoothed log-magnitude envelope.
fn smooth_envelope(logmag: &[f32], fft: &dyn rustfft::Fft<f32>) -> Vec<f32> {
    let nb = logmag.len();
    let n = 2 * (nb - 1);
    let mut buf: Vec<Complex32> = (0..n)
        .map(|i| Complex32::new(if i < nb { logmag[i] } else { logmag[n - i] }, 0.0))
        .collect();
    fft.process(&mut buf);
    for (q, c) in buf.iter_mut().enumerate() {
        if q >= LIFTER && q <= n - LIFTER {
            *c = Complex32::new(0.0, 0.0);
        }
    }
    fft.process(&mut buf);
    buf[..nb].iter().map(|c| c.re / n as f32).collect()
}

fn interp(v: &[f32], x: f32) -> f32 {
    if x <= 0.0 {
        return v[0];
    }
    let i = x.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    let t = x - i as f32;
    v[i] * (1.0 - t) + v[i + 1] * t
}

fn mean_envelope(spec: &Spectrogram) -> Vec<f32> {
    let nb = spec.freq_bins();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(2 * (nb - 1));
    let mut acc = vec![0.0f32; nb];
    for f in 0..spec.frames {
        for (a, e) in acc.iter_mut().zip(smooth_envelope(&log_mag(spec.frame(f)), fft.as_ref())) {
            *a += e / spec.frames as f32;
        }
    }
    acc
}

/// Frequency scale `α` minimizing the squared distance between the warped
/// source envelope and the target envelope below 5 kHz.
fn envelope_ratio(src: &[f32], tgt: &[f32], rate: u32) -> f32 {
    let top = ((5000.0 / rate as f32) * N_FFT as f32) as usize;
    let cost = |a: f32| -> f32 {
        let ms: f32 = (1..top).map(|k| interp(src, k as f32 / a)).sum::<f32>() / (top - 1) as f32;
        let mt: f32 = tgt[1..top].iter().sum::<f32>() / (top - 1) as f32;
        (1..top)
            .map(|k| {
                let d = (interp(src, k as f32 / a) - ms) - (tgt[k] - mt);
                d * d
            })
            .sum()
    };
    (0..=100)
        .map(|i| 0.6 + i as f32 * 0.01)
        .min_by(|&a, &b| cost(a).total_cmp(&cost(b)))
        .unwrap_or(1.0)
}

/// Median of per-frame autocorrelation pitch estimates over voiced frames.
pub fn estimate_f0(w: &Waveform) -> Option<f64> {
    let sr = w.sample_rate() as f64;
    let x = w.samples();
    let frame = 1024;
    let (lo, hi) = ((sr / 400.0) as usize, (sr / 60.0) as usize);
    let mut estimates = Vec::new();
    let mut start = 0;
    while start + frame + hi <= x.len() {
        let seg = &x[start..start + frame + hi];
        let e0: f64 = seg[..frame].iter().map(|&v| (v as f64).powi(2)).sum();
        if e0 > 1e-3 {
            let r = |lag: usize| -> f64 {
                let (mut num, mut e1) = (0.0, 0.0);
                for i in 0..frame {
                    num += seg[i] as f64 * seg[i + lag] as f64;
                    e1 += (seg[i + lag] as f64).powi(2);
                }
                num / (e0 * e1).sqrt().max(1e-12)
            };
            let scores: Vec<f64> = (lo..=hi).map(r).collect();
            let best = scores.iter().cloned().fold(f64::MIN, f64::max);
            // earliest local peak close to the best avoids octave-down errors
            let peak = (1..scores.len() - 1)
                .find(|&i| scores[i] >= 0.9 * best && scores[i] >= scores[i - 1] && scores[i] >= scores[i + 1]);
            if let (Some(i), true) = (peak, best > 0.5) {
                let (a, b, c) = (scores[i - 1], scores[i], scores[i + 1]);
                let denom = a - 2.0 * b + c;
                let offset = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
                estimates.push(sr / ((lo + i) as f64 + offset));
            }
        }
        start += frame;
    }
    if estimates.is_empty() {
        return None;
    }
    estimates.sort_by(f64::total_cmp);
    Some(estimates[estimates.len() / 2])
}

/// Phase-vocoder warp: envelope scaled by `alpha`, harmonic fine structure
/// (and instantaneous frequency) by `beta`. Output has the source length.
fn warp(source: &Waveform, alpha: f32, beta: f32) -> Result<Waveform> {
    let spec = stft(source.samples(), N_FFT, HOP)?;
    let nb = spec.freq_bins();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(2 * (nb - 1));
    let mut out = spec.clone();
    let mut prev_phase = vec![0.0f32; nb];
    let mut acc_phase = vec![0.0f32; nb];
    let two_pi = 2.0 * PI;
    for f in 0..spec.frames {
        let frame = spec.frame(f);
        let lm = log_mag(frame);
        let env = smooth_envelope(&lm, fft.as_ref());
        let fine: Vec<f32> = lm.iter().zip(&env).map(|(l, e)| l - e).collect();
        let phase: Vec<f32> = frame.iter().map(|c| c.arg()).collect();
        let inst: Vec<f32> = (0..nb)
            .map(|k| {
                let omega = two_pi * k as f32 / N_FFT as f32;
                let mut d = phase[k] - prev_phase[k] - omega * HOP as f32;
                d -= two_pi * (d / two_pi).round();
                omega + d / HOP as f32
            })
            .collect();
        let dst = out.frame_mut(f);
        for (j, c) in dst.iter_mut().enumerate() {
            let src_f = j as f32 / beta;
            if src_f > (nb - 1) as f32 {
                *c = Complex32::new(0.0, 0.0);
                continue;
            }
            let mag = (interp(&env, j as f32 / alpha) + interp(&fine, src_f)).exp();
            let k = (src_f.round() as usize).min(nb - 1);
            acc_phase[j] = if f == 0 { phase[k] } else { acc_phase[j] + beta * inst[k] * HOP as f32 };
            *c = Complex32::from_polar(mag, acc_phase[j]);
        }
        prev_phase = phase;
    }
    let y = istft(&out, source.len());
    Waveform::new(y.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), source.sample_rate())
}

/// Log-floor pad value used when fitting converted mels to chunk boundaries.
pub fn pad_value() -> f32 {
    log_floor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel_filterbank;

    fn sine(hz: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 22050.0).sin()) as f32)
                .collect(),
            22050,
        )
        .unwrap()
    }

    fn dominant_band(m: &MelSpectrogram) -> usize {
        let mut acc = vec![0.0f32; m.bands()];
        for f in 8..m.frames() - 8 {
            for (a, v) in acc.iter_mut().zip(m.frame(f)) {
                *a += v;
            }
        }
        (0..m.bands()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap()
    }

    /// Band whose filter weighs a pure tone at `hz` most heavily.
    fn band_of(hz: f64, cfg: &StftConfig) -> usize {
        let fb = mel_filterbank(cfg);
        let nb = cfg.window_length / 2 + 1;
        let k = (hz * cfg.window_length as f64 / cfg.sample_rate as f64).round() as usize;
        (0..cfg.bands).max_by(|&a, &b| fb[a * nb + k].total_cmp(&fb[b * nb + k])).unwrap()
    }

    #[test]
    fn identity_is_compute_mel() {
        let cfg = StftConfig::default();
        let s = sine(440.0, 16384);
        let req = VcRequest::new(s.clone(), sine(220.0, 16384)).unwrap();
        let m = convert_to_mel(&req, &mut IdentityToy, &cfg).unwrap();
        assert_eq!((m.frames(), m.bands()), (64, 80));
        assert_eq!(m, compute_mel(&s, &cfg).unwrap());
    }

    #[test]
    fn pitch_shift_moves_dominant_band() {
        let cfg = StftConfig::default();
        let hz = 600.0;
        let semis = 7.0;
        let req = VcRequest::new(sine(hz, 16384), sine(hz, 16384)).unwrap();
        let before = dominant_band(&convert_to_mel(&req, &mut IdentityToy, &cfg).unwrap());
        let after = dominant_band(&convert_to_mel(&req, &mut PitchShift { semitones: semis }, &cfg).unwrap());
        assert_eq!(before, band_of(hz, &cfg));
        let expected = band_of(hz * 2f64.powf(semis / 12.0), &cfg);
        assert!(after.abs_diff(expected) <= 1, "{after} vs {expected}");
        assert!(after > before);
    }

    #[test]
    fn wrong_output_type_is_conversion_error() {
        struct Liar;
        impl VcBackend for Liar {
            fn kind(&self) -> BackendKind {
                BackendKind::TwoStage
            }
            fn name(&self) -> String {
                "liar".into()
            }
            fn run(&mut self, r: &VcRequest) -> Result<VcOutput> {
                Ok(VcOutput::Wave(r.source.clone()))
            }
        }
        let req = VcRequest::new(sine(100.0, 4096), sine(100.0, 4096)).unwrap();
        assert!(matches!(
            convert_to_mel(&req, &mut Liar, &StftConfig::default()),
            Err(Error::Conversion(_))
        ));
    }

    #[test]
    fn chunk_fitting_rounds_to_nearest() {
        let m = MelSpectrogram::new(vec![0.0; 100 * 80], 100, 80, 256).unwrap();
        assert_eq!(fit_to_chunks(&m, 64).unwrap().frames(), 128);
        let m = MelSpectrogram::new(vec![0.0; 90 * 80], 90, 80, 256).unwrap();
        let fit = fit_to_chunks(&m, 64).unwrap();
        assert_eq!(fit.frames(), 64);
        let m = MelSpectrogram::new(vec![0.0; 10 * 80], 10, 80, 256).unwrap();
        let fit = fit_to_chunks(&m, 64).unwrap();
        assert_eq!(fit.frames(), 64);
        assert_eq!(fit.get(63, 0), pad_value());
    }

    #[test]
    fn f0_estimate_on_harmonic_tone() {
        let w = Waveform::new(
            (0..22050)
                .map(|i| {
                    let t = i as f64 / 22050.0;
                    (0.3 * (2.0 * std::f64::consts::PI * 150.0 * t).sin()
                        + 0.2 * (2.0 * std::f64::consts::PI * 300.0 * t).sin()) as f32
                })
                .collect(),
            22050,
        )
        .unwrap();
        let f0 = estimate_f0(&w).unwrap();
        assert!((f0 - 150.0).abs() < 3.0, "{f0}");
    }

    #[test]
    fn mel_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MelSpectrogram::new((0..8 * 80).map(|i| i as f32 * 0.01 - 3.0).collect(), 8, 80, 256).unwrap();
        let p = dir.path().join("m.mel");
        write_mel_text(&m, &p).unwrap();
        assert_eq!(read_mel_text(&p).unwrap(), m);
    }
}
