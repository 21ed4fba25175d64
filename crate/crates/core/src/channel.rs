//! Transmission channel: PCM16 quantization, external codec round trips,
//! realignment and post-codec audio processing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::process::Command;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, pcm16_dequantize, pcm16_quantize, quantize_pcm16, save_wav, Waveform};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const MAX_LAG: usize = 2048;
pub const MIN_ALIGNMENT_PEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    None,
    Aac,
    Mp3,
    Opus,
    Silk,
}

impl Codec {
    pub fn name(self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::Aac => "aac",
            Codec::Mp3 => "mp3",
            Codec::Opus => "opus",
            Codec::Silk => "silk",
        }
    }

    /// Default evaluation grid.
    pub fn bitrate_grid(self) -> Vec<Bitrate> {
        use Bitrate::*;
        match self {
            Codec::None => vec![],
            Codec::Aac | Codec::Mp3 => vec![Kbps(128), Kbps(96), Kbps(64), Kbps(32), Vbr],
            Codec::Opus => vec![Kbps(64), Kbps(48), Kbps(32), Kbps(24)],
            Codec::Silk => vec![Kbps(40), Kbps(32), Kbps(25), Kbps(16)],
        }
    }

    fn legal(self, b: Bitrate) -> bool {
        match (self, b) {
            (Codec::None, _) => false,
            (Codec::Aac | Codec::Mp3, Bitrate::Vbr) => true,
            (_, Bitrate::Vbr) => false,
            (Codec::Aac | Codec::Mp3, Bitrate::Kbps(k)) => (8..=320).contains(&k),
            (Codec::Opus, Bitrate::Kbps(k)) => (6..=510).contains(&k),
            (Codec::Silk, Bitrate::Kbps(k)) => (6..=40).contains(&k),
        }
    }
}

impl FromStr for Codec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Codec::None,
            "aac" => Codec::Aac,
            "mp3" => Codec::Mp3,
            "opus" => Codec::Opus,
            "silk" => Codec::Silk,
            other => return Err(Error::Config(format!("unknown codec {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bitrate {
    Kbps(u32),
    Vbr,
}

impl fmt::Display for Bitrate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bitrate::Kbps(k) => write!(f, "{k}"),
            Bitrate::Vbr => write!(f, "vbr"),
        }
    }
}

impl FromStr for Bitrate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("vbr") {
            return Ok(Bitrate::Vbr);
        }
        s.parse()
            .map(Bitrate::Kbps)
            .map_err(|_| Error::Config(format!("bad bitrate {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ProcessingOp {
    GaussianNoise { snr_db: f64 },
    ResampleRoundtrip { rate: u32 },
    Requantize { bits: u32 },
    Amplitude { factor: f64 },
    LowpassButterworth { cutoff: f64 },
    MedianFilter { window: usize },
}

impl ProcessingOp {
    fn in_default_set(&self) -> bool {
        match *self {
            ProcessingOp::GaussianNoise { snr_db } => [20.0, 30.0, 40.0, 50.0].contains(&snr_db),
            ProcessingOp::ResampleRoundtrip { rate } => [16000, 24000].contains(&rate),
            ProcessingOp::Requantize { bits } => [8, 32].contains(&bits),
            ProcessingOp::Amplitude { factor } => factor == 0.9,
            ProcessingOp::LowpassButterworth { cutoff } => cutoff == 1000.0,
            ProcessingOp::MedianFilter { window } => window == 3,
        }
    }

    pub fn apply(&self, w: &Waveform, seed: u64) -> Result<Waveform> {
        match *self {
            ProcessingOp::GaussianNoise { snr_db } => add_gaussian_noise(w, snr_db, seed),
            ProcessingOp::ResampleRoundtrip { rate } => resample_roundtrip(w, rate),
            ProcessingOp::Requantize { bits } => requantize(w, bits),
            ProcessingOp::Amplitude { factor } => amplitude_scale(w, factor),
            ProcessingOp::LowpassButterworth { cutoff } => lowpass_butterworth(w, cutoff),
            ProcessingOp::MedianFilter { window } => median_filter(w, window),
        }
    }
}

impl fmt::Display for ProcessingOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessingOp::GaussianNoise { snr_db } => write!(f, "noise:{snr_db}"),
            ProcessingOp::ResampleRoundtrip { rate } => write!(f, "resample:{rate}"),
            ProcessingOp::Requantize { bits } => write!(f, "requant:{bits}"),
            ProcessingOp::Amplitude { factor } => write!(f, "amp:{factor}"),
            ProcessingOp::LowpassButterworth { cutoff } => write!(f, "lowpass:{cutoff}"),
            ProcessingOp::MedianFilter { window } => write!(f, "median:{window}"),
        }
    }
}

impl FromStr for ProcessingOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad processing op {s:?}"));
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |_: ()| arg.parse::<f64>().map_err(|_| bad());
        Ok(match name {
            "noise" => ProcessingOp::GaussianNoise { snr_db: num(())? },
            "resample" => ProcessingOp::ResampleRoundtrip { rate: arg.parse().map_err(|_| bad())? },
            "requant" => ProcessingOp::Requantize { bits: arg.parse().map_err(|_| bad())? },
            "amp" => ProcessingOp::Amplitude { factor: num(())? },
            "lowpass" => ProcessingOp::LowpassButterworth { cutoff: num(())? },
            "median" => ProcessingOp::MedianFilter { window: arg.parse().map_err(|_| bad())? },
            _ => return Err(bad()),
        })
    }
}

/// One transmission scenario. Text form: `codec[@bitrate][+op:arg...]`,
/// e.g. `mp3@64+noise:30`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr")]
pub struct ChannelSpec {
    pub codec: Codec,
    #[serde(default, with = "bitrate_serde")]
    pub bitrate: Option<Bitrate>,
    #[serde(default)]
    pub ops: Vec<ProcessingOp>,
    /// Permit parameters outside the default enumerated sets.
    #[serde(default)]
    pub arbitrary: bool,
}

/// Configuration files may give a spec as text or as a table.
#[derive(Deserialize)]
#[serde(untagged)]
enum SpecRepr {
    Text(String),
    Table {
        codec: Codec,
        #[serde(default, with = "bitrate_serde")]
        bitrate: Option<Bitrate>,
        #[serde(default)]
        ops: Vec<OpRepr>,
        #[serde(default)]
        arbitrary: bool,
    },
}

/// An op as `lowpass:4000` or as `{ op = "lowpass_butterworth", cutoff = 4000 }`.
#[derive(Deserialize)]
#[serde(untagged)]
enum OpRepr {
    Text(String),
    Op(ProcessingOp),
}

impl TryFrom<SpecRepr> for ChannelSpec {
    type Error = Error;
    fn try_from(r: SpecRepr) -> Result<Self> {
        match r {
            SpecRepr::Text(s) => s.parse(),
            SpecRepr::Table {
                codec,
                bitrate,
                ops,
                arbitrary,
            } => {
                let ops = ops
                    .into_iter()
                    .map(|o| match o {
                        OpRepr::Text(t) => t.parse(),
                        OpRepr::Op(op) => Ok(op),
                    })
                    .collect::<Result<_>>()?;
                let spec = ChannelSpec {
                    codec,
                    bitrate,
                    ops,
                    arbitrary,
                };
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

mod bitrate_serde {
    use super::Bitrate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Bitrate>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(b) => s.serialize_str(&b.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Bitrate>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::N(k)) => Ok(Some(Bitrate::Kbps(k))),
            Some(Raw::S(s)) => s.parse().map(Some).map_err(serde::de::Error::custom),
        }
    }
}

impl ChannelSpec {
    pub fn identity() -> Self {
        Self {
            codec: Codec::None,
            bitrate: None,
            ops: vec![],
            arbitrary: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.codec, self.bitrate) {
            (Codec::None, Some(_)) => return Err(Error::Config("bitrate given without a codec".into())),
            (Codec::None, None) => {}
            (c, None) => return Err(Error::Config(format!("{} needs a bitrate", c.name()))),
            (c, Some(b)) if !c.legal(b) => {
                return Err(Error::Config(format!("{b} kbps is not legal for {}", c.name())))
            }
            _ => {}
        }
        for op in &self.ops {
            if !self.arbitrary && !op.in_default_set() {
                return Err(Error::Parameter(format!(
                    "{op} is outside the default parameter set; set arbitrary to allow it"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.codec.name())?;
        if let Some(b) = self.bitrate {
            write!(f, "@{b}")?;
        }
        for op in &self.ops {
            write!(f, "+{op}")?;
        }
        Ok(())
    }
}

impl FromStr for ChannelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default();
        let (codec, bitrate) = match head.split_once('@') {
            Some((c, b)) => (c.parse()?, Some(b.parse()?)),
            None => (head.parse()?, None),
        };
        let ops = parts.map(str::parse).collect::<Result<_>>()?;
        let spec = ChannelSpec {
            codec,
            bitrate,
            ops,
            arbitrary: false,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Split `template` like a shell would, then substitute `{name}` in every
/// token.
pub fn expand_template(template: &str, paths: &[(&str, &Path)], values: &[(&str, &str)]) -> Result<Vec<String>> {
    let tokens = shlex::split(template).ok_or_else(|| Error::Config(format!("cannot parse command {template:?}")))?;
    if tokens.is_empty() {
        return Err(Error::Config("empty command template".into()));
    }
    Ok(tokens
        .into_iter()
        .map(|mut t| {
            for (k, p) in paths {
                t = t.replace(&format!("{{{k}}}"), &p.to_string_lossy());
            }
            for (k, v) in values {
                t = t.replace(&format!("{{{k}}}"), v);
            }
            t
        })
        .collect())
}

/// Encoder and decoder command templates for one codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecCommand {
    pub encode: String,
    pub decode: String,
    /// Extension of the intermediate file, e.g. `mp3`.
    pub extension: String,
    /// Pinned version string, reported alongside results.
    #[serde(default)]
    pub version: Option<String>,
    /// Name of the codec actually run when it stands in for another.
    #[serde(default)]
    pub substitute: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecRegistry {
    #[serde(flatten)]
    pub codecs: BTreeMap<Codec, CodecCommand>,
}

fn run(args: &[String]) -> Result<()> {
    let out = Command::new(&args[0]).args(&args[1..]).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound || e.kind() == std::io::ErrorKind::PermissionDenied {
            Error::Environment {
                binary: args[0].clone(),
                detail: e.to_string(),
            }
        } else {
            Error::io(&args[0], e)
        }
    })?;
    if !out.status.success() {
        return Err(Error::Environment {
            binary: args[0].clone(),
            detail: format!("exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()),
        });
    }
    Ok(())
}

impl CodecRegistry {
    pub fn with(mut self, codec: Codec, cmd: CodecCommand) -> Self {
        self.codecs.insert(codec, cmd);
        self
    }

    /// Encode then decode through the external tools in a private temp dir.
    pub fn round_trip(&self, w: &Waveform, codec: Codec, bitrate: Bitrate) -> Result<Waveform> {
        let cmd = self.codecs.get(&codec).ok_or_else(|| Error::Environment {
            binary: codec.name().into(),
            detail: "no command configured for this codec".into(),
        })?;
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("in.wav");
        let coded = dir.path().join(format!("coded.{}", cmd.extension));
        let output = dir.path().join("out.wav");
        save_wav(w, &input)?;
        let rate = bitrate.to_string();
        run(&expand_template(&cmd.encode, &[("in", &input), ("out", &coded)], &[("bitrate", &rate)])?)?;
        run(&expand_template(&cmd.decode, &[("in", &coded), ("out", &output)], &[("bitrate", &rate)])?)?;
        let decoded = load_wav(&output)?;
        if decoded.sample_rate() != w.sample_rate() {
            return resample(&decoded, w.sample_rate());
        }
        Ok(decoded)
    }
}

/// Quantize, run the codec, realign to the input, then apply `ops` in order.
pub fn transmit(w: &Waveform, spec: &ChannelSpec, codecs: &CodecRegistry, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    let reference = quantize_pcm16(w);
    let mut x = match (spec.codec, spec.bitrate) {
        (Codec::None, _) => reference.clone(),
        (codec, Some(b)) => {
            let decoded = codecs.round_trip(&reference, codec, b)?;
            realign(&reference, &decoded)?
        }
        (_, None) => unreachable!("validated above"),
    };
    for (i, op) in spec.ops.iter().enumerate() {
        x = op.apply(&x, derive_seed(seed, crate::rng::streams::CHANNEL, i as u64))?;
    }
    debug_assert_eq!(x.len(), w.len());
    Ok(x)
}

pub fn add_gaussian_noise(w: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("snr {snr_db} dB is not finite")));
    }
    let p = w.power();
    if p <= 0.0 {
        return Err(Error::Numeric("SNR is undefined for a zero-energy signal".into()));
    }
    let sigma = (p / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = w
        .samples()
        .iter()
        .map(|&s| (s as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Waveform::new(samples, w.sample_rate())
}

pub fn amplitude_scale(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Parameter(format!("amplitude factor {factor} must be positive")));
    }
    let f = factor as f32;
    Waveform::new(w.samples().iter().map(|&s| s * f).collect(), w.sample_rate())
}

/// Re-quantize onto a symmetric `bits`-bit grid. 16 bits reproduces PCM16.
pub fn requantize(w: &Waveform, bits: u32) -> Result<Waveform> {
    if !(2..=32).contains(&bits) {
        return Err(Error::Parameter(format!("cannot requantize to {bits} bits")));
    }
    if bits == 16 {
        return Ok(quantize_pcm16(w));
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let samples = w
        .samples()
        .iter()
        .map(|&s| ((s.clamp(-1.0, 1.0) as f64 * levels).round() / levels) as f32)
        .collect();
    Waveform::new(samples, w.sample_rate())
}

/// Sliding median with replicated edges; `window` must be odd.
pub fn median_filter(w: &Waveform, window: usize) -> Result<Waveform> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Parameter(format!("median window {window} must be odd")));
    }
    let x = w.samples();
    let h = window / 2;
    let n = x.len() as isize;
    let mut buf = vec![0.0f32; window];
    let samples = (0..n)
        .map(|i| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(i + j as isize - h as isize).clamp(0, n - 1) as usize];
            }
            buf.sort_by(f32::total_cmp);
            buf[h]
        })
        .collect();
    Waveform::new(samples, w.sample_rate())
}

/// Windowed-sinc resampling to `rate`.
pub fn resample(w: &Waveform, rate: u32) -> Result<Waveform> {
    if rate == 0 {
        return Err(Error::Parameter("target rate must be positive".into()));
    }
    let from = w.sample_rate() as f64;
    let to = rate as f64;
    if rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let x = w.samples();
    let ratio = to / from;
    let out_len = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    // cutoff in cycles per input sample, slightly under Nyquist
    let fc = 0.5 * ratio.min(1.0) * 0.95;
    let zero_crossings = 16.0;
    let half = (zero_crossings / (2.0 * fc)).ceil() as isize;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let centre = t.floor() as isize;
            let mut acc = 0.0;
            for k in centre - half + 1..=centre + half {
                if k < 0 || k >= x.len() as isize {
                    continue;
                }
                let d = t - k as f64;
                let arg = 2.0 * fc * d;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg) };
                let u = d / half as f64;
                if u.abs() >= 1.0 {
                    continue;
                }
                let win = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
                acc += x[k as usize] as f64 * 2.0 * fc * sinc * win;
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, rate)
}

/// Down to `rate` and back, trimmed or zero-padded to the input length.
pub fn resample_roundtrip(w: &Waveform, rate: u32) -> Result<Waveform> {
    if rate == 0 || rate > 4 * w.sample_rate() {
        return Err(Error::Parameter(format!("bad intermediate rate {rate}")));
    }
    resample(&resample(w, rate)?, w.sample_rate())?.fit_to(w.len())
}

/// Second-order sections `[b0, b1, b2, a0, a1, a2]`.
pub type Sos = Vec<[f64; 6]>;

/// Digital Butterworth lowpass via the bilinear transform with prewarping,
/// unity gain at DC.
pub fn butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Sos> {
    if order == 0 || !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::Parameter(format!("bad lowpass: order {order}, cutoff {cutoff} Hz")));
    }
    let wc = 2.0 * fs * (std::f64::consts::PI * cutoff / fs).tan();
    let k2 = 2.0 * fs;
    let mut sos = Vec::new();
    for k in 0..order / 2 {
        let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(wc, theta);
        let z = (k2 + p) / (k2 - p);
        let a1 = -2.0 * z.re;
        let a2 = z.norm_sqr();
        let g = (1.0 + a1 + a2) / 4.0;
        sos.push([g, 2.0 * g, g, 1.0, a1, a2]);
    }
    if order % 2 == 1 {
        let z = (k2 - wc) / (k2 + wc);
        let g = (1.0 - z) / 2.0;
        sos.push([g, g, 0.0, 1.0, -z, 0.0]);
    }
    Ok(sos)
}

fn sosfilt(sos: &Sos, x: &mut [f64], zi: &[[f64; 2]]) {
    for (s, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2, _, a1, a2] = *s;
        let (mut z1, mut z2) = (z0[0], z0[1]);
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z1;
            z1 = b1 * xi - a1 * y + z2;
            z2 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// Steady-state section states for a unit step input.
fn sosfilt_zi(sos: &Sos) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2, _, a1, a2] = *s;
            // (I - A^T) zi = b[1:] - a[1:] b0 for the transposed direct form
            let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
            let z1 = (r0 + r1) / (1.0 + a1 + a2);
            let z2 = r1 - a2 * z1;
            let out = [scale * z1, scale * z2];
            scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
            out
        })
        .collect()
}

/// Forward-backward filtering with odd extension and steady-state initial
/// conditions.
pub fn sosfiltfilt(sos: &Sos, x: &[f64]) -> Result<Vec<f64>> {
    let zeros_b = sos.iter().filter(|s| s[2] == 0.0).count();
    let zeros_a = sos.iter().filter(|s| s[5] == 0.0).count();
    let padlen = 3 * (2 * sos.len() + 1 - zeros_b.min(zeros_a));
    let n = x.len();
    if n <= padlen {
        return Err(Error::Length(format!("filtering needs more than {padlen} samples, got {n}")));
    }
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    ext.extend((1..=padlen).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=padlen).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let zi = sosfilt_zi(sos);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let x0 = ext[0];
    sosfilt(sos, &mut ext, &scaled(x0));
    ext.reverse();
    let y0 = ext[0];
    sosfilt(sos, &mut ext, &scaled(y0));
    ext.reverse();
    Ok(ext[padlen..padlen + n].to_vec())
}

pub const BUTTERWORTH_ORDER: usize = 5;

/// Zero-phase order-5 Butterworth lowpass.
pub fn lowpass_butterworth(w: &Waveform, cutoff: f64) -> Result<Waveform> {
    let sos = butterworth_lowpass(BUTTERWORTH_ORDER, cutoff, w.sample_rate() as f64)?;
    let x: Vec<f64> = w.samples().iter().map(|&v| v as f64).collect();
    let y = sosfiltfilt(&sos, &x)?;
    Waveform::new(y.into_iter().map(|v| v as f32).collect(), w.sample_rate())
}

/// Lag of `degraded` relative to `reference` maximizing the normalized
/// cross-correlation over `[-max_lag, max_lag]`, with the peak value.
pub fn find_delay(reference: &[f32], degraded: &[f32], max_lag: usize) -> Result<(isize, f64)> {
    let (nr, nd) = (reference.len(), degraded.len());
    let size = (nr + nd).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex64> = (0..size)
        .map(|i| Complex64::new(reference.get(i).map_or(0.0, |&v| v as f64), 0.0))
        .collect();
    let mut b: Vec<Complex64> = (0..size)
        .map(|i| Complex64::new(degraded.get(i).map_or(0.0, |&v| v as f64), 0.0))
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    let mut c: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x.conj() * y).collect();
    inv.process(&mut c);
    let er: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    let ed: f64 = degraded.iter().map(|&v| (v as f64).powi(2)).sum();
    let norm = (er * ed).sqrt().max(1e-300) * size as f64;
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -(max_lag as isize)..=max_lag as isize {
        let idx = lag.rem_euclid(size as isize) as usize;
        let v = c[idx].re / norm;
        if v > best.1 {
            best = (lag, v);
        }
    }
    Ok(best)
}

/// Shift `degraded` onto `reference` and trim or zero-pad to its length.
pub fn realign(reference: &Waveform, degraded: &Waveform) -> Result<Waveform> {
    if degraded.len() + MAX_LAG < reference.len() {
        return Err(Error::Length(format!(
            "degraded audio ({} samples) is too short to align with {} samples",
            degraded.len(),
            reference.len()
        )));
    }
    let (lag, peak) = find_delay(reference.samples(), degraded.samples(), MAX_LAG)?;
    if !(peak >= MIN_ALIGNMENT_PEAK) {
        return Err(Error::Alignment {
            peak,
            min: MIN_ALIGNMENT_PEAK,
        });
    }
    let d = degraded.samples();
    let samples = (0..reference.len() as isize)
        .map(|i| {
            let j = i + lag;
            if j >= 0 && (j as usize) < d.len() {
                d[j as usize]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, reference.sample_rate())
}

/// Measured SNR in dB of `noisy` against `clean`.
pub fn snr_db(clean: &Waveform, noisy: &Waveform) -> f64 {
    let noise: f64 = clean
        .samples()
        .iter()
        .zip(noisy.samples())
        .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    10.0 * (clean.power() / noise).log10()
}

/// Every PCM16 code maps back to itself through `requantize(32)`.
pub fn pcm16_is_lossless_at_32_bits() -> bool {
    (i16::MIN..=i16::MAX).all(|q| {
        let v = pcm16_dequantize(q);
        let w = Waveform::new(vec![v], 22050).expect("finite");
        let r = requantize(&w, 32).expect("valid bits").samples()[0];
        pcm16_quantize(r) == pcm16_quantize(v) && r == v
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn wave(x: Vec<f32>) -> Waveform {
        Waveform::new(x, 22050).unwrap()
    }

    fn noise_wave(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wave((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect())
    }

    #[test]
    fn op_examples() {
        let y = requantize(&wave(vec![0.5]), 8).unwrap();
        assert!((y.samples()[0] - 0.5).abs() <= 2f32.powi(-7));
        let y = median_filter(&wave(vec![0.0, 1.0, 0.0, 1.0, 0.0]), 3).unwrap();
        assert_eq!(y.samples(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = amplitude_scale(&wave(vec![1.0, -0.5]), 0.9).unwrap();
        assert_eq!(y.samples(), &[0.9, -0.45]);
        assert!(matches!(median_filter(&wave(vec![0.0]), 2), Err(Error::Parameter(_))));
        assert!(matches!(requantize(&wave(vec![0.0]), 40), Err(Error::Parameter(_))));
    }

    #[test]
    fn requantize_32_is_lossless_on_pcm16() {
        assert!(pcm16_is_lossless_at_32_bits());
    }

    #[test]
    fn noise_realizes_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = wave((0..16384).map(|_| rng.random_range(-1.0f32..1.0) * 0.5).collect());
        for snr in [20.0, 30.0, 40.0, 50.0] {
            let y = add_gaussian_noise(&x, snr, 4).unwrap();
            assert!((snr_db(&x, &y) - snr).abs() <= 0.5);
        }
        assert_eq!(add_gaussian_noise(&x, 30.0, 1).unwrap(), add_gaussian_noise(&x, 30.0, 1).unwrap());
        assert!(matches!(add_gaussian_noise(&wave(vec![0.0; 8]), 20.0, 0), Err(Error::Numeric(_))));
    }

    /// Filtered with scipy.signal.sosfiltfilt(butter(5, 1000, fs=22050,
    /// output='sos'), x) for x[i] = sin(0.05 i) + 0.5 sin(1.3 i) + 0.1 cos(2.9 i).
    const SCIPY_FILTFILT: [f64; 64] = [
        0.10764639396981589, 0.14416835700359182, 0.179306434003381, 0.21353231460369212,
        0.24737219924989082, 0.2813456316686292, 0.31591215769153463, 0.35142944084664596,
        0.3881248248932778, 0.42608088873668015, 0.4652343820873649, 0.5053869527117028,
        0.5462252580377216, 0.5873475604114591, 0.6282938604929441, 0.6685769024904314,
        0.7077117414410511, 0.7452419140313844, 0.7807607187788309, 0.8139267498698203,
        0.844473477972915, 0.8722131161157975, 0.897035246910181, 0.9189008982103422,
        0.9378330180146733, 0.9539044769970607, 0.9672246734337814, 0.9779256109604965,
        0.9861481775771208, 0.9920293354422033, 0.9956908814164211, 0.9972302382021208,
        0.9967134930861923, 0.9941708049145204, 0.9895943484183111, 0.9829389671098311,
        0.9741255546142408, 0.9630470037651967, 0.9495765154679071, 0.9335780974883028,
        0.9149190115154203, 0.8934836853968814, 0.8691883630288633, 0.8419956756291636,
        0.8119283196171765, 0.7790809464650031, 0.7436292082211701, 0.705834857647815,
        0.6660460064282797, 0.6246919911816825, 0.5822726066527827, 0.5393417496645012,
        0.4964859446902387, 0.4542988382076511, 0.4133533601948666, 0.37417364107407397,
        0.3372089406927187, 0.30281192271481, 0.2712235786069882, 0.2425667596976052,
        0.2168494674483832, 0.193977905152957, 0.17377806904947324, 0.1560234901530147,
    ];

    #[test]
    fn butterworth_matches_scipy() {
        let sos = butterworth_lowpass(5, 1000.0, 22050.0).unwrap();
        assert_eq!(sos.len(), 3);
        let dc: f64 = sos.iter().map(|s| (s[0] + s[1] + s[2]) / (s[3] + s[4] + s[5])).product();
        assert!((dc - 1.0).abs() < 1e-12);
        let x: Vec<f64> = (0..64)
            .map(|i| {
                let i = i as f64;
                (0.05 * i).sin() + 0.5 * (1.3 * i).sin() + 0.1 * (2.9 * i).cos()
            })
            .collect();
        let y = sosfiltfilt(&sos, &x).unwrap();
        for (a, b) in y.iter().zip(SCIPY_FILTFILT) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn resample_roundtrip_keeps_low_tones() {
        let x = wave(
            (0..16384)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 22050.0).sin()) as f32)
                .collect(),
        );
        for rate in [16000, 24000] {
            let y = resample_roundtrip(&x, rate).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x.samples()[200..16000]
                .iter()
                .zip(&y.samples()[200..16000])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 5e-3, "{rate}: {err}");
        }
    }

    #[test]
    fn realign_recovers_shifts() {
        let x = noise_wave(16384, 2);
        assert_eq!(find_delay(x.samples(), x.samples(), MAX_LAG).unwrap().0, 0);
        for delay in [1usize, 100, 577, 2048] {
            let mut d = vec![0.0f32; delay];
            d.extend_from_slice(x.samples());
            let y = realign(&x, &wave(d)).unwrap();
            assert_eq!(y, x, "delay {delay}");
        }
        let adv = wave(x.samples()[300..].to_vec());
        assert_eq!(find_delay(x.samples(), adv.samples(), MAX_LAG).unwrap().0, -300);
        let other = noise_wave(16384, 3);
        assert!(matches!(realign(&x, &other), Err(Error::Alignment { .. })));
    }

    #[test]
    fn fft_correlation_matches_direct_search() {
        let x = noise_wave(3000, 5);
        let mut d = vec![0.0f32; 37];
        d.extend_from_slice(&x.samples()[..2900]);
        let (lag, peak) = find_delay(x.samples(), &d, 200).unwrap();
        let direct = |l: isize| -> f64 {
            (0..x.len() as isize)
                .filter(|&i| i + l >= 0 && ((i + l) as usize) < d.len())
                .map(|i| x.samples()[i as usize] as f64 * d[(i + l) as usize] as f64)
                .sum()
        };
        let best = (-200..=200).max_by(|&a, &b| direct(a).total_cmp(&direct(b))).unwrap();
        assert_eq!(lag, best);
        let er: f64 = x.samples().iter().map(|&v| (v as f64).powi(2)).sum();
        let ed: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((peak - direct(best) / (er * ed).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn transmit_identity_and_order() {
        let x = noise_wave(4096, 7);
        let none = ChannelSpec::identity();
        let y = transmit(&x, &none, &CodecRegistry::default(), 0).unwrap();
        assert_eq!(y, quantize_pcm16(&x));
        let amp: ChannelSpec = "none+amp:0.9".parse().unwrap();
        let y = transmit(&x, &amp, &CodecRegistry::default(), 0).unwrap();
        for (a, b) in quantize_pcm16(&x).samples().iter().zip(y.samples()) {
            assert_eq!(a * 0.9, *b);
        }
        // amplitude then 8-bit requantization differs from the reverse order
        let ab: ChannelSpec = "none+amp:0.9+requant:8".parse().unwrap();
        let ba: ChannelSpec = "none+requant:8+amp:0.9".parse().unwrap();
        let yab = transmit(&x, &ab, &CodecRegistry::default(), 0).unwrap();
        let yba = transmit(&x, &ba, &CodecRegistry::default(), 0).unwrap();
        let q = quantize_pcm16(&x);
        assert_eq!(yab, requantize(&amplitude_scale(&q, 0.9).unwrap(), 8).unwrap());
        assert_eq!(yba, amplitude_scale(&requantize(&q, 8).unwrap(), 0.9).unwrap());
        assert_ne!(yab, yba);
    }

    #[test]
    fn missing_codec_binary_names_it() {
        let reg = CodecRegistry::default().with(
            Codec::Mp3,
            CodecCommand {
                encode: "definitely-not-a-codec-binary {in} {out} {bitrate}".into(),
                decode: "definitely-not-a-codec-binary -d {in} {out}".into(),
                extension: "mp3".into(),
                version: None,
                substitute: None,
            },
        );
        let spec: ChannelSpec = "mp3@64".parse().unwrap();
        match transmit(&noise_wave(4096, 1), &spec, &reg, 0) {
            Err(Error::Environment { binary, .. }) => assert_eq!(binary, "definitely-not-a-codec-binary"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            transmit(&noise_wave(4096, 1), &spec, &CodecRegistry::default(), 0),
            Err(Error::Environment { .. })
        ));
    }

    #[test]
    fn spec_text_round_trip_and_validation() {
        for s in ["none", "mp3@64", "aac@vbr+noise:30", "opus@24+median:3+lowpass:1000+resample:16000"] {
            let spec: ChannelSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("opus@vbr".parse::<ChannelSpec>().is_err());
        assert!("silk@64".parse::<ChannelSpec>().is_err());
        assert!("mp3".parse::<ChannelSpec>().is_err());
        assert!(matches!("none+noise:25".parse::<ChannelSpec>(), Err(Error::Parameter(_))));
        let mut spec: ChannelSpec = "none".parse().unwrap();
        spec.ops.push(ProcessingOp::GaussianNoise { snr_db: 25.0 });
        spec.arbitrary = true;
        assert!(spec.validate().is_ok());
        let toml_spec: ChannelSpec = toml::from_str("codec = \"mp3\"\nbitrate = 64\nops = [{ op = \"gaussian_noise\", snr_db = 30.0 }]").unwrap();
        assert_eq!(toml_spec.to_string(), "mp3@64+noise:30");
        let arb: ChannelSpec = toml::from_str("codec = \"none\"\nops = [\"lowpass:4000\"]\narbitrary = true").unwrap();
        assert_eq!(arb.ops, vec![ProcessingOp::LowpassButterworth { cutoff: 4000.0 }]);
        assert!(toml::from_str::<ChannelSpec>("codec = \"none\"\nops = [\"lowpass:4000\"]").is_err());
        assert!(toml::from_str::<ChannelSpec>("codec = \"none\"\nbitrate = 64").is_err());
    }

    proptest! {
        #[test]
        fn ops_preserve_length(n in 64usize..600, seed in 0u64..1000) {
            let x = noise_wave(n, seed);
            for op in [
                ProcessingOp::GaussianNoise { snr_db: 20.0 },
                ProcessingOp::ResampleRoundtrip { rate: 16000 },
                ProcessingOp::Requantize { bits: 8 },
                ProcessingOp::Amplitude { factor: 0.9 },
                ProcessingOp::LowpassButterworth { cutoff: 1000.0 },
                ProcessingOp::MedianFilter { window: 3 },
            ] {
                prop_assert_eq!(op.apply(&x, seed).unwrap().len(), n);
            }
        }

        #[test]
        fn requantize_8_error_bound(v in -1.0f32..=1.0) {
            let y = requantize(&wave(vec![v]), 8).unwrap().samples()[0];
            prop_assert!((y - v).abs() <= 2f32.powi(-7));
        }
    }
}
