//! Synthetic multi-speaker corpus: harmonic sources shaped by a per-speaker
//! formant envelope, with random vowel sequences as "content".

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// First two formants (Hz) of the vowel inventory at formant scale 1.
const VOWELS: [(f64, f64); 6] = [
    (730.0, 1090.0),
    (270.0, 2290.0),
    (300.0, 870.0),
    (530.0, 1840.0),
    (660.0, 1720.0),
    (400.0, 2000.0),
];
const F3: f64 = 2500.0;
const F4: f64 = 3500.0;
const BANDWIDTHS: [f64; 4] = [80.0, 110.0, 160.0, 220.0];
const MAX_HARMONIC_HZ: f64 = 8000.0;

/// Timbre parameters of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyVoice {
    pub f0: f64,
    pub formant_scale: f64,
    /// Spectral tilt in dB per octave above f0 (negative).
    pub tilt_db: f64,
    pub breathiness: f64,
}

/// `n` voices with log-spaced f0 in [85, 270] Hz and formant scales in
/// [0.82, 1.22], interleaved so neighbours in f0 differ in formants.
pub fn toy_voices(n: usize) -> Vec<ToyVoice> {
    let denom = (n.max(2) - 1) as f64;
    (0..n)
        .map(|k| {
            let a = k as f64 / denom;
            let b = ((k * 7) % n.max(1)) as f64 / denom.max(1.0);
            ToyVoice {
                f0: 85.0 * (270.0f64 / 85.0).powf(a),
                formant_scale: 0.82 + 0.40 * b.min(1.0),
                tilt_db: -4.0 - 4.0 * ((k * 3) % 5) as f64 / 4.0,
                breathiness: 0.004 + 0.004 * (k % 3) as f64,
            }
        })
        .collect()
}

fn envelope(voice: &ToyVoice, formants: &[f64; 4], f: f64) -> f64 {
    let mut e = 0.0;
    for (i, (&fc, &bw)) in formants.iter().zip(&BANDWIDTHS).enumerate() {
        let d = (f - fc) / (bw * voice.formant_scale);
        e += [1.0, 0.6, 0.3, 0.15][i] / (1.0 + d * d);
    }
    let octaves = (f / voice.f0).max(1.0).log2();
    (e + 0.01) * 10f64.powf(voice.tilt_db * octaves / 20.0)
}

/// Render `samples` samples of speech-like audio for `voice`.
pub fn synthesize(voice: &ToyVoice, samples: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if samples == 0 {
        return Err(Error::Length("cannot synthesize zero samples".into()));
    }
    let sr = sample_rate as f64;
    // syllable plan: (start sample, vowel index, f0 multiplier)
    let mut plan = Vec::new();
    let mut t = 0usize;
    while t < samples {
        let dur = (sr * rng.random_range(0.12..0.26)) as usize;
        plan.push((t, dur.max(1), rng.random_range(0..VOWELS.len()), rng.random_range(0.9..1.12)));
        t += dur.max(1);
    }
    let vib_rate = rng.random_range(4.0..6.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let n_harm = (MAX_HARMONIC_HZ / (voice.f0 * 0.8)).floor() as usize;
    let mut phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut out = vec![0.0f64; samples];
    let mut seg = 0usize;
    let mut amps = vec![0.0f64; n_harm];
    let block = 64;
    let mut start = 0;
    while start < samples {
        while seg + 1 < plan.len() && plan[seg + 1].0 <= start {
            seg += 1;
        }
        let (s0, dur, vowel, f0m) = plan[seg];
        let next = plan.get(seg + 1).map(|p| (p.2, p.3)).unwrap_or((vowel, f0m));
        // glide into the next syllable over its last 30 %
        let pos = (start - s0) as f64 / dur as f64;
        let g = ((pos - 0.7) / 0.3).clamp(0.0, 1.0);
        let (f1, f2) = (
            VOWELS[vowel].0 * (1.0 - g) + VOWELS[next.0].0 * g,
            VOWELS[vowel].1 * (1.0 - g) + VOWELS[next.0].1 * g,
        );
        let formants = [f1, f2, F3, F4].map(|f| f * voice.formant_scale);
        let ts = start as f64 / sr;
        let f0 = voice.f0 * (f0m * (1.0 - g) + next.1 * g) * (1.0 + 0.01 * (2.0 * PI * vib_rate * ts + vib_phase).sin());
        let loud = 0.25 + 0.75 * (PI * pos).sin().max(0.0);
        for (h, a) in amps.iter_mut().enumerate() {
            let f = f0 * (h + 1) as f64;
            *a = if f < MAX_HARMONIC_HZ { loud * envelope(voice, &formants, f) } else { 0.0 };
        }
        let end = (start + block).min(samples);
        for o in out.iter_mut().take(end).skip(start) {
            let mut acc = 0.0;
            for (h, (ph, &a)) in phases.iter_mut().zip(&amps).enumerate() {
                *ph += 2.0 * PI * f0 * (h + 1) as f64 / sr;
                if a > 0.0 {
                    acc += a * ph.sin();
                }
            }
            *o = acc;
        }
        start = end;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let level = rng.random_range(0.4..0.6);
    let normal = rand_distr::Normal::new(0.0, voice.breathiness).expect("valid sigma");
    let samples: Vec<f32> = out
        .iter()
        .map(|&v| (v / peak * level + rng.sample(normal)).clamp(-1.0, 1.0) as f32)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// One labelled utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: usize,
    pub audio: Waveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub train_utterances: usize,
    pub train_chunks: usize,
    /// Held-out utterances per speaker for threshold tuning, `test_chunks` long.
    pub val_utterances: usize,
    pub test_utterances: usize,
    pub test_chunks: usize,
    pub chunk_samples: usize,
    pub sample_rate: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 10,
            train_utterances: 12,
            train_chunks: 2,
            val_utterances: 2,
            test_utterances: 4,
            test_chunks: 5,
            chunk_samples: crate::audio::CHUNK_SAMPLES,
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub voices: Vec<ToyVoice>,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub fn toy_corpus(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<ToyCorpus> {
    if cfg.speakers < 2 || cfg.chunk_samples == 0 {
        return Err(Error::Config("corpus needs at least 2 speakers and a positive chunk".into()));
    }
    let voices = toy_voices(cfg.speakers);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (s, v) in voices.iter().enumerate() {
        for _ in 0..cfg.train_utterances {
            let audio = synthesize(v, cfg.train_chunks * cfg.chunk_samples, cfg.sample_rate, rng)?;
            train.push(Utterance { speaker: s, audio });
        }
        for _ in 0..cfg.val_utterances {
            let audio = synthesize(v, cfg.test_chunks * cfg.chunk_samples, cfg.sample_rate, rng)?;
            val.push(Utterance { speaker: s, audio });
        }
        for _ in 0..cfg.test_utterances {
            let audio = synthesize(v, cfg.test_chunks * cfg.chunk_samples, cfg.sample_rate, rng)?;
            test.push(Utterance { speaker: s, audio });
        }
    }
    Ok(ToyCorpus { voices, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn voices_span_ranges() {
        let v = toy_voices(10);
        assert!((v[0].f0 - 85.0).abs() < 1e-9 && (v[9].f0 - 270.0).abs() < 1e-9);
        for x in &v {
            assert!((0.82..=1.22).contains(&x.formant_scale));
        }
        let mut scales: Vec<f64> = v.iter().map(|x| x.formant_scale).collect();
        scales.sort_by(f64::total_cmp);
        scales.dedup();
        assert_eq!(scales.len(), 10);
    }

    #[test]
    fn synthesis_is_bounded_and_seeded() {
        let v = toy_voices(3)[1];
        let a = synthesize(&v, 8000, 22050, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synthesize(&v, 8000, 22050, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.samples().iter().all(|s| s.abs() <= 1.0));
        assert!(a.power() > 1e-3);
    }
}
