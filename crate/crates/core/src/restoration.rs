//! Speech restoration: keep the content of degraded speech, swap in the
//! recovered speaker embedding, vocode with the flow generator.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{log_floor, MelExtractor, MelSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{scalar, Adam, Checkpoint, Init, ParamStore, WaveNet, WaveNetConfig};
use crate::rng::{stream, streams};
use crate::speaker::{SpeakerEmbedding, EMBEDDING_DIM};
use crate::training::{embedding_tensor, mel_tensor};

const MEL_SHIFT: f64 = 5.0;
const MEL_SCALE: f64 = 1.0 / 3.0;
/// Latent temperature for pure generation.
pub const VOCODER_SIGMA: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    /// Content code width per frame group.
    pub bottleneck: usize,
    /// Frames per content code.
    pub downsample: usize,
    pub mel_bands: usize,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 4,
            kernel: 3,
            bottleneck: 8,
            downsample: 4,
            mel_bands: 80,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.downsample == 0 || self.mel_bands == 0 {
            return Err(Error::Config("restoration sizes must be positive".into()));
        }
        if self.bottleneck == 0 || self.bottleneck > 32 {
            return Err(Error::Config(format!(
                "content bottleneck must be in 1..=32 per frame group, got {}",
                self.bottleneck
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationHeader {
    pub model: RestorationConfig,
    pub trained_steps: usize,
}

/// Content encoder (mel → narrow, downsampled code) and embedding-conditioned
/// mel decoder.
#[derive(Debug, Clone)]
pub struct RestorationModel {
    cfg: RestorationConfig,
    encoder: WaveNet,
    decoder: WaveNet,
    store: ParamStore,
    trained_steps: usize,
}

impl RestorationModel {
    pub fn new(cfg: RestorationConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(&mut store, rng);
        let encoder = WaveNet::new(
            &mut init.sub("content"),
            WaveNetConfig {
                input: cfg.mel_bands,
                channels: cfg.channels,
                layers: cfg.layers,
                kernel: cfg.kernel,
                output: cfg.bottleneck,
                cond_dim: 0,
            },
            1.0,
        )?;
        let decoder = WaveNet::new(
            &mut init.sub("decoder"),
            WaveNetConfig {
                input: cfg.bottleneck,
                channels: cfg.channels,
                layers: cfg.layers,
                kernel: cfg.kernel,
                output: cfg.mel_bands,
                cond_dim: EMBEDDING_DIM,
            },
            0.1,
        )?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
            store,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &RestorationConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    /// `(B, F, bands)` log-mel → `(B, F/d, bottleneck)` content code.
    /// `F` must be a multiple of the downsampling factor.
    pub fn content(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, f, _) = mel.dims3()?;
        let d = self.cfg.downsample;
        if f % d != 0 {
            return Err(Error::Shape(format!("{f} frames are not a multiple of {d}")));
        }
        let x = mel.to_dtype(self.store.dtype())?.affine(MEL_SCALE, MEL_SHIFT * MEL_SCALE)?;
        let h = self.encoder.forward(&x, None)?;
        Ok(h.reshape((b, f / d, d, self.cfg.bottleneck))?.mean(2)?.tanh()?)
    }

    /// Content code and `(B, 256)` embeddings → `(B, F, bands)` log-mel.
    pub fn decode(&self, code: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, g, w) = code.dims3()?;
        let d = self.cfg.downsample;
        let up = code.unsqueeze(2)?.broadcast_as((b, g, d, w))?.reshape((b, g * d, w))?;
        let cond = v.to_dtype(self.store.dtype())?.unsqueeze(1)?;
        let y = self.decoder.forward(&up, Some(&cond))?;
        Ok(y.affine(1.0 / MEL_SCALE, -MEL_SHIFT)?)
    }

    pub fn forward(&self, mel: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.decode(&self.content(mel)?, v)
    }

    /// Restored mel for one spectrogram; frames are padded up to the
    /// downsampling grid and cut back afterwards.
    pub fn restore_mel(&self, mel: &MelSpectrogram, v: &SpeakerEmbedding) -> Result<MelSpectrogram> {
        let d = self.cfg.downsample;
        let frames = mel.frames();
        let padded = mel.fit_frames(frames.div_ceil(d) * d)?;
        let out = self.forward(&mel_tensor(&[&padded], self.store.dtype())?, &embedding_tensor(&[v], self.store.dtype())?)?;
        let values = out.narrow(1, 0, frames)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let floor = log_floor();
        let values = values.into_iter().map(|x| x.max(floor)).collect();
        MelSpectrogram::new(values, frames, mel.bands(), mel.hop())
    }
}

impl Checkpoint for RestorationModel {
    const KIND: &'static str = "restoration";
    type Config = RestorationHeader;

    fn config_value(&self) -> RestorationHeader {
        RestorationHeader {
            model: self.cfg,
            trained_steps: self.trained_steps,
        }
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn skeleton(h: RestorationHeader) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut m = Self::new(h.model, DType::F32, &mut rng)?;
        m.trained_steps = h.trained_steps;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationTraining {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub segment_frames: usize,
    pub clip: f64,
    /// Held-out self-reconstruction L1 must end below this.
    pub l1_ceiling: f64,
}

impl Default for RestorationTraining {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 400,
            lr: 2e-3,
            batch: 8,
            segment_frames: 64,
            clip: 5.0,
            l1_ceiling: 1.5,
        }
    }
}

/// One utterance for restoration training: its mel and its speaker embedding.
#[derive(Debug, Clone)]
pub struct RestorationItem {
    pub mel: MelSpectrogram,
    pub embedding: SpeakerEmbedding,
}

/// Mean absolute log-mel error of self-reconstruction over `items`.
pub fn self_reconstruction_l1(model: &RestorationModel, items: &[RestorationItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Parameter("no items to evaluate".into()));
    }
    let mut total = 0.0;
    for it in items {
        total += model.restore_mel(&it.mel, &it.embedding)?.l1_distance(&it.mel)?;
    }
    Ok(total / items.len() as f64)
}

/// Train the restoration model on self-reconstruction. On a non-finite step
/// the last good parameters are kept and a divergence error is returned.
pub fn train_restoration(
    train: &[RestorationItem],
    held_out: &[RestorationItem],
    cfg: RestorationConfig,
    hp: &RestorationTraining,
) -> Result<RestorationModel> {
    let seg = hp.segment_frames;
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Parameter("restoration needs training and held-out items".into()));
    }
    if seg == 0 || seg % cfg.downsample != 0 {
        return Err(Error::Config(format!(
            "segment of {seg} frames must be a positive multiple of {}",
            cfg.downsample
        )));
    }
    if let Some(it) = train.iter().find(|it| it.mel.frames() < seg) {
        return Err(Error::Length(format!("utterance of {} frames is shorter than {seg}", it.mel.frames())));
    }
    let mut init = stream(hp.seed, streams::RESTORATION_INIT);
    let mut rng = stream(hp.seed, streams::RESTORATION_BATCHES);
    let mut model = RestorationModel::new(cfg, DType::F32, &mut init)?;
    let mut opt = Adam::new(model.store.vars(), hp.lr, (0.9, 0.999), Some(hp.clip))?;
    let bands = cfg.mel_bands;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last_good = model.store.tensors();
    for step in 0..hp.steps {
        let mut mels = Vec::with_capacity(hp.batch * seg * bands);
        let mut vs = Vec::with_capacity(hp.batch);
        for _ in 0..hp.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let it = &train[order[cursor]];
            cursor += 1;
            let start = rng.random_range(0..=it.mel.frames() - seg);
            mels.extend_from_slice(it.mel.slice_frames(start, seg)?.values());
            vs.push(&it.embedding);
        }
        let m = Tensor::from_vec(mels, (hp.batch, seg, bands), &Device::Cpu)?;
        let v = embedding_tensor(&vs, DType::F32)?;
        let out = model.forward(&m, &v)?;
        let loss = ((out - &m)?.abs()?.mean_all()? * MEL_SCALE)?;
        let value = scalar(&loss)?;
        let ok = value.is_finite() && opt.backward_step(&loss)?.is_finite() && model.store.all_finite()?;
        if !ok {
            model.store.assign(&last_good)?;
            model.trained_steps = step;
            return Err(Error::Divergence {
                epoch: step,
                detail: "restoration loss is not finite".into(),
            });
        }
        last_good = model.store.tensors();
        if step % 50 == 0 || step + 1 == hp.steps {
            log::info!("restoration step {step}: l1 {value:.4}");
        }
    }
    model.trained_steps = hp.steps;
    let l1 = self_reconstruction_l1(&model, held_out)?;
    if l1 >= hp.l1_ceiling {
        return Err(Error::Divergence {
            epoch: hp.steps,
            detail: format!("held-out self-reconstruction L1 {l1:.4} is not below {}", hp.l1_ceiling),
        });
    }
    Ok(model)
}

/// Content of `degraded` fused with `v`, vocoded by `generator` from a
/// random latent at σ = 0.6 drawn from `seed`.
pub fn restore_speech(
    degraded: &Waveform,
    v: &SpeakerEmbedding,
    model: &RestorationModel,
    generator: &FlowModel,
    seed: u64,
) -> Result<Waveform> {
    if !model.is_trained() {
        return Err(Error::Dependency("restoration model has not been trained".into()));
    }
    let stft = StftConfig {
        sample_rate: degraded.sample_rate(),
        ..StftConfig::default()
    };
    let mel = MelExtractor::new(stft)?.compute(degraded)?;
    let restored = model.restore_mel(&mel, v)?;
    let steps = restored.frames() * generator.config().steps_per_frame();
    let g = generator.config().squeeze;
    let mut rng = stream(seed, streams::VOCODER_LATENT);
    let normal = Normal::new(0.0f32, VOCODER_SIGMA as f32).expect("valid sigma");
    let z: Vec<f32> = (0..steps * g).map(|_| normal.sample(&mut rng)).collect();
    let z = Tensor::from_vec(z, (1, steps, g), &Device::Cpu)?;
    let x = generator.generate(&z, &mel_tensor(&[&restored], DType::F32)?)?;
    let samples: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("vocoded audio is not finite".into()));
    }
    Waveform::new(samples, degraded.sample_rate()).map(|w| w.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use rand::SeedableRng;

    fn small() -> RestorationConfig {
        RestorationConfig {
            channels: 16,
            layers: 2,
            ..RestorationConfig::default()
        }
    }

    fn item(level: f32, dim: usize) -> RestorationItem {
        let values: Vec<f32> = (0..64 * 80).map(|i| level + ((i % 80) as f32 / 40.0) * if dim == 0 { 1.0 } else { -1.0 }).collect();
        let mut e = vec![0.0; EMBEDDING_DIM];
        e[dim] = 1.0;
        RestorationItem {
            mel: MelSpectrogram::new(values, 64, 80, 256).unwrap(),
            embedding: SpeakerEmbedding::from_raw(e).unwrap(),
        }
    }

    #[test]
    fn bottleneck_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = RestorationConfig {
            bottleneck: 33,
            ..small()
        };
        assert!(RestorationModel::new(bad, DType::F32, &mut rng).is_err());
        let m = RestorationModel::new(small(), DType::F32, &mut rng).unwrap();
        let code = m.content(&Tensor::zeros((2, 16, 80), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(code.dims(), &[2, 4, 8]);
    }

    #[test]
    fn untrained_model_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RestorationModel::new(small(), DType::F32, &mut rng).unwrap();
        let flow = FlowModel::identity(FlowConfig::default(), DType::F32, &mut rng).unwrap();
        let w = Waveform::new(vec![0.1; 4096], 22050).unwrap();
        let e = SpeakerEmbedding::from_raw(vec![1.0; EMBEDDING_DIM]).unwrap();
        assert!(matches!(restore_speech(&w, &e, &m, &flow, 0), Err(Error::Dependency(_))));
    }

    #[test]
    fn training_lowers_reconstruction_and_is_deterministic() {
        let train = vec![item(-2.0, 0), item(-4.0, 1), item(-3.0, 0), item(-5.0, 1)];
        let held = vec![item(-2.5, 0), item(-4.5, 1)];
        let hp = RestorationTraining {
            steps: 60,
            batch: 4,
            segment_frames: 32,
            l1_ceiling: 10.0,
            ..RestorationTraining::default()
        };
        let untrained = RestorationModel::new(small(), DType::F32, &mut stream(hp.seed, streams::RESTORATION_INIT)).unwrap();
        let before = self_reconstruction_l1(&untrained, &held).unwrap();
        let model = train_restoration(&train, &held, small(), &hp).unwrap();
        let after = self_reconstruction_l1(&model, &held).unwrap();
        assert!(after < before, "{after} !< {before}");

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = FlowModel::identity(FlowConfig::default(), DType::F32, &mut rng).unwrap();
        let w = Waveform::new((0..8192).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 22050).unwrap();
        let input = w.clone();
        let a = restore_speech(&w, &held[0].embedding, &model, &flow, 5).unwrap();
        let b = restore_speech(&w, &held[0].embedding, &model, &flow, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(w, input);
        assert_eq!(a.len(), 8192);
    }

    #[test]
    fn checkpoint_keeps_training_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RestorationModel::new(small(), DType::F32, &mut rng).unwrap();
        m.trained_steps = 7;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.safetensors");
        m.save(&path, None).unwrap();
        let (back, _) = RestorationModel::load(&path).unwrap();
        assert!(back.is_trained());
        let x = Tensor::ones((1, 8, 80), DType::F32, &Device::Cpu).unwrap();
        let v = embedding_tensor(&[&item(0.0, 0).embedding], DType::F32).unwrap();
        let d = (m.forward(&x, &v).unwrap() - back.forward(&x, &v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }
}
