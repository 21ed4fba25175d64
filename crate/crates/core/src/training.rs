//! Two-phase optimization. Hiding models (ID encoder, flow generator) are
//! trained independently and frozen; the tracing models (inverter, ID
//! decoder) are then trained against channel-distorted generated audio.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelExtractor, MelSpectrogram, StftConfig, Waveform};
use crate::channel::{transmit, ChannelSpec, CodecRegistry, Codec};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, MixingInit, CouplingInit};
use crate::id_vae::{
    average_tiles, tile_latent, IdDecoder, IdEncoder, IdVaeConfig, KlReduction, LATENT_CHANNELS, PAYLOAD_STEPS,
};
use crate::nn::{scalar, Adam, ParamStore};
use crate::rng::{derive_seed, stream, streams};
use crate::speaker::{SpeakerEmbedding, EMBEDDING_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TracingMode {
    Joint,
    /// Decoder sees a detached latent, so each model gets only its own term.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    pub lr_tracing: f64,
    pub betas: (f64, f64),
    pub grad_clip: Option<f64>,
    pub batch_encoder: usize,
    pub batch_generator: usize,
    pub batch_tracing: usize,
    pub lambda_z: f64,
    pub lambda_v: f64,
    pub loss_norm: LossNorm,
    pub kl_reduction: KlReduction,
    /// Encoder training stops once the mean KL per latent entry reaches this.
    pub kl_target: f64,
    pub encoder_steps: usize,
    pub generator_steps: usize,
    pub tracing_steps: usize,
    /// Optimizer steps per reported epoch.
    pub steps_per_epoch: usize,
    /// Training crop length in samples; a multiple of one payload tile.
    pub crop_samples: usize,
    pub tracing_mode: TracingMode,
    pub channels: Vec<ChannelSpec>,
    pub flow: FlowConfig,
    pub id_vae: IdVaeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_encoder: 1e-4,
            lr_generator: 1e-4,
            lr_tracing: 1e-4,
            betas: (0.9, 0.999),
            grad_clip: Some(10.0),
            batch_encoder: 8,
            batch_generator: 16,
            batch_tracing: 20,
            lambda_z: 1.0,
            lambda_v: 1.0,
            loss_norm: LossNorm::L1,
            kl_reduction: KlReduction::Sum,
            kl_target: 0.5,
            encoder_steps: 200,
            generator_steps: 1000,
            tracing_steps: 1000,
            steps_per_epoch: 10,
            crop_samples: 4096,
            tracing_mode: TracingMode::Joint,
            channels: vec![ChannelSpec::identity()],
            flow: FlowConfig::default(),
            id_vae: IdVaeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_z >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if [self.batch_encoder, self.batch_generator, self.batch_tracing, self.steps_per_epoch].contains(&0) {
            return Err(Error::Config("batch sizes and steps per epoch must be at least 1".into()));
        }
        for lr in [self.lr_encoder, self.lr_generator, self.lr_tracing] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        let tile = PAYLOAD_STEPS * self.flow.squeeze;
        if self.crop_samples == 0 || self.crop_samples % tile != 0 || self.crop_samples % self.flow.hop != 0 {
            return Err(Error::Config(format!(
                "crop of {} samples must be a positive multiple of the {tile}-sample payload tile",
                self.crop_samples
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("tracing needs at least one channel spec".into()));
        }
        for c in &self.channels {
            c.validate()?;
        }
        self.flow.validate()?;
        self.id_vae.validate()
    }

    /// Parse `key = value` TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One reported epoch; terms that a phase does not train are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub kl: Option<f64>,
    pub nll: Option<f64>,
    pub z_rec: Option<f64>,
    pub v_rec: Option<f64>,
    pub l_t: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Set when training stopped on a non-finite loss; models hold the last
    /// good parameters.
    pub diverged: Option<String>,
}

pub const REPORT_HEADER: &str = "phase,epoch,kl,nll,z_rec,v_rec,l_t";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.phase,
                r.epoch,
                f(r.kl),
                f(r.nll),
                f(r.z_rec),
                f(r.v_rec),
                f(r.l_t)
            );
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::nn::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    fn next_epoch(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch + 1)
    }

    pub fn phase(&self, name: &str) -> impl Iterator<Item = &ReportRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.phase == name)
    }
}

/// Running mean of one epoch's losses.
#[derive(Default)]
struct EpochMean {
    sums: [f64; 5],
    n: usize,
}

impl EpochMean {
    fn add(&mut self, v: [f64; 5]) {
        for (s, x) in self.sums.iter_mut().zip(v) {
            *s += x;
        }
        self.n += 1;
    }
    fn take(&mut self) -> [f64; 5] {
        let n = self.n.max(1) as f64;
        let out = self.sums.map(|s| s / n);
        *self = Self::default();
        out
    }
}

struct Snapshot(HashMap<String, Tensor>);

impl Snapshot {
    fn of(store: &ParamStore) -> Result<Self> {
        Ok(Self(
            store
                .tensors()
                .into_iter()
                .map(|(k, t)| Ok((k, t.copy()?)))
                .collect::<Result<_>>()?,
        ))
    }
    fn restore(&self, store: &ParamStore) -> Result<()> {
        store.assign(&self.0)
    }
}

/// Audio chunk with the mel computed from it.
#[derive(Debug, Clone)]
pub struct TrainingChunk {
    pub audio: Waveform,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone, Default)]
pub struct HidingData {
    pub embeddings: Vec<SpeakerEmbedding>,
    pub chunks: Vec<TrainingChunk>,
}

/// Conditioning mel and source embedding of one chunk to hide.
#[derive(Debug, Clone)]
pub struct TracingItem {
    pub embedding: SpeakerEmbedding,
    pub mel: MelSpectrogram,
}

fn flat_batch<'a>(rows: impl Iterator<Item = &'a [f32]>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = rows.flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn mel_tensor(mels: &[&MelSpectrogram], dtype: DType) -> Result<Tensor> {
    let (f, b) = (mels[0].frames(), mels[0].bands());
    flat_batch(mels.iter().map(|m| m.values()), &[mels.len(), f, b], dtype)
}

pub fn embedding_tensor(v: &[&SpeakerEmbedding], dtype: DType) -> Result<Tensor> {
    flat_batch(v.iter().map(|e| e.values()), &[v.len(), EMBEDDING_DIM], dtype)
}

/// Reconstruction distance under `norm`, averaged over entries.
pub fn reconstruction_loss(a: &Tensor, b: &Tensor, norm: LossNorm) -> Result<Tensor> {
    let d = (a - b)?;
    Ok(match norm {
        LossNorm::L1 => d.abs()?.mean_all()?,
        LossNorm::L2 => d.sqr()?.mean_all()?,
    })
}

/// Latent reconstruction term: invert `x` and compare with `z`.
pub fn z_rec_loss(inverter: &FlowModel, x: &Tensor, mel: &Tensor, z: &Tensor, norm: LossNorm) -> Result<(Tensor, Tensor)> {
    let (z_hat, _) = inverter.invert(x, mel)?;
    Ok((reconstruction_loss(&z_hat, z, norm)?, z_hat))
}

/// Embedding reconstruction term: decode tile-averaged `z_hat`.
pub fn v_rec_loss(decoder: &IdDecoder, z_hat: &Tensor, v: &Tensor, norm: LossNorm) -> Result<Tensor> {
    let v_hat = decoder.decode(&average_tiles(z_hat)?)?;
    reconstruction_loss(&v_hat, v, norm)
}

/// `λ_z L_z + λ_v L_v`.
pub fn tracing_loss(l_z: &Tensor, l_v: &Tensor, lambda_z: f64, lambda_v: f64) -> Result<Tensor> {
    Ok(((l_z * lambda_z)? + (l_v * lambda_v)?)?)
}

/// Train the ID encoder on the KL term until the per-entry KL reaches the
/// target (or the step budget runs out).
pub fn train_encoder(data: &HidingData, cfg: &TrainConfig, report: &mut TrainReport) -> Result<IdEncoder> {
    if data.embeddings.is_empty() {
        return Err(Error::Parameter("encoder training needs embeddings".into()));
    }
    let mut init = stream(cfg.seed, streams::ENCODER_INIT);
    let mut rng = stream(cfg.seed, streams::ENCODER_BATCHES);
    let enc = IdEncoder::new(cfg.id_vae, DType::F32, &mut init)?;
    let mut opt = Adam::new(enc.params().vars(), cfg.lr_encoder, cfg.betas, cfg.grad_clip)?;
    let entries = (PAYLOAD_STEPS * LATENT_CHANNELS) as f64;
    let per_entry = |kl: f64| match cfg.kl_reduction {
        KlReduction::Sum => kl / entries,
        KlReduction::Mean => kl,
    };
    let all: Vec<&SpeakerEmbedding> = data.embeddings.iter().collect();
    let full = embedding_tensor(&all, DType::F32)?;
    let mut acc = EpochMean::default();
    let mut last_good = Snapshot::of(enc.params())?;
    for step in 0..cfg.encoder_steps {
        let current = per_entry(scalar(&enc.posterior(&full)?.kl(cfg.kl_reduction)?)?);
        if current <= cfg.kl_target {
            log::info!("encoder reached KL {current:.4} per entry after {step} steps");
            break;
        }
        let batch: Vec<&SpeakerEmbedding> =
            (0..cfg.batch_encoder).map(|_| all[rng.random_range(0..all.len())]).collect();
        let loss = enc.posterior(&embedding_tensor(&batch, DType::F32)?)?.kl(cfg.kl_reduction)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            last_good.restore(enc.params())?;
            report.diverged = Some(format!("encoder loss not finite at step {step}"));
            return Ok(enc);
        }
        opt.backward_step(&loss)?;
        last_good = Snapshot::of(enc.params())?;
        acc.add([per_entry(value), 0.0, 0.0, 0.0, 0.0]);
        if acc.n == cfg.steps_per_epoch {
            let m = acc.take();
            report.rows.push(ReportRow {
                phase: "encoder",
                epoch: report.next_epoch(),
                kl: Some(m[0]),
                nll: None,
                z_rec: None,
                v_rec: None,
                l_t: None,
            });
        }
    }
    if acc.n > 0 {
        let m = acc.take();
        report.rows.push(ReportRow {
            phase: "encoder",
            epoch: report.next_epoch(),
            kl: Some(m[0]),
            nll: None,
            z_rec: None,
            v_rec: None,
            l_t: None,
        });
    }
    Ok(enc)
}

fn crop_batch(
    chunks: &[&TrainingChunk],
    crop: usize,
    hop: usize,
    rng: &mut ChaCha8Rng,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let frames = crop / hop;
    let mut xs = Vec::with_capacity(chunks.len() * crop);
    let mut ms = Vec::with_capacity(chunks.len() * frames * chunks[0].mel.bands());
    for c in chunks {
        let positions = c.audio.len() / hop - frames + 1;
        let f0 = rng.random_range(0..positions);
        xs.extend_from_slice(&c.audio.samples()[f0 * hop..f0 * hop + crop]);
        ms.extend_from_slice(c.mel.slice_frames(f0, frames)?.values());
    }
    let b = chunks.len();
    Ok((
        Tensor::from_vec(xs, (b, crop), &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(ms, (b, frames, chunks[0].mel.bands()), &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// Held-out negative log-likelihood per sample (nats).
pub fn evaluate_nll(flow: &FlowModel, chunks: &[TrainingChunk]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::Parameter("no chunks to evaluate".into()));
    }
    let mut total = 0.0;
    for c in chunks {
        let x = Tensor::from_slice(c.audio.samples(), (1, c.audio.len()), &Device::Cpu)?;
        let m = mel_tensor(&[&c.mel], DType::F32)?;
        total += scalar(&flow.nll_per_dim(&x, &m)?)?;
    }
    Ok(total / chunks.len() as f64)
}

/// Train the flow generator on `−log p(x | m)` per sample.
pub fn train_generator(data: &HidingData, cfg: &TrainConfig, report: &mut TrainReport) -> Result<FlowModel> {
    if data.chunks.is_empty() {
        return Err(Error::Parameter("generator training needs audio chunks".into()));
    }
    let hop = cfg.flow.hop;
    if let Some(c) = data.chunks.iter().find(|c| c.audio.len() < cfg.crop_samples || c.mel.frames() * hop != c.audio.len()) {
        return Err(Error::Shape(format!(
            "chunk of {} samples / {} frames does not fit {}-sample crops",
            c.audio.len(),
            c.mel.frames(),
            cfg.crop_samples
        )));
    }
    let mut init = stream(cfg.seed, streams::GENERATOR_INIT);
    let mut rng = stream(cfg.seed, streams::GENERATOR_BATCHES);
    let flow = FlowModel::new(cfg.flow, DType::F32, &mut init, MixingInit::Orthogonal, CouplingInit::Zero)?;
    let mut opt = Adam::new(flow.params().vars(), cfg.lr_generator, cfg.betas, cfg.grad_clip)?;
    let mut acc = EpochMean::default();
    let mut last_good = Snapshot::of(flow.params())?;
    for step in 0..cfg.generator_steps {
        let batch: Vec<&TrainingChunk> = (0..cfg.batch_generator)
            .map(|_| &data.chunks[rng.random_range(0..data.chunks.len())])
            .collect();
        let (x, m) = crop_batch(&batch, cfg.crop_samples, hop, &mut rng, DType::F32)?;
        let loss = flow.nll_per_dim(&x, &m)?;
        let value = scalar(&loss)?;
        let stepped = value.is_finite() && opt.backward_step(&loss)?.is_finite();
        if !stepped || !flow.params().all_finite()? || flow.check_mixing().is_err() {
            last_good.restore(flow.params())?;
            report.diverged = Some(format!("generator diverged at step {step}"));
            return Ok(flow);
        }
        last_good = Snapshot::of(flow.params())?;
        acc.add([0.0, value, 0.0, 0.0, 0.0]);
        if acc.n == cfg.steps_per_epoch || step + 1 == cfg.generator_steps {
            let m = acc.take();
            log::info!("generator step {step}: nll {:.4}", m[1]);
            report.rows.push(ReportRow {
                phase: "generator",
                epoch: report.next_epoch(),
                kl: None,
                nll: Some(m[1]),
                z_rec: None,
                v_rec: None,
                l_t: None,
            });
        }
    }
    Ok(flow)
}

/// Both hiding models; the two loops share no parameters or batches.
pub fn train_hiding(data: &HidingData, cfg: &TrainConfig) -> Result<(IdEncoder, FlowModel, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport {
        seed: cfg.seed,
        ..Default::default()
    };
    let enc = train_encoder(data, cfg, &mut report)?;
    if report.diverged.is_some() {
        let flow = FlowModel::new(
            cfg.flow,
            DType::F32,
            &mut stream(cfg.seed, streams::GENERATOR_INIT),
            MixingInit::Orthogonal,
            CouplingInit::Zero,
        )?;
        return Ok((enc, flow, report));
    }
    let flow = train_generator(data, cfg, &mut report)?;
    Ok((enc, flow, report))
}

/// Hidden waveform for one chunk: the ID latent tiled over the chunk and
/// pushed through the generator.
pub fn hide_chunk(encoder: &IdEncoder, generator: &FlowModel, v: &SpeakerEmbedding, mel: &MelSpectrogram) -> Result<(Waveform, Tensor)> {
    let z_id = encoder.posterior(&embedding_tensor(&[v], DType::F32)?)?.mu;
    let steps = mel.frames() * generator.config().steps_per_frame();
    if steps % PAYLOAD_STEPS != 0 {
        return Err(Error::Shape(format!("{steps} latent steps are not a whole number of payload tiles")));
    }
    let z = tile_latent(&z_id, steps / PAYLOAD_STEPS)?;
    let x = generator.generate(&z, &mel_tensor(&[mel], DType::F32)?)?;
    let samples = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("generated audio is not finite".into()));
    }
    Ok((Waveform::new(samples, crate::audio::DEFAULT_SAMPLE_RATE)?, z_id))
}

/// Generated chunk, its ID latent and every cached channel output.
struct Prepared {
    v: SpeakerEmbedding,
    z_id: Tensor,
    audio: Waveform,
    /// Codec stage output per channel spec (ops are applied per draw).
    coded: Vec<Option<Waveform>>,
}

fn codec_stage(spec: &ChannelSpec) -> ChannelSpec {
    ChannelSpec {
        codec: spec.codec,
        bitrate: spec.bitrate,
        ops: vec![],
        arbitrary: spec.arbitrary,
    }
}

fn prepare(
    items: &[TracingItem],
    encoder: &IdEncoder,
    generator: &FlowModel,
) -> Result<Vec<Prepared>> {
    items
        .iter()
        .map(|it| {
            let (audio, z_id) = hide_chunk(encoder, generator, &it.embedding, &it.mel)?;
            Ok(Prepared {
                v: it.embedding.clone(),
                z_id,
                audio,
                coded: Vec::new(),
            })
        })
        .collect()
}

/// Distorted version of a prepared chunk under `specs[c]`.
fn degrade(
    p: &mut Prepared,
    specs: &[ChannelSpec],
    c: usize,
    codecs: &CodecRegistry,
    seed: u64,
) -> Result<Waveform> {
    if p.coded.len() < specs.len() {
        p.coded.resize(specs.len(), None);
    }
    if p.coded[c].is_none() {
        p.coded[c] = Some(transmit(&p.audio, &codec_stage(&specs[c]), codecs, seed)?);
    }
    let base = p.coded[c].as_ref().expect("filled above");
    let ops = ChannelSpec {
        codec: Codec::None,
        bitrate: None,
        ops: specs[c].ops.clone(),
        arbitrary: true,
    };
    if ops.ops.is_empty() {
        return Ok(base.clone());
    }
    // quantization is idempotent on the already-quantized codec output
    transmit(base, &ops, codecs, seed)
}

/// Frozen-model validation: mean `|z̃ − z|` over full chunks, one fixed
/// channel draw per (item, spec).
pub fn validation_latent_error(
    inverter: &FlowModel,
    items: &[TracingItem],
    encoder: &IdEncoder,
    generator: &FlowModel,
    specs: &[ChannelSpec],
    codecs: &CodecRegistry,
    seed: u64,
) -> Result<f64> {
    let mut prepared = prepare(items, encoder, generator)?;
    let mel_ex = MelExtractor::new(StftConfig::default())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, p) in prepared.iter_mut().enumerate() {
        for c in 0..specs.len() {
            let x = degrade(p, specs, c, codecs, derive_seed(seed, streams::EVALUATION, (i * specs.len() + c) as u64))?;
            let mel = mel_ex.compute(&x)?;
            let xt = Tensor::from_slice(x.samples(), (1, x.len()), &Device::Cpu)?;
            let tiles = x.len() / (PAYLOAD_STEPS * inverter.config().squeeze);
            let z = tile_latent(&p.z_id, tiles)?;
            let (l, _) = z_rec_loss(inverter, &xt, &mel_tensor(&[&mel], DType::F32)?, &z, LossNorm::L1)?;
            total += scalar(&l)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Train inverter (initialized from the generator) and ID decoder on
/// distorted generated chunks. The hiding models are only read.
pub fn train_tracing(
    items: &[TracingItem],
    encoder: &IdEncoder,
    generator: &FlowModel,
    cfg: &TrainConfig,
    codecs: &CodecRegistry,
) -> Result<(FlowModel, IdDecoder, TrainReport)> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Parameter("tracing training needs items".into()));
    }
    let mut init = stream(cfg.seed, streams::DECODER_INIT);
    let mut rng = stream(cfg.seed, streams::TRACING_BATCHES);
    let inverter = generator.deep_clone(&mut init)?;
    let decoder = IdDecoder::new(cfg.id_vae, DType::F32, &mut init)?;
    let mut vars = inverter.params().vars();
    vars.extend(decoder.params().vars());
    let mut opt = Adam::new(vars, cfg.lr_tracing, cfg.betas, cfg.grad_clip)?;
    let mut prepared = prepare(items, encoder, generator)?;
    let mel_ex = MelExtractor::new(StftConfig::default())?;
    let tile = PAYLOAD_STEPS * cfg.flow.squeeze;
    let hop = cfg.flow.hop;
    let mut report = TrainReport {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut acc = EpochMean::default();
    let mut last_inv = Snapshot::of(inverter.params())?;
    let mut last_dec = Snapshot::of(decoder.params())?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.tracing_steps {
        let c = rng.random_range(0..cfg.channels.len());
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        let mut zs = Vec::new();
        let mut vs = Vec::new();
        for k in 0..cfg.batch_tracing {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let seed = derive_seed(cfg.seed, streams::CHANNEL, (step * cfg.batch_tracing + k) as u64);
            let p = &mut prepared[i];
            let x = degrade(p, &cfg.channels, c, codecs, seed)?;
            let mel = mel_ex.compute(&x)?;
            let offset = rng.random_range(0..=(x.len() - cfg.crop_samples) / tile) * tile;
            xs.extend_from_slice(&x.samples()[offset..offset + cfg.crop_samples]);
            ms.extend_from_slice(mel.slice_frames(offset / hop, cfg.crop_samples / hop)?.values());
            zs.push(p.z_id.clone());
            vs.push(i);
        }
        let b = cfg.batch_tracing;
        let x = Tensor::from_vec(xs, (b, cfg.crop_samples), &Device::Cpu)?;
        let m = Tensor::from_vec(ms, (b, cfg.crop_samples / hop, cfg.flow.mel_bands), &Device::Cpu)?;
        let z = tile_latent(&Tensor::cat(&zs, 0)?, cfg.crop_samples / tile)?;
        let vrefs: Vec<&SpeakerEmbedding> = vs.iter().map(|&i| &prepared[i].v).collect();
        let v = embedding_tensor(&vrefs, DType::F32)?;
        let (l_z, z_hat) = z_rec_loss(&inverter, &x, &m, &z, cfg.loss_norm)?;
        let z_in = match cfg.tracing_mode {
            TracingMode::Joint => z_hat,
            TracingMode::Separate => z_hat.detach(),
        };
        let l_v = v_rec_loss(&decoder, &z_in, &v, cfg.loss_norm)?;
        let l_t = tracing_loss(&l_z, &l_v, cfg.lambda_z, cfg.lambda_v)?;
        let values = [scalar(&l_z)?, scalar(&l_v)?, scalar(&l_t)?];
        let ok = values.iter().all(|v| v.is_finite())
            && opt.backward_step(&l_t)?.is_finite()
            && inverter.params().all_finite()?
            && decoder.params().all_finite()?
            && inverter.check_mixing().is_ok();
        if !ok {
            last_inv.restore(inverter.params())?;
            last_dec.restore(decoder.params())?;
            report.diverged = Some(format!("tracing diverged at step {step}"));
            return Ok((inverter, decoder, report));
        }
        last_inv = Snapshot::of(inverter.params())?;
        last_dec = Snapshot::of(decoder.params())?;
        acc.add([0.0, 0.0, values[0], values[1], values[2]]);
        if acc.n == cfg.steps_per_epoch || step + 1 == cfg.tracing_steps {
            let m = acc.take();
            log::info!("tracing step {step}: z {:.4} v {:.4} total {:.4}", m[2], m[3], m[4]);
            report.rows.push(ReportRow {
                phase: "tracing",
                epoch: report.next_epoch(),
                kl: None,
                nll: None,
                z_rec: Some(m[2]),
                v_rec: Some(m[3]),
                l_t: Some(m[4]),
            });
        }
    }
    Ok((inverter, decoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, toy_voices};
    use rand::SeedableRng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            seed: 3,
            encoder_steps: 4,
            generator_steps: 2,
            tracing_steps: 2,
            steps_per_epoch: 1,
            batch_encoder: 4,
            batch_generator: 2,
            batch_tracing: 2,
            crop_samples: 1024,
            lr_generator: 1e-3,
            lr_tracing: 1e-3,
            kl_target: 0.0,
            flow: FlowConfig {
                blocks: 2,
                channels: 8,
                layers: 2,
                ..FlowConfig::default()
            },
            id_vae: IdVaeConfig {
                channels: 16,
                encoder_layers: 2,
                decoder_layers: 1,
                ..IdVaeConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (HidingData, Vec<TracingItem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let voices = toy_voices(2);
        let mel_ex = MelExtractor::new(StftConfig::default()).unwrap();
        let mut data = HidingData::default();
        let mut items = Vec::new();
        for i in 0..8 {
            let audio = synthesize(&voices[i % 2], 2048, 22050, &mut rng).unwrap();
            let mel = mel_ex.compute(&audio).unwrap();
            let v: Vec<f32> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = SpeakerEmbedding::from_raw(v).unwrap();
            data.embeddings.push(e.clone());
            items.push(TracingItem {
                embedding: e,
                mel: mel.clone(),
            });
            data.chunks.push(TrainingChunk { audio, mel });
        }
        (data, items)
    }

    #[test]
    fn smoke_run_emits_finite_losses() {
        let (data, items) = tiny_data();
        let cfg = tiny_cfg();
        let (enc, flow, rep) = train_hiding(&data, &cfg).unwrap();
        assert!(rep.diverged.is_none());
        assert!(rep.phase("encoder").count() >= 1 && rep.phase("generator").count() == 2);
        let (_, _, tr) = train_tracing(&items, &enc, &flow, &cfg, &CodecRegistry::default()).unwrap();
        assert_eq!(tr.rows.len(), 2);
        for r in rep.rows.iter().chain(&tr.rows) {
            for v in [r.kl, r.nll, r.z_rec, r.v_rec, r.l_t].into_iter().flatten() {
                assert!(v.is_finite());
            }
        }
        let epochs: Vec<usize> = rep.rows.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[1] > w[0]));
        for r in &tr.rows {
            let (z, v, t) = (r.z_rec.unwrap(), r.v_rec.unwrap(), r.l_t.unwrap());
            // one f32 rounding per step
            assert!((t - (z + v)).abs() <= 1e-6 * t.abs().max(1.0));
        }
        assert!(rep.to_csv().starts_with(REPORT_HEADER));
    }

    #[test]
    fn same_seed_same_report() {
        let (data, _) = tiny_data();
        let cfg = tiny_cfg();
        let a = train_hiding(&data, &cfg).unwrap().2;
        let b = train_hiding(&data, &cfg).unwrap().2;
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn generator_ignores_encoder() {
        let (data, _) = tiny_data();
        let cfg = tiny_cfg();
        let mut other = cfg.clone();
        other.encoder_steps = 0;
        other.id_vae.channels = 8;
        let a = train_hiding(&data, &cfg).unwrap().2;
        let b = train_hiding(&data, &other).unwrap().2;
        let nll = |r: &TrainReport| r.phase("generator").map(|r| r.nll.unwrap()).collect::<Vec<_>>();
        assert_eq!(nll(&a), nll(&b));
    }

    #[test]
    fn zero_lambda_v_leaves_decoder_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flow = FlowModel::new(
            FlowConfig {
                blocks: 1,
                channels: 4,
                layers: 1,
                ..FlowConfig::default()
            },
            DType::F64,
            &mut rng,
            MixingInit::Orthogonal,
            CouplingInit::Random(0.1),
        )
        .unwrap();
        let dec = IdDecoder::new(
            IdVaeConfig {
                channels: 8,
                decoder_layers: 1,
                ..IdVaeConfig::default()
            },
            DType::F64,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(0.0, 0.1, (1, 512), &Device::Cpu).unwrap();
        let m = Tensor::randn(-4.0, 1.0, (1, 2, 80), &Device::Cpu).unwrap();
        let z = Tensor::randn(0.0, 1.0, (1, 64, 8), &Device::Cpu).unwrap();
        let v = Tensor::randn(0.0, 0.06, (1, 256), &Device::Cpu).unwrap();
        let (lz, zh) = z_rec_loss(&flow, &x, &m, &z, LossNorm::L1).unwrap();
        let lv = v_rec_loss(&dec, &zh, &v, LossNorm::L1).unwrap();
        let sum = tracing_loss(&lz, &lv, 1.0, 1.0).unwrap().to_scalar::<f64>().unwrap();
        let parts = lz.to_scalar::<f64>().unwrap() + lv.to_scalar::<f64>().unwrap();
        assert_eq!(sum, parts);
        let grads = tracing_loss(&lz, &lv, 1.0, 0.0).unwrap().backward().unwrap();
        for var in dec.params().vars() {
            let g = grads.get(&var).map(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap());
            assert!(g.unwrap_or(0.0) == 0.0);
        }
        assert!(flow.params().vars().iter().any(|v| grads.get(v).is_some()));
    }

    #[test]
    fn config_parses_and_rejects() {
        let cfg = TrainConfig::from_toml("seed = 5\nlambda_v = 0.5\nloss_norm = \"l2\"\n[[channels]]\ncodec = \"none\"\nops = [{ op = \"gaussian_noise\", snr_db = 30.0 }]\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.loss_norm, LossNorm::L2);
        assert_eq!(cfg.channels[0].to_string(), "none+noise:30");
        assert!(matches!(TrainConfig::from_toml("lambda_z = -1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("batch_tracing = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("crop_samples = 1000"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("nonsense = 1"), Err(Error::Config(_))));
    }
}
