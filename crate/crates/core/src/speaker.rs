//! Speaker embeddings: a recurrent d-vector extractor trained with a
//! generalized end-to-end softmax objective, and the enrollment registry.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelExtractor, MelSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, write_atomic, Adam, Checkpoint, Init, Linear, Lstm, ParamStore};

pub const EMBEDDING_DIM: usize = 256;

/// Unit-norm 256-D identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f32>);

impl SpeakerEmbedding {
    /// Normalize `values`; an all-zero input maps to the uniform unit vector.
    pub fn from_raw(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding needs {EMBEDDING_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains non-finite values".into()));
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let u = (1.0 / (EMBEDDING_DIM as f64).sqrt()) as f32;
            return Ok(Self(vec![u; EMBEDDING_DIM]));
        }
        Ok(Self(values.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }

    /// Accept values that already have unit norm (within 1e-6).
    pub fn from_normalized(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding needs {EMBEDDING_DIM} values, got {}",
                values.len()
            )));
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::Numeric(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine(&self.0, &other.0)
    }

    pub fn to_tensor(embeddings: &[SpeakerEmbedding], dtype: DType) -> Result<Tensor> {
        let flat: Vec<f32> = embeddings.iter().flat_map(|e| e.0.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (embeddings.len(), EMBEDDING_DIM), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Vec<SpeakerEmbedding>> {
        let rows = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        rows.into_iter().map(SpeakerEmbedding::from_raw).collect()
    }

    /// Normalized mean of several embeddings.
    pub fn mean(items: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
        if items.is_empty() {
            return Err(Error::Enrollment("no embeddings to average".into()));
        }
        let mut acc = vec![0.0f64; EMBEDDING_DIM];
        for e in items {
            for (a, &v) in acc.iter_mut().zip(&e.0) {
                *a += v as f64;
            }
        }
        SpeakerEmbedding::from_raw(acc.iter().map(|&v| (v / items.len() as f64) as f32).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Frames per analysis window; long inputs average overlapping windows.
    pub segment_frames: usize,
    pub stft: StftConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            segment_frames: 64,
            stft: StftConfig::default(),
        }
    }
}

/// Stacked LSTM over normalized log-mel frames, mean-pooled over time and
/// projected to 256 dimensions.
#[derive(Debug, Clone)]
pub struct Extractor {
    cfg: ExtractorConfig,
    lstms: Vec<Lstm>,
    proj: Linear,
    store: ParamStore,
    mel: MelExtractor,
}

const MEL_SHIFT: f64 = 5.0;
const MEL_SCALE: f64 = 1.0 / 3.0;

impl Extractor {
    pub fn new(cfg: ExtractorConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.hidden == 0 || cfg.layers == 0 || cfg.segment_frames == 0 {
            return Err(Error::Config("extractor sizes must be positive".into()));
        }
        let mel = MelExtractor::new(cfg.stft)?;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(&mut store, rng);
        let mut lstms = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { cfg.stft.bands } else { cfg.hidden };
            lstms.push(Lstm::new(&mut init.sub(format!("lstm{l}")), input, cfg.hidden)?);
        }
        let proj = Linear::new(&mut init.sub("proj"), cfg.hidden, EMBEDDING_DIM, 1.0)?;
        Ok(Self {
            cfg,
            lstms,
            proj,
            store,
            mel,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn mel(&self) -> &MelExtractor {
        &self.mel
    }

    /// `(B, F, bands)` log-mel → unit-norm `(B, 256)`.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut h = mel.to_dtype(self.store.dtype())?.affine(MEL_SCALE, MEL_SHIFT * MEL_SCALE)?;
        for lstm in &self.lstms {
            h = lstm.forward(&h)?;
        }
        l2_normalize(&self.proj.forward(&h.mean(1)?)?)
    }

    fn windows(&self, frames: usize) -> Vec<usize> {
        let seg = self.cfg.segment_frames;
        if frames <= seg {
            return vec![0];
        }
        let step = (seg / 2).max(1);
        let mut starts: Vec<usize> = (0..=frames - seg).step_by(step).collect();
        if *starts.last().unwrap() != frames - seg {
            starts.push(frames - seg);
        }
        starts
    }

    pub fn embed_mel(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        let seg = self.cfg.segment_frames.min(mel.frames());
        let windows: Vec<Tensor> = self
            .windows(mel.frames())
            .into_iter()
            .map(|s| {
                let part = mel.slice_frames(s, seg)?;
                Ok(Tensor::from_slice(part.values(), (seg, mel.bands()), &Device::Cpu)?)
            })
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&windows, 0)?;
        let e = self.forward(&batch)?.mean(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        SpeakerEmbedding::from_raw(e)
    }

    pub fn extract(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        if w.len() < self.cfg.stft.window_length {
            return Err(Error::Length(format!(
                "speaker extraction needs at least {} samples, got {}",
                self.cfg.stft.window_length,
                w.len()
            )));
        }
        self.embed_mel(&self.mel.compute(w)?)
    }
}

impl Checkpoint for Extractor {
    const KIND: &'static str = "extractor";
    type Config = ExtractorConfig;

    fn config_value(&self) -> ExtractorConfig {
        self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn skeleton(cfg: ExtractorConfig) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        Self::new(cfg, DType::F32, &mut rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorTraining {
    pub steps: usize,
    pub lr: f64,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub clip: f64,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 2e-3,
            speakers_per_batch: 10,
            utterances_per_speaker: 4,
            clip: 3.0,
        }
    }
}

/// Labelled utterances, as mel spectrograms.
#[derive(Debug, Clone, Default)]
pub struct SpeakerDataset {
    pub utterances: Vec<(usize, MelSpectrogram)>,
}

impl SpeakerDataset {
    fn by_speaker(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (s, _)) in self.utterances.iter().enumerate() {
            map.entry(*s).or_default().push(i);
        }
        map
    }
}

/// GE2E softmax loss over `(N, M, D)` unit embeddings with learnable
/// similarity scale `w` and offset `b`.
pub fn ge2e_loss(e: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m, d) = e.dims3()?;
    let dev = e.device();
    let centroids = e.mean(1)?;
    let sum = e.sum(1)?;
    let exclusive = (sum.unsqueeze(1)?.broadcast_sub(e)? / (m - 1) as f64)?;
    let en = l2_normalize(e)?;
    let all = en.reshape((n * m, d))?.matmul(&l2_normalize(&centroids)?.t()?)?;
    let own = (en * l2_normalize(&exclusive)?)?.sum(2)?.reshape((n * m, 1))?;
    let mask: Vec<f64> = (0..n * m)
        .flat_map(|r| (0..n).map(move |k| if r / m == k { 1.0 } else { 0.0 }))
        .collect();
    let mask = Tensor::from_vec(mask, (n * m, n), dev)?.to_dtype(e.dtype())?;
    let inv = mask.affine(-1.0, 1.0)?;
    let sim = ((all * inv)? + mask.broadcast_mul(&own)?)?;
    let w = w.abs()?.affine(1.0, 1e-6)?;
    let logits = sim.broadcast_mul(&w)?.broadcast_add(b)?;
    let labels: Vec<u32> = (0..n * m).map(|r| (r / m) as u32).collect();
    let labels = Tensor::from_vec(labels, n * m, dev)?;
    Ok(candle_nn::loss::cross_entropy(&logits, &labels)?)
}

/// Train an extractor from scratch on `data`; logs the loss every 25 steps.
pub fn train_extractor(
    data: &SpeakerDataset,
    cfg: ExtractorConfig,
    hp: &ExtractorTraining,
    rng: &mut ChaCha8Rng,
) -> Result<Extractor> {
    let groups = data.by_speaker();
    if groups.len() < 2 {
        return Err(Error::Parameter(format!(
            "contrastive training needs at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if let Some((s, _)) = groups.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::Parameter(format!("speaker {s} has fewer than 2 utterances")));
    }
    let seg = cfg.segment_frames;
    if let Some((_, m)) = data.utterances.iter().find(|(_, m)| m.frames() < seg) {
        return Err(Error::Length(format!(
            "utterance of {} frames is shorter than a {seg}-frame segment",
            m.frames()
        )));
    }
    let model = Extractor::new(cfg, DType::F32, rng)?;
    let w = Var::new(&[10.0f32], &Device::Cpu)?;
    let b = Var::new(&[-5.0f32], &Device::Cpu)?;
    let mut vars = model.store.vars();
    vars.push(w.clone());
    vars.push(b.clone());
    let mut opt = Adam::new(vars, hp.lr, (0.9, 0.999), Some(hp.clip))?;
    let speakers: Vec<usize> = groups.keys().copied().collect();
    let n = hp.speakers_per_batch.clamp(2, speakers.len());
    let m = hp.utterances_per_speaker.max(2);
    let bands = cfg.stft.bands;
    for step in 0..hp.steps {
        let mut chosen = speakers.clone();
        chosen.shuffle(rng);
        chosen.truncate(n);
        let mut segs = Vec::with_capacity(n * m * seg * bands);
        for s in &chosen {
            let utts = &groups[s];
            for _ in 0..m {
                let (_, mel) = &data.utterances[utts[rng.random_range(0..utts.len())]];
                let start = rng.random_range(0..=mel.frames() - seg);
                segs.extend_from_slice(mel.slice_frames(start, seg)?.values());
            }
        }
        let batch = Tensor::from_vec(segs, (n * m, seg, bands), &Device::Cpu)?;
        let e = model.forward(&batch)?.reshape((n, m, EMBEDDING_DIM))?;
        let loss = ge2e_loss(&e, w.as_tensor(), b.as_tensor())?;
        let value = crate::nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                detail: "extractor loss is not finite".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % 25 == 0 || step + 1 == hp.steps {
            log::info!("extractor step {step}: ge2e {value:.4}");
        }
    }
    Ok(model)
}

/// Mean within-speaker cosine minus mean between-speaker cosine.
pub fn separation_margin(labelled: &[(usize, SpeakerEmbedding)]) -> Result<f64> {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labelled.len() {
        for j in i + 1..labelled.len() {
            let c = labelled[i].1.cosine(&labelled[j].1);
            if labelled[i].0 == labelled[j].0 {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::Parameter("margin needs two speakers with two utterances".into()));
    }
    Ok(within / nw as f64 - between / nb as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub utterances: usize,
    pub embedding: SpeakerEmbedding,
}

/// Enrolled speakers keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeakerRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['\t', '\n', '\r'])
}

impl SpeakerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RegistryEntry)> {
        self.entries.iter()
    }

    /// Enroll `id` with the normalized mean of `embeddings`.
    pub fn register(&mut self, id: &str, embeddings: &[SpeakerEmbedding]) -> Result<()> {
        if !valid_id(id) {
            return Err(Error::Enrollment(format!("invalid speaker id {id:?}")));
        }
        if self.entries.contains_key(id) {
            return Err(Error::Enrollment(format!("speaker {id} is already enrolled")));
        }
        let embedding = SpeakerEmbedding::mean(embeddings)?;
        self.entries.insert(
            id.to_string(),
            RegistryEntry {
                utterances: embeddings.len(),
                embedding,
            },
        );
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, e) in &self.entries {
            let values: Vec<String> = e
                .embedding
                .values()
                .iter()
                .map(|&v| format!("{:.16e}", v as f64))
                .collect();
            out.push_str(&format!("{id}\t{}\t{}\n", e.utterances, values.join(" ")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut reg = SpeakerRegistry::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("registry line {}: {msg}", n + 1));
            let mut parts = line.split('\t');
            let (Some(id), Some(count), Some(values), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let utterances: usize = count.parse().map_err(|_| bad("bad utterance count"))?;
            let values: Vec<f32> = values
                .split(' ')
                .map(|v| v.parse::<f64>().map(|x| x as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad embedding value"))?;
            let embedding = SpeakerEmbedding::from_normalized(values).map_err(|e| bad(&e.to_string()))?;
            if !valid_id(id) || reg.entries.contains_key(id) {
                return Err(bad("invalid or duplicate speaker id"));
            }
            reg.entries.insert(id.to_string(), RegistryEntry { utterances, embedding });
        }
        Ok(reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Dependency(format!("registry {} does not exist", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_text(&text)
    }
}
