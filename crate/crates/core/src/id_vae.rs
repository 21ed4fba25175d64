//! ID encoder / decoder: maps a 256-D speaker embedding to a Gaussian latent
//! payload of 8 channels × 64 steps and back.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Checkpoint, Init, ParamStore, WaveNet, WaveNetConfig};
use crate::speaker::EMBEDDING_DIM;

pub const PAYLOAD_CHANNELS: usize = 4;
pub const PAYLOAD_STEPS: usize = 64;
pub const LATENT_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdVaeConfig {
    pub channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub kernel: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Default for IdVaeConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            kernel: 3,
            logvar_min: -14.0,
            logvar_max: 4.0,
        }
    }
}

impl IdVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("ID network widths and depths must be positive".into()));
        }
        if self.logvar_min >= self.logvar_max {
            return Err(Error::Config("logvar_min must be below logvar_max".into()));
        }
        Ok(())
    }
}

/// `(B, 256) -> (B, 64, 4)`, channel-major: entry `i` lands in channel
/// `i / 64`, step `i % 64`.
pub fn payload_from_embedding(v: &Tensor) -> Result<Tensor> {
    let b = v.dim(0)?;
    if v.dims() != [b, EMBEDDING_DIM] {
        return Err(Error::Shape(format!("expected (B, 256) embeddings, got {:?}", v.dims())));
    }
    Ok(v.reshape((b, PAYLOAD_CHANNELS, PAYLOAD_STEPS))?.transpose(1, 2)?.contiguous()?)
}

pub fn embedding_from_payload(p: &Tensor) -> Result<Tensor> {
    let b = p.dim(0)?;
    if p.dims() != [b, PAYLOAD_STEPS, PAYLOAD_CHANNELS] {
        return Err(Error::Shape(format!("expected (B, 64, 4) payload, got {:?}", p.dims())));
    }
    Ok(p.transpose(1, 2)?.contiguous()?.reshape((b, EMBEDDING_DIM))?)
}

/// Repeat an ID latent `(B, 64, 8)` along time to `(B, 64 * tiles, 8)`.
pub fn tile_latent(z: &Tensor, tiles: usize) -> Result<Tensor> {
    let (b, t, c) = z.dims3()?;
    Ok(z.unsqueeze(1)?.broadcast_as((b, tiles, t, c))?.reshape((b, tiles * t, c))?)
}

/// Mean over consecutive 64-step tiles: `(B, 64 k, 8) -> (B, 64, 8)`.
pub fn average_tiles(z: &Tensor) -> Result<Tensor> {
    let (b, t, c) = z.dims3()?;
    if t % PAYLOAD_STEPS != 0 || t == 0 {
        return Err(Error::Shape(format!("{t} latent steps are not a whole number of tiles")));
    }
    Ok(z.reshape((b, t / PAYLOAD_STEPS, PAYLOAD_STEPS, c))?.mean(1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    /// Sum over latent entries, mean over the batch.
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Sample,
    Mean,
}

/// Diagonal Gaussian `q(z | v)`; both tensors `(B, 64, 8)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    pub fn sigma(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    pub fn kl(&self, reduction: KlReduction) -> Result<Tensor> {
        kl_loss(&self.mu, &self.logvar, reduction)
    }
}

/// `½ Σ (μ² + σ² − 1 − ln σ²)` with `σ² = exp(logvar)`.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor, reduction: KlReduction) -> Result<Tensor> {
    let terms = ((mu.sqr()? + logvar.exp()?)? - logvar)?.affine(0.5, -0.5)?;
    let b = mu.dim(0)?;
    Ok(match reduction {
        KlReduction::Sum => (terms.sum_all()? / b as f64)?,
        KlReduction::Mean => terms.mean_all()?,
    })
}

/// Closed-form KL of `N(mu, diag(sigma²))` from `N(0, I)`, in nats.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape("mu and sigma lengths differ".into()));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric(format!("standard deviation {s} must be positive")));
        }
        let v = s * s;
        total += 0.5 * (m * m + v - 1.0 - v.ln());
    }
    Ok(total)
}

fn check_batch(v: &Tensor) -> Result<usize> {
    let b = v.dim(0)?;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct IdEncoder {
    cfg: IdVaeConfig,
    net: WaveNet,
    store: ParamStore,
}

/// Embedding entries have RMS `1/16`; scale to unit RMS before the network.
const PAYLOAD_GAIN: f64 = 16.0;

impl IdEncoder {
    pub fn new(cfg: IdVaeConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let wn = WaveNetConfig {
            input: PAYLOAD_CHANNELS,
            channels: cfg.channels,
            layers: cfg.encoder_layers,
            kernel: cfg.kernel,
            output: 2 * LATENT_CHANNELS,
            cond_dim: 0,
        };
        let mut store = ParamStore::new(dtype);
        let net = WaveNet::new(&mut Init::new(&mut store, rng).sub("wavenet"), wn, 1.0)?;
        Ok(Self { cfg, net, store })
    }

    pub fn config(&self) -> &IdVaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn posterior(&self, v: &Tensor) -> Result<GaussianPosterior> {
        check_batch(v)?;
        let p = (payload_from_embedding(v)? * PAYLOAD_GAIN)?;
        let head = self.net.forward(&p, None)?;
        let mu = head.narrow(2, 0, LATENT_CHANNELS)?;
        let logvar = head
            .narrow(2, LATENT_CHANNELS, LATENT_CHANNELS)?
            .clamp(self.cfg.logvar_min, self.cfg.logvar_max)?;
        Ok(GaussianPosterior { mu, logvar })
    }

    /// Posterior and latent; `Sample` draws `μ + σ ε` with `ε` from `rng`.
    pub fn encode(
        &self,
        v: &Tensor,
        mode: LatentMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(GaussianPosterior, Tensor)> {
        let q = self.posterior(v)?;
        let z = match mode {
            LatentMode::Mean => q.mu.clone(),
            LatentMode::Sample => {
                let rng = rng.ok_or_else(|| Error::Parameter("sampling needs a generator".into()))?;
                let n = q.mu.elem_count();
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let eps = Tensor::from_vec(eps, q.mu.shape(), &Device::Cpu)?.to_dtype(q.mu.dtype())?;
                (&q.mu + (q.sigma()? * eps)?)?
            }
        };
        Ok((q, z))
    }
}

#[derive(Debug, Clone)]
pub struct IdDecoder {
    cfg: IdVaeConfig,
    net: WaveNet,
    store: ParamStore,
}

impl IdDecoder {
    pub fn new(cfg: IdVaeConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let wn = WaveNetConfig {
            input: LATENT_CHANNELS,
            channels: cfg.channels,
            layers: cfg.decoder_layers,
            kernel: cfg.kernel,
            output: PAYLOAD_CHANNELS,
            cond_dim: 0,
        };
        let mut store = ParamStore::new(dtype);
        let net = WaveNet::new(&mut Init::new(&mut store, rng).sub("wavenet"), wn, 1.0)?;
        Ok(Self { cfg, net, store })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Un-normalized payload estimate `(B, 256)`.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (b, t, c) = z.dims3()?;
        if (t, c) != (PAYLOAD_STEPS, LATENT_CHANNELS) || b == 0 {
            return Err(Error::Shape(format!("expected (B, 64, 8) latent, got {:?}", z.dims())));
        }
        embedding_from_payload(&self.net.forward(z, None)?)
    }

    /// L2-normalized embedding `(B, 256)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.decode_raw(z)?)
    }
}

fn skeleton_rng() -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

impl Checkpoint for IdEncoder {
    const KIND: &'static str = "id-encoder";
    type Config = IdVaeConfig;

    fn config_value(&self) -> IdVaeConfig {
        self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn skeleton(cfg: IdVaeConfig) -> Result<Self> {
        Self::new(cfg, DType::F32, &mut skeleton_rng())
    }
}

impl Checkpoint for IdDecoder {
    const KIND: &'static str = "id-decoder";
    type Config = IdVaeConfig;

    fn config_value(&self) -> IdVaeConfig {
        self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn skeleton(cfg: IdVaeConfig) -> Result<Self> {
        Self::new(cfg, DType::F32, &mut skeleton_rng())
    }
}
