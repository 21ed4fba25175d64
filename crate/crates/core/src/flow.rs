//! Mel-conditioned Glow-style flow over squeezed waveform groups.
//!
//! `invert` maps audio to latent (the direction used for likelihood training
//! and tracing); `generate` runs the exact inverse. Each block is an
//! invertible 8×8 channel mix followed by an affine coupling whose scale and
//! shift come from a conditioned WaveNet over the first half of the channels.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{log_abs_det, log_abs_det_f64};
use crate::nn::{Checkpoint, Init, ParamStore, WaveNet, WaveNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub squeeze: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub hop: usize,
    pub mel_bands: usize,
    pub prior_sigma: f64,
    /// Coupling log-scales pass through `L·tanh(s / L)`.
    pub log_scale_limit: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            squeeze: 8,
            channels: 64,
            layers: 4,
            kernel: 3,
            hop: 256,
            mel_bands: 80,
            prior_sigma: 1.0,
            log_scale_limit: 4.0,
        }
    }
}

impl FlowConfig {
    /// Twelve-block variant with the reference block count.
    pub fn full_scale() -> Self {
        Self {
            blocks: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.layers == 0 {
            return Err(Error::Config("flow needs blocks, channels and layers > 0".into()));
        }
        if self.squeeze < 2 || self.squeeze % 2 != 0 {
            return Err(Error::Config(format!("squeeze group {} must be even", self.squeeze)));
        }
        if self.hop % self.squeeze != 0 {
            return Err(Error::Config(format!(
                "hop {} must be a multiple of the squeeze group {}",
                self.hop, self.squeeze
            )));
        }
        if !(self.prior_sigma > 0.0) || !(self.log_scale_limit > 0.0) {
            return Err(Error::Config("prior sigma and log-scale limit must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_frame(&self) -> usize {
        self.hop / self.squeeze
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingInit {
    /// Final conditioner layer at zero: every coupling starts as the identity.
    Zero,
    /// Random final layer with the given gain (tests and oracles).
    Random(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixingInit {
    Orthogonal,
    Identity,
}

/// Group consecutive samples: `x[8t + c]` becomes entry `(t, c)`.
pub fn squeeze(samples: &[f32], group: usize) -> Result<Vec<Vec<f32>>> {
    if group == 0 || samples.len() % group != 0 {
        return Err(Error::Shape(format!(
            "{} samples do not split into groups of {group}",
            samples.len()
        )));
    }
    Ok(samples.chunks_exact(group).map(|c| c.to_vec()).collect())
}

pub fn unsqueeze(groups: &[Vec<f32>]) -> Vec<f32> {
    groups.iter().flatten().copied().collect()
}

/// Log-mel values are shifted and scaled into roughly unit range before
/// conditioning.
const MEL_SHIFT: f64 = 5.0;
const MEL_SCALE: f64 = 1.0 / 3.0;

#[derive(Debug, Clone)]
struct Block {
    mix: Tensor,
    coupling: WaveNet,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    cfg: FlowConfig,
    blocks: Vec<Block>,
    store: ParamStore,
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng));
    let mut q = g.qr().q();
    if q.determinant() < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect()
}

impl FlowModel {
    pub fn new(
        cfg: FlowConfig,
        dtype: DType,
        rng: &mut ChaCha8Rng,
        mixing: MixingInit,
        coupling: CouplingInit,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        {
            let mut init = Init::new(&mut store, rng);
            let n = cfg.squeeze;
            for b in 0..cfg.blocks {
                let mut bi = init.sub(format!("block{b}"));
                let w = match mixing {
                    MixingInit::Orthogonal => orthogonal(n, bi.rng()),
                    MixingInit::Identity => {
                        (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()
                    }
                };
                let mix = bi.tensor("mix", w, &[n, n])?;
                let wn = WaveNetConfig {
                    input: n / 2,
                    channels: cfg.channels,
                    layers: cfg.layers,
                    kernel: cfg.kernel,
                    output: n,
                    cond_dim: cfg.mel_bands,
                };
                let gain = match coupling {
                    CouplingInit::Zero => 0.0,
                    CouplingInit::Random(g) => g,
                };
                let coupling = WaveNet::new(&mut bi.sub("coupling"), wn, gain)?;
                blocks.push(Block { mix, coupling });
            }
        }
        Ok(Self { cfg, blocks, store })
    }

    /// Identity mixings and zero couplings: `generate(z, m) = unsqueeze(z)`.
    pub fn identity(cfg: FlowConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(cfg, dtype, rng, MixingInit::Identity, CouplingInit::Zero)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Independent copy with the same parameter values.
    pub fn deep_clone(&self, rng: &mut ChaCha8Rng) -> Result<Self> {
        let copy = Self::new(
            self.cfg,
            self.store.dtype(),
            rng,
            MixingInit::Identity,
            CouplingInit::Zero,
        )?;
        copy.store.copy_from(&self.store)?;
        Ok(copy)
    }

    fn mix_matrix(&self, b: usize) -> Result<nalgebra::DMatrix<f64>> {
        let n = self.cfg.squeeze;
        let rows = self.blocks[b].mix.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(nalgebra::DMatrix::from_row_slice(n, n, &rows))
    }

    /// Fails when any mixing matrix is (numerically) singular.
    pub fn check_mixing(&self) -> Result<()> {
        for b in 0..self.blocks.len() {
            let det = self.mix_matrix(b)?.determinant();
            if !(det.abs() > 1e-12) {
                return Err(Error::Numeric(format!("mixing matrix of block {b} has det {det:e}")));
            }
        }
        Ok(())
    }

    pub fn mixing_log_dets(&self) -> Result<Vec<f64>> {
        (0..self.blocks.len()).map(|b| Ok(log_abs_det_f64(&self.mix_matrix(b)?))).collect()
    }

    fn check_shapes(&self, samples: usize, mel: &Tensor) -> Result<usize> {
        let (_, frames, bands) = mel.dims3()?;
        if samples % self.cfg.hop != 0 || samples == 0 {
            return Err(Error::Shape(format!(
                "{samples} samples is not a positive multiple of the hop {}",
                self.cfg.hop
            )));
        }
        if frames * self.cfg.hop != samples || bands != self.cfg.mel_bands {
            return Err(Error::Shape(format!(
                "mel of {frames}x{bands} does not cover {samples} samples with {} bands",
                self.cfg.mel_bands
            )));
        }
        Ok(samples / self.cfg.squeeze)
    }

    fn cond(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(mel.to_dtype(self.store.dtype())?.affine(MEL_SCALE, MEL_SHIFT * MEL_SCALE)?)
    }

    fn scale_shift(&self, block: &Block, a: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let half = self.cfg.squeeze / 2;
        let h = block.coupling.forward(a, Some(cond))?;
        let lim = self.cfg.log_scale_limit;
        let log_s = (h.narrow(2, 0, half)? / lim)?.tanh()?.affine(lim, 0.0)?;
        let t = h.narrow(2, half, half)?;
        Ok((log_s, t))
    }

    /// Audio `(B, N)` → latent `(B, N/8, 8)` and per-example `log|det J|` `(B,)`.
    pub fn invert(&self, x: &Tensor, mel: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n) = x.dims2()?;
        let t = self.check_shapes(n, mel)?;
        let g = self.cfg.squeeze;
        let half = g / 2;
        let cond = self.cond(mel)?;
        let mut h = x.to_dtype(self.store.dtype())?.reshape((b, t, g))?;
        let mut logdet: Option<Tensor> = None;
        for block in &self.blocks {
            let u = h.broadcast_matmul(&block.mix.t()?)?;
            let a = u.narrow(2, 0, half)?;
            let xb = u.narrow(2, half, half)?;
            let (log_s, shift) = self.scale_shift(block, &a, &cond)?;
            let zb = ((xb * log_s.exp()?)? + shift)?;
            h = Tensor::cat(&[&a, &zb], 2)?;
            let ld = (log_s.sum((1, 2))? + (log_abs_det(&block.mix)? * t as f64)?.broadcast_as(b)?)?;
            logdet = Some(match logdet {
                Some(acc) => (acc + ld)?,
                None => ld,
            });
        }
        Ok((h, logdet.expect("at least one block")))
    }

    /// Latent `(B, T, 8)` → audio `(B, 8T)`; exact inverse of [`invert`].
    pub fn generate(&self, z: &Tensor, mel: &Tensor) -> Result<Tensor> {
        let (b, t, g) = z.dims3()?;
        if g != self.cfg.squeeze {
            return Err(Error::Shape(format!("latent has {g} channels, flow uses {}", self.cfg.squeeze)));
        }
        self.check_shapes(t * g, mel)?;
        let half = g / 2;
        let cond = self.cond(mel)?;
        let mut h = z.to_dtype(self.store.dtype())?;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let a = h.narrow(2, 0, half)?;
            let zb = h.narrow(2, half, half)?;
            let (log_s, shift) = self.scale_shift(block, &a, &cond)?;
            let xb = ((zb - shift)? * log_s.neg()?.exp()?)?;
            let u = Tensor::cat(&[&a, &xb], 2)?;
            let inv = self
                .mix_matrix(i)?
                .try_inverse()
                .ok_or_else(|| Error::Numeric(format!("mixing matrix of block {i} is singular")))?;
            let inv_t: Vec<f64> = (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).map(|(r, c)| inv[(c, r)]).collect();
            let inv_t = Tensor::from_vec(inv_t, (g, g), &Device::Cpu)?.to_dtype(self.store.dtype())?;
            h = u.broadcast_matmul(&inv_t)?;
        }
        Ok(h.reshape((b, t * g))?)
    }

    /// `log N(z; 0, σ²I) + log|det J|` per example, `(B,)`.
    pub fn log_likelihood(&self, x: &Tensor, mel: &Tensor) -> Result<Tensor> {
        let (z, logdet) = self.invert(x, mel)?;
        let s2 = self.cfg.prior_sigma * self.cfg.prior_sigma;
        let d = z.dims()[1] * z.dims()[2];
        let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * s2).ln();
        let quad = z.sqr()?.sum((1, 2))?.affine(-0.5 / s2, norm)?;
        Ok((quad + logdet)?)
    }

    /// Mean negative log-likelihood per sample, the generator training loss.
    pub fn nll_per_dim(&self, x: &Tensor, mel: &Tensor) -> Result<Tensor> {
        let n = x.dim(1)?;
        Ok((self.log_likelihood(x, mel)?.mean_all()?.neg()? / n as f64)?)
    }
}

/// Generator and inverter checkpoints share this layout; the inverter's
/// header records the generator it was initialized from.
impl Checkpoint for FlowModel {
    const KIND: &'static str = "flow";
    type Config = FlowConfig;

    fn config_value(&self) -> FlowConfig {
        self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn skeleton(cfg: FlowConfig) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        Self::identity(cfg, DType::F32, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> FlowConfig {
        FlowConfig {
            blocks: 2,
            channels: 8,
            layers: 2,
            hop: 8,
            mel_bands: 3,
            ..FlowConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn squeeze_layout() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let s = squeeze(&x, 8).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1], (8..16).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(unsqueeze(&s), x);
        assert!(matches!(squeeze(&x[..15], 8), Err(Error::Shape(_))));
        assert_eq!(squeeze(&vec![0.0; 16384], 8).unwrap().len(), 2048);
    }

    #[test]
    fn identity_flow_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = FlowModel::identity(tiny(), DType::F64, &mut rng).unwrap();
        let z = randn(&[2, 4, 8], 1);
        let mel = randn(&[2, 4, 3], 2);
        let x = flow.generate(&z, &mel).unwrap();
        let flat = z.reshape((2, 32)).unwrap();
        assert_eq!(x.to_vec2::<f64>().unwrap(), flat.to_vec2::<f64>().unwrap());
        let (back, logdet) = flow.invert(&x, &mel).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), z.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_eq!(logdet.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        // log-likelihood reduces to the Gaussian prior
        let ll = flow.log_likelihood(&x, &mel).unwrap().to_vec1::<f64>().unwrap();
        let zv = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect: f64 = zv[..32].iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((ll[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn random_flow_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = FlowModel::new(tiny(), DType::F64, &mut rng, MixingInit::Orthogonal, CouplingInit::Random(0.5)).unwrap();
        let z = randn(&[1, 6, 8], 4);
        let mel = randn(&[1, 6, 3], 5);
        let x = flow.generate(&z, &mel).unwrap();
        let (back, _) = flow.invert(&x, &mel).unwrap();
        let err = (back - &z).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-10, "{err}");
        flow.check_mixing().unwrap();
        for ld in flow.mixing_log_dets().unwrap() {
            assert!(ld.abs() < 1e-10);
        }
    }

    #[test]
    fn shifting_log_scales_shifts_log_det() {
        // logdet is linear in the coupling log-scales: compare against the
        // sum of the recorded per-block terms.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = tiny();
        cfg.blocks = 1;
        let flow = FlowModel::new(cfg, DType::F64, &mut rng, MixingInit::Orthogonal, CouplingInit::Random(0.3)).unwrap();
        let x = randn(&[1, 16], 8);
        let mel = randn(&[1, 2, 3], 9);
        let (_, ld) = flow.invert(&x, &mel).unwrap();
        let a = x.reshape((1, 2, 8)).unwrap().broadcast_matmul(&flow.blocks[0].mix.t().unwrap()).unwrap();
        let (log_s, _) = flow.scale_shift(&flow.blocks[0], &a.narrow(2, 0, 4).unwrap(), &flow.cond(&mel).unwrap()).unwrap();
        let sum = log_s.sum_all().unwrap().to_scalar::<f64>().unwrap();
        let mix = flow.mixing_log_dets().unwrap()[0] * 2.0;
        assert!((ld.to_vec1::<f64>().unwrap()[0] - sum - mix).abs() < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = FlowModel::identity(tiny(), DType::F32, &mut rng).unwrap();
        let x = Tensor::zeros((1, 20), DType::F32, &Device::Cpu).unwrap();
        let mel = Tensor::zeros((1, 2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(flow.invert(&x, &mel), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 16), DType::F32, &Device::Cpu).unwrap();
        let mel = Tensor::zeros((1, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(flow.invert(&x, &mel), Err(Error::Shape(_))));
    }
}
