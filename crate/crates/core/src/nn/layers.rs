//! Building blocks operating on `(batch, time, channels)` tensors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ops::gated_tanh;
use super::params::Init;
use crate::error::{Error, Result};

/// Per-position affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    /// Weights drawn from `N(0, (gain / sqrt(fan_in))^2)`; `gain = 0` gives an all-zero layer.
    pub fn new(init: &mut Init, input: usize, output: usize, gain: f64) -> Result<Self> {
        let std = gain / (input as f64).sqrt();
        let w = if gain == 0.0 {
            init.constant("w", &[input, output], 0.0)?
        } else {
            init.normal("w", &[input, output], std)?
        };
        let b = init.constant("b", &[output], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn with_bias(init: &mut Init, input: usize, output: usize, gain: f64, bias: &[f64]) -> Result<Self> {
        let std = gain / (input as f64).sqrt();
        let w = init.normal("w", &[input, output], std)?;
        let b = init.tensor("b", bias.to_vec(), &[output])?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w)?.broadcast_add(&self.b)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn output_dim(&self) -> usize {
        self.w.dims()[1]
    }
}

/// Non-causal dilated convolution along time with "same" zero padding.
#[derive(Debug, Clone)]
pub struct DilatedConv {
    taps: Vec<Tensor>,
    b: Tensor,
    dilation: usize,
}

impl DilatedConv {
    pub fn new(init: &mut Init, input: usize, output: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let std = 1.0 / ((input * kernel) as f64).sqrt();
        let taps = (0..kernel)
            .map(|j| init.normal(&format!("w{j}"), &[input, output], std))
            .collect::<Result<_>>()?;
        let b = init.constant("b", &[output], 0.0)?;
        Ok(Self { taps, b, dilation })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let half = (self.taps.len() / 2) * self.dilation;
        let padded = x.pad_with_zeros(1, half, half)?;
        let mut acc = self.b.clone();
        for (j, w) in self.taps.iter().enumerate() {
            let view = padded.narrow(1, j * self.dilation, t)?;
            acc = view.broadcast_matmul(w)?.broadcast_add(&acc)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveNetConfig {
    pub input: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub output: usize,
    /// Width of the frame-rate conditioning input; 0 disables conditioning.
    pub cond_dim: usize,
}

/// Non-causal WaveNet: gated dilated convolutions with residual and skip
/// paths, optionally conditioned on a frame-rate signal repeated up to the
/// time resolution of the input.
#[derive(Debug, Clone)]
pub struct WaveNet {
    cfg: WaveNetConfig,
    start: Linear,
    convs: Vec<DilatedConv>,
    res_skip: Vec<Linear>,
    cond: Option<Linear>,
    end: Linear,
}

impl WaveNet {
    pub fn new(init: &mut Init, cfg: WaveNetConfig, end_gain: f64) -> Result<Self> {
        if cfg.channels == 0 || cfg.layers == 0 {
            return Err(Error::Config("WaveNet needs at least one layer and channel".into()));
        }
        let c = cfg.channels;
        let start = Linear::new(&mut init.sub("start"), cfg.input, c, 1.0)?;
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut res_skip = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            convs.push(DilatedConv::new(&mut init.sub(format!("conv{l}")), c, 2 * c, cfg.kernel, 1 << l)?);
            let out = if l + 1 < cfg.layers { 2 * c } else { c };
            res_skip.push(Linear::new(&mut init.sub(format!("res_skip{l}")), c, out, 1.0)?);
        }
        let cond = if cfg.cond_dim > 0 {
            Some(Linear::new(&mut init.sub("cond"), cfg.cond_dim, 2 * c * cfg.layers, 1.0)?)
        } else {
            None
        };
        let end = Linear::new(&mut init.sub("end"), c, cfg.output, end_gain)?;
        Ok(Self {
            cfg,
            start,
            convs,
            res_skip,
            cond,
            end,
        })
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.cfg
    }

    /// `x`: `(B, T, input)`; `cond`: `(B, F, cond_dim)` with `T` a multiple of `F`.
    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let c = self.cfg.channels;
        let cond = match (&self.cond, cond) {
            (Some(proj), Some(m)) => {
                let (_, frames, _) = m.dims3()?;
                if frames == 0 || t % frames != 0 {
                    return Err(Error::Shape(format!(
                        "{t} time steps cannot be split over {frames} conditioning frames"
                    )));
                }
                let reps = t / frames;
                let width = 2 * c * self.cfg.layers;
                let p = proj.forward(m)?;
                let up = if reps == 1 {
                    p
                } else {
                    p.unsqueeze(2)?
                        .broadcast_as((b, frames, reps, width))?
                        .reshape((b, t, width))?
                };
                Some(up)
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::Shape("conditioning input required".into())),
            (None, Some(_)) => return Err(Error::Shape("network takes no conditioning".into())),
        };
        let mut h = self.start.forward(x)?;
        let mut skip: Option<Tensor> = None;
        for (l, (conv, rs)) in self.convs.iter().zip(&self.res_skip).enumerate() {
            let mut a = conv.forward(&h)?;
            if let Some(cond) = &cond {
                a = (a + cond.narrow(2, l * 2 * c, 2 * c)?)?;
            }
            let acts = gated_tanh(&a)?;
            let out = rs.forward(&acts)?;
            let s = if l + 1 < self.cfg.layers {
                h = (h + out.narrow(2, 0, c)?)?;
                out.narrow(2, c, c)?
            } else {
                out
            };
            skip = Some(match skip {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
        self.end.forward(&skip.expect("at least one layer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn dilated_conv_matches_direct_sum() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let conv = DilatedConv::new(&mut Init::new(&mut store, &mut rng), 2, 3, 3, 2).unwrap();
        let x: Vec<f64> = (0..14).map(|i| (i as f64 * 0.7).sin()).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 7, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&xt).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let w: Vec<Vec<Vec<f64>>> = conv.taps.iter().map(|t| t.to_vec2().unwrap()).collect();
        for t in 0..7i64 {
            for o in 0..3 {
                let mut acc = 0.0;
                for (j, wj) in w.iter().enumerate() {
                    let src = t + (j as i64 - 1) * 2;
                    if (0..7).contains(&src) {
                        for i in 0..2 {
                            acc += x[src as usize * 2 + i] * wj[i][o];
                        }
                    }
                }
                assert!((acc - y[t as usize][o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wavenet_shapes_and_zero_end() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = WaveNetConfig {
            input: 4,
            channels: 8,
            layers: 3,
            kernel: 3,
            output: 6,
            cond_dim: 5,
        };
        let net = WaveNet::new(&mut Init::new(&mut store, &mut rng), cfg, 0.0).unwrap();
        let x = Tensor::ones((2, 16, 4), DType::F32, &Device::Cpu).unwrap();
        let m = Tensor::ones((2, 4, 5), DType::F32, &Device::Cpu).unwrap();
        let y = net.forward(&x, Some(&m)).unwrap();
        assert_eq!(y.dims(), &[2, 16, 6]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let bad = Tensor::ones((2, 5, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&x, Some(&bad)).is_err());
    }
}
