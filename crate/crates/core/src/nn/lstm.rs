use candle_core::{DType, Tensor};

use super::ops::lstm_cell;
use super::params::Init;
use crate::error::Result;

/// Single-direction LSTM layer over `(B, T, input)` sequences.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(init: &mut Init, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = init.uniform("w_ih", &[input, 4 * hidden], bound)?;
        let w_hh = init.uniform("w_hh", &[hidden, 4 * hidden], bound)?;
        // forget gate starts open
        let bias: Vec<f64> = (0..4 * hidden)
            .map(|i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let b = init.tensor("b", bias, &[4 * hidden])?;
        Ok(Self {
            w_ih,
            w_hh,
            b,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let proj = x.broadcast_matmul(&self.w_ih)?.broadcast_add(&self.b)?;
        let dtype: DType = x.dtype();
        let mut h = Tensor::zeros((b, self.hidden), dtype, x.device())?;
        let mut c = h.clone();
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (proj.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&self.w_hh)?)?;
            let (h2, c2) = lstm_cell(&gates, &c)?;
            h = h2;
            c = c2;
            outs.push(h.clone());
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}
