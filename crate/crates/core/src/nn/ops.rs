//! Fused CPU kernels with hand-written backward passes.
//!
//! Every op accepts f32 (training) and f64 (gradient checks). Inputs are made
//! contiguous by the public wrappers, so kernels index raw slices.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use candle_core::backend::BackendStorage;
use num_traits::Float;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op expects contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

fn unsupported(name: &str, dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("{name}: unsupported dtype {dtype:?}"))
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn tanh<T: Float>(x: T) -> T {
    let two = T::one() + T::one();
    two * sigmoid(two * x) - T::one()
}

fn half_last(shape: &Shape) -> candle_core::Result<(Shape, usize)> {
    let dims = shape.dims();
    let last = *dims.last().unwrap_or(&0);
    if last % 2 != 0 || last == 0 {
        candle_core::bail!("gate input needs an even, non-empty last dim, got {dims:?}")
    }
    let mut out = dims.to_vec();
    *out.last_mut().unwrap() = last / 2;
    Ok((Shape::from(out), last / 2))
}

/// `tanh(a) * sigmoid(b)` where `[a, b]` split the last dimension.
struct Gate;

fn gate_fwd<T: WithDType + Float>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() / 2);
    for row in x.chunks_exact(2 * c) {
        let (a, b) = row.split_at(c);
        out.extend(a.iter().zip(b).map(|(&a, &b)| tanh(a) * sigmoid(b)));
    }
    out
}

impl CustomOp1 for Gate {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (shape, c) = half_last(l.shape())?;
        let out = match s.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(gate_fwd(contiguous::<f32>(s, l)?, c)),
            DType::F64 => f64::to_cpu_storage_owned(gate_fwd(contiguous::<f64>(s, l)?, c)),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg.apply_op2_no_bwd(&grad.contiguous()?, &GateGrad)?;
        Ok(Some(g))
    }
}

struct GateGrad;

fn gate_bwd<T: WithDType + Float>(x: &[T], g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ((row, gr), o) in x
        .chunks_exact(2 * c)
        .zip(g.chunks_exact(c))
        .zip(out.chunks_exact_mut(2 * c))
    {
        let (a, b) = row.split_at(c);
        let (oa, ob) = o.split_at_mut(c);
        for i in 0..c {
            let ta = tanh(a[i]);
            let sb = sigmoid(b[i]);
            oa[i] = gr[i] * sb * (T::one() - ta * ta);
            ob[i] = gr[i] * ta * sb * (T::one() - sb);
        }
    }
    out
}

impl CustomOp2 for GateGrad {
    fn name(&self) -> &'static str {
        "gate-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c) = half_last(l1.shape())?;
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(gate_bwd(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                c,
            )),
            DType::F64 => f64::to_cpu_storage_owned(gate_bwd(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                c,
            )),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Gated activation over the last dimension: `(..., 2C) -> (..., C)`.
pub fn gated_tanh(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gate)
}

/// `log|det W|` of a square matrix, with gradient `W^{-T}`.
struct LogAbsDet;

fn square_matrix(l: &Layout, s: &CpuStorage) -> candle_core::Result<nalgebra::DMatrix<f64>> {
    let dims = l.dims();
    if dims.len() != 2 || dims[0] != dims[1] {
        candle_core::bail!("log-det expects a square matrix, got {dims:?}")
    }
    let n = dims[0];
    let data: Vec<f64> = match s.dtype() {
        DType::F32 => contiguous::<f32>(s, l)?.iter().map(|&v| v as f64).collect(),
        DType::F64 => contiguous::<f64>(s, l)?.to_vec(),
        d => return Err(unsupported("logabsdet", d)),
    };
    Ok(nalgebra::DMatrix::from_row_slice(n, n, &data))
}

/// `log|det W|` computed through an LU factorization.
pub fn log_abs_det_f64(w: &nalgebra::DMatrix<f64>) -> f64 {
    let lu = w.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

impl CustomOp1 for LogAbsDet {
    fn name(&self) -> &'static str {
        "logabsdet"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = square_matrix(l, s)?;
        let v = log_abs_det_f64(&w);
        let out = match s.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(vec![v as f32]),
            _ => f64::to_cpu_storage_owned(vec![v]),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let n = arg.dim(0)?;
        let data = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let w = nalgebra::DMatrix::from_row_slice(n, n, &data);
        let inv = w
            .try_inverse()
            .ok_or_else(|| candle_core::Error::Msg("singular mixing matrix".into()))?;
        let inv_t = inv.transpose();
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| inv_t[(i, j)])
            .collect();
        let g = Tensor::from_vec(rows, (n, n), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(g.broadcast_mul(grad)?))
    }
}

pub fn log_abs_det(w: &Tensor) -> candle_core::Result<Tensor> {
    w.contiguous()?.apply_op1(LogAbsDet)
}

/// One LSTM step from pre-activations `(B, 4H)` ordered `[i, f, g, o]` and
/// the previous cell `(B, H)`; returns `(B, 2H)` holding `[h, c]`.
struct LstmCell;

fn lstm_fwd<T: WithDType + Float>(gates: &[T], c_prev: &[T], h: usize) -> Vec<T> {
    let b = c_prev.len() / h;
    let mut out = vec![T::zero(); b * 2 * h];
    for r in 0..b {
        let g = &gates[r * 4 * h..(r + 1) * 4 * h];
        let cp = &c_prev[r * h..(r + 1) * h];
        let (ho, co) = out[r * 2 * h..(r + 1) * 2 * h].split_at_mut(h);
        for k in 0..h {
            let i = sigmoid(g[k]);
            let f = sigmoid(g[h + k]);
            let gg = tanh(g[2 * h + k]);
            let o = sigmoid(g[3 * h + k]);
            let c = f * cp[k] + i * gg;
            co[k] = c;
            ho[k] = o * tanh(c);
        }
    }
    out
}

impl CustomOp2 for LstmCell {
    fn name(&self) -> &'static str {
        "lstm-cell"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h) = l2.shape().dims2()?;
        if l1.shape().dims2()? != (b, 4 * h) {
            candle_core::bail!("lstm gates {:?} do not match cell {:?}", l1.dims(), l2.dims())
        }
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(lstm_fwd(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                h,
            )),
            DType::F64 => f64::to_cpu_storage_owned(lstm_fwd(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                h,
            )),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, Shape::from((b, 2 * h))))
    }

    fn bwd(
        &self,
        gates: &Tensor,
        c_prev: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let h = c_prev.dim(1)?;
        let both = gates.apply_op3_no_bwd(c_prev, &grad.contiguous()?, &LstmCellGrad)?;
        Ok((Some(both.narrow(1, 0, 4 * h)?), Some(both.narrow(1, 4 * h, h)?)))
    }
}

struct LstmCellGrad;

fn lstm_bwd<T: WithDType + Float>(gates: &[T], c_prev: &[T], grad: &[T], h: usize) -> Vec<T> {
    let b = c_prev.len() / h;
    let one = T::one();
    let mut out = vec![T::zero(); b * 5 * h];
    for r in 0..b {
        let g = &gates[r * 4 * h..(r + 1) * 4 * h];
        let cp = &c_prev[r * h..(r + 1) * h];
        let gr = &grad[r * 2 * h..(r + 1) * 2 * h];
        let o_row = &mut out[r * 5 * h..(r + 1) * 5 * h];
        for k in 0..h {
            let i = sigmoid(g[k]);
            let f = sigmoid(g[h + k]);
            let gg = tanh(g[2 * h + k]);
            let o = sigmoid(g[3 * h + k]);
            let c = f * cp[k] + i * gg;
            let tc = tanh(c);
            let dh = gr[k];
            let dc = gr[h + k] + dh * o * (one - tc * tc);
            o_row[k] = dc * gg * i * (one - i);
            o_row[h + k] = dc * cp[k] * f * (one - f);
            o_row[2 * h + k] = dc * i * (one - gg * gg);
            o_row[3 * h + k] = dh * tc * o * (one - o);
            o_row[4 * h + k] = dc * f;
        }
    }
    out
}

impl CustomOp3 for LstmCellGrad {
    fn name(&self) -> &'static str {
        "lstm-cell-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h) = l2.shape().dims2()?;
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(lstm_bwd(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                contiguous::<f32>(s3, l3)?,
                h,
            )),
            DType::F64 => f64::to_cpu_storage_owned(lstm_bwd(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                contiguous::<f64>(s3, l3)?,
                h,
            )),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, Shape::from((b, 5 * h))))
    }
}

/// Returns `(h, c)` for one fused LSTM step.
pub fn lstm_cell(gates: &Tensor, c_prev: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let h = c_prev.dim(1)?;
    let both = gates.contiguous()?.apply_op2(&c_prev.contiguous()?, LstmCell)?;
    Ok((both.narrow(1, 0, h)?, both.narrow(1, h, h)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use candle_nn::ops::sigmoid as c_sigmoid;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn gate_matches_composed_ops() {
        let x = Var::from_tensor(&randn(&[3, 5, 8], 1)).unwrap();
        let w = randn(&[3, 5, 4], 2);
        let fused = gated_tanh(x.as_tensor()).unwrap();
        let a = x.narrow(2, 0, 4).unwrap();
        let b = x.narrow(2, 4, 4).unwrap();
        let composed = (a.tanh().unwrap() * c_sigmoid(&b).unwrap()).unwrap();
        assert!(max_diff(&fused, &composed) < 1e-12);

        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn logabsdet_value_and_gradient() {
        let w = Var::from_tensor(&randn(&[8, 8], 3)).unwrap();
        let v = log_abs_det(w.as_tensor()).unwrap();
        let rows = w.to_vec2::<f64>().unwrap();
        let m = nalgebra::DMatrix::from_fn(8, 8, |i, j| rows[i][j]);
        assert!((v.to_scalar::<f64>().unwrap() - m.determinant().abs().ln()).abs() < 1e-10);
        let grads = v.backward().unwrap();
        let g = grads.get(&w).unwrap().to_vec2::<f64>().unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 5), (7, 2)] {
            let mut p = m.clone();
            p[(i, j)] += h;
            let mut q = m.clone();
            q[(i, j)] -= h;
            let num = (p.determinant().abs().ln() - q.determinant().abs().ln()) / (2.0 * h);
            assert!((num - g[i][j]).abs() < 1e-6, "{num} vs {}", g[i][j]);
        }
    }

    #[test]
    fn lstm_cell_matches_composed_ops() {
        let hdim = 3;
        let gates = Var::from_tensor(&randn(&[2, 4 * hdim], 4)).unwrap();
        let cp = Var::from_tensor(&randn(&[2, hdim], 5)).unwrap();
        let wh = randn(&[2, hdim], 6);
        let wc = randn(&[2, hdim], 7);
        let (h, c) = lstm_cell(gates.as_tensor(), cp.as_tensor()).unwrap();

        let part = |k: usize| gates.narrow(1, k * hdim, hdim).unwrap();
        let i = c_sigmoid(&part(0)).unwrap();
        let f = c_sigmoid(&part(1)).unwrap();
        let g = part(2).tanh().unwrap();
        let o = c_sigmoid(&part(3)).unwrap();
        let c2 = ((f * cp.as_tensor()).unwrap() + (i * g).unwrap()).unwrap();
        let h2 = (o * c2.tanh().unwrap()).unwrap();
        assert!(max_diff(&h, &h2) < 1e-12);
        assert!(max_diff(&c, &c2) < 1e-12);

        let loss = |h: &Tensor, c: &Tensor| {
            ((h * &wh).unwrap().sum_all().unwrap() + (c * &wc).unwrap().sum_all().unwrap()).unwrap()
        };
        let ga = loss(&h, &c).backward().unwrap();
        let gb = loss(&h2, &c2).backward().unwrap();
        for v in [&gates, &cp] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        let x = randn(&[4, 6], 8);
        let a = gated_tanh(&x).unwrap();
        let b = gated_tanh(&x.to_dtype(DType::F32).unwrap()).unwrap();
        assert!(max_diff(&a, &b.to_dtype(DType::F64).unwrap()) < 1e-6);
    }
}
