//! Central-difference verification of analytic gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over probed entries of `|analytic - numeric| / (|numeric| + 1e-8)`.
    pub max_rel_error: f64,
    pub worst: String,
    pub probes: usize,
}

fn set_entry(var: &Var, base: &[f64], idx: usize, value: f64) -> Result<()> {
    let mut data = base.to_vec();
    data[idx] = value;
    let t = Tensor::from_vec(data, var.shape(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compare `d loss / d var` from backprop with a fourth-order central
/// difference at up to `probes` entries per variable (all entries when the
/// variable is smaller). Variables must be f64.
pub fn gradient_check<F>(
    vars: &[(String, Var)],
    loss: F,
    probes: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|(_, v)| v.dtype() != DType::F64) {
        return Err(Error::Parameter("gradient checks run in f64".into()));
    }
    let value = loss()?;
    let grads = value.backward()?;
    let eval = || -> Result<f64> { Ok(loss()?.to_scalar::<f64>()?) };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
    };
    for (name, var) in vars {
        let n = var.elem_count();
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let picks: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            sample(rng, n, probes).into_vec()
        };
        for idx in picks {
            let x = base[idx];
            let mut f = [0.0; 4];
            for (slot, k) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                set_entry(var, &base, idx, x + k * step)?;
                f[slot] = eval()?;
            }
            set_entry(var, &base, idx, x)?;
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step);
            let rel = (analytic[idx] - numeric).abs() / (numeric.abs() + 1e-8);
            report.probes += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{idx}]: analytic {:.6e} numeric {numeric:.6e}", analytic[idx]);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn linear_model_is_exact() {
        let w = Var::from_vec(vec![0.3f64, -1.2, 2.0], 3, &Device::Cpu).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1.0, 0.5, 0.25]], &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> {
            Ok(x.broadcast_mul(w.as_tensor())?.sum_all()?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(&[("w".into(), w.clone())], loss, 10, 1e-3, &mut rng).unwrap();
        assert_eq!(r.probes, 3);
        assert!(r.max_rel_error <= 1e-6, "{}", r.worst);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from backprop, so the check must fail
        let w = Var::from_vec(vec![0.5f64], 1, &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> {
            let t = w.as_tensor();
            Ok((t.sqr()? + t.detach().sqr()?)?.sum_all()?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(&[("w".into(), w.clone())], loss, 1, 1e-4, &mut rng).unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
