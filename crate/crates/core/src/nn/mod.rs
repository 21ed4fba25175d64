//! Small neural-network toolkit on top of candle tensors.

pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{DilatedConv, Linear, WaveNet, WaveNetConfig};
pub use lstm::Lstm;
pub use optim::Adam;
pub use params::{file_sha256, load_archive, save_archive, write_atomic, ArchiveMeta, Init, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from_f32(data: &[f32], shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// L2-normalize along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(candle_core::D::Minus1)?.affine(1.0, 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Models persisted through the shared archive format.
pub trait Checkpoint: Sized {
    const KIND: &'static str;
    type Config: serde::Serialize + serde::de::DeserializeOwned;

    fn config_value(&self) -> Self::Config;
    fn params(&self) -> &ParamStore;
    /// Build a model with the right parameter layout; values get overwritten.
    fn skeleton(cfg: Self::Config) -> Result<Self>;

    fn save(&self, path: impl AsRef<std::path::Path>, parent_sha256: Option<String>) -> Result<()> {
        let config = serde_json::to_value(self.config_value())
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        let meta = ArchiveMeta {
            kind: Self::KIND.to_string(),
            config,
            parent_sha256,
        };
        save_archive(path, self.params(), &meta)
    }

    fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, ArchiveMeta)> {
        let path = path.as_ref();
        let (tensors, meta) = load_archive(path)?;
        if meta.kind != Self::KIND {
            return Err(crate::Error::Format(format!(
                "{} holds a {} checkpoint, expected {}",
                path.display(),
                meta.kind,
                Self::KIND
            )));
        }
        let cfg: Self::Config = serde_json::from_value(meta.config.clone())
            .map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))?;
        let model = Self::skeleton(cfg)?;
        model.params().assign(&tensors)?;
        Ok((model, meta))
    }
}
