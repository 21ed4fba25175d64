use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors of one model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Parameter(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match exactly.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Format(format!("unexpected tensor {name} in archive")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("archive lacks tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Copy values from another store with the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.assign(&other.tensors())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let bad = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .any(|x| !x.is_finite());
            if bad {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Parameter factory: registers tensors under a dotted prefix and draws
/// initial values from a seeded generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut *self.rng);
                v * std
            })
            .collect();
        self.tensor(name, data, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.tensor(name, vec![value; n], shape)
    }
}

/// Header stored alongside the tensors of every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub kind: String,
    pub config: serde_json::Value,
    /// SHA-256 of the checkpoint this one was initialized from, if any.
    #[serde(default)]
    pub parent_sha256: Option<String>,
}

const META_KEY: &str = "voxtracer";

pub fn save_archive(path: impl AsRef<Path>, store: &ParamStore, meta: &ArchiveMeta) -> Result<()> {
    let path = path.as_ref();
    let tensors: BTreeMap<String, Tensor> = store
        .named()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let header = serde_json::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), header)]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<(HashMap<String, Tensor>, ArchiveMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dependency(format!("checkpoint {} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| fmt(e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| fmt(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| fmt("missing checkpoint header".into()))?;
    let meta: ArchiveMeta = serde_json::from_str(meta_json).map_err(|e| fmt(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        use candle_core::safetensors::Load;
        tensors.insert(name, view.load(&Device::Cpu)?);
    }
    Ok((tensors, meta))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write through a temporary sibling file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut s, &mut rng);
        let mut a = init.sub("layer");
        a.normal("w", &[3, 4], 1.0).unwrap();
        a.constant("b", &[4], 0.5).unwrap();
        s
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let s = store(1);
        let meta = ArchiveMeta {
            kind: "test".into(),
            config: serde_json::json!({"x": 1}),
            parent_sha256: Some("ab".into()),
        };
        save_archive(&path, &s, &meta).unwrap();
        let (tensors, back) = load_archive(&path).unwrap();
        assert_eq!(back, meta);
        let t = store(2);
        t.assign(&tensors).unwrap();
        for (name, v) in s.named() {
            let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = t.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b);
        }
        // saving the same values twice yields identical bytes
        let p2 = dir.path().join("m2.safetensors");
        save_archive(&p2, &t, &meta).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), file_sha256(&p2).unwrap());
    }

    #[test]
    fn assign_rejects_mismatch() {
        let s = store(1);
        let mut tensors = s.tensors();
        tensors.insert("layer.b".into(), Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(s.assign(&tensors), Err(Error::Shape(_))));
        let mut tensors = s.tensors();
        tensors.remove("layer.w");
        let r = s.assign(&tensors);
        assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
    }

    #[test]
    fn missing_checkpoint_is_dependency_error() {
        assert!(matches!(
            load_archive("/nonexistent/x.safetensors"),
            Err(Error::Dependency(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut s, &mut rng);
        init.constant("a", &[1], 0.0).unwrap();
        assert!(init.constant("a", &[1], 0.0).is_err());
    }
}
