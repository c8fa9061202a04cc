//! Named parameter tensors, safetensors I/O, fingerprints, seeded synthetic
//! initialization.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4};
use rand::Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn view<D: ndarray::Dimension>(&self, dim: D) -> ArrayView<'_, D> {
        ndarray::ArrayView::from_shape(dim, &self.data).expect("shape checked at load")
    }

    pub fn view1(&self) -> ArrayView1<'_, f32> {
        self.view(Ix1(self.shape[0]))
    }

    /// Two-dimensional view; leading singleton axes are dropped.
    pub fn view2(&self) -> ArrayView2<'_, f32> {
        let n = self.shape.len();
        let cols = self.shape[n - 1];
        self.view(Ix2(self.data.len() / cols, cols))
    }

    pub fn view4(&self) -> ArrayView4<'_, f32> {
        let s = &self.shape;
        self.view(Ix4(s[0], s[1], s[2], s[3]))
    }
}

type ArrayView<'a, D> = ndarray::ArrayView<'a, f32, D>;

/// How a synthetic parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f32),
    Normal { std: f32 },
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamDef {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Immutable set of named parameters, kept in canonical (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing after layout check"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `sha256:<hex>` over names, shapes and little-endian values, in name order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("sha256:{}", hex::encode(hasher.finalize()))
    }

    /// Seeded synthetic weights following `layout`.
    pub fn synthetic(layout: &[ParamDef], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for def in layout {
            let mut r = rng::derived(seed, &[&def.name]);
            let n: usize = def.shape.iter().product();
            let data = match def.init {
                Init::Const(c) => vec![c; n],
                Init::Normal { std } => (0..n)
                    .map(|_| r.sample::<f32, _>(StandardNormal) * std)
                    .collect(),
            };
            tensors.insert(
                def.name.clone(),
                Tensor {
                    shape: def.shape.clone(),
                    data,
                },
            );
        }
        ParamStore { tensors }
    }

    /// Read the tensors named in `layout` from a safetensors buffer. Extra
    /// tensors (classifier heads, batch counters) are ignored.
    pub fn from_safetensors(bytes: &[u8], layout: &[ParamDef], origin: &str) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::InvalidWeights(format!("{origin}: {e}")))?;
        let mut tensors = BTreeMap::new();
        for def in layout {
            let view = st.tensor(&def.name).map_err(|_| {
                Error::InvalidWeights(format!("{origin}: missing tensor `{}`", def.name))
            })?;
            let shape: Vec<usize> = view.shape().to_vec();
            if shape.iter().product::<usize>() != def.shape.iter().product::<usize>()
                || squeeze(&shape) != squeeze(&def.shape)
            {
                return Err(Error::InvalidWeights(format!(
                    "{origin}: tensor `{}` has shape {shape:?}, expected {:?}",
                    def.name, def.shape
                )));
            }
            if view.dtype() != Dtype::F32 {
                return Err(Error::InvalidWeights(format!(
                    "{origin}: tensor `{}` has dtype {:?}; only F32 is supported",
                    def.name,
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(
                def.name.clone(),
                Tensor {
                    shape: def.shape.clone(),
                    data,
                },
            );
        }
        Ok(ParamStore { tensors })
    }

    pub fn load_safetensors(path: &Path, layout: &[ParamDef]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::WeightsNotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_safetensors(&bytes, layout, &path.display().to_string())
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), raw, t.shape.clone())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::InvalidWeights(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::InvalidWeights(e.to_string()))
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let bytes = self.to_safetensors()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn squeeze(shape: &[usize]) -> Vec<usize> {
    shape.iter().copied().filter(|&d| d != 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Vec<ParamDef> {
        vec![
            ParamDef::new("a.weight", &[4, 3], Init::Normal { std: 0.1 }),
            ParamDef::new("a.bias", &[4], Init::Const(0.0)),
            ParamDef::new("cls", &[1, 1, 3], Init::Normal { std: 0.02 }),
        ]
    }

    #[test]
    fn synthetic_is_seeded() {
        assert_eq!(ParamStore::synthetic(&layout(), 1), ParamStore::synthetic(&layout(), 1));
        assert_ne!(
            ParamStore::synthetic(&layout(), 1).fingerprint(),
            ParamStore::synthetic(&layout(), 2).fingerprint()
        );
    }

    #[test]
    fn safetensors_round_trip_keeps_fingerprint() {
        let p = ParamStore::synthetic(&layout(), 5);
        let bytes = p.to_safetensors().unwrap();
        let q = ParamStore::from_safetensors(&bytes, &layout(), "mem").unwrap();
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn tiny_perturbation_changes_fingerprint() {
        let p = ParamStore::synthetic(&layout(), 5);
        let mut q = p.clone();
        q.tensors.get_mut("a.weight").unwrap().data[0] += 1e-7;
        assert_ne!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let p = ParamStore::synthetic(&layout(), 5);
        let bytes = p.to_safetensors().unwrap();
        let mut other = layout();
        other[0].shape = vec![3, 4];
        let err = ParamStore::from_safetensors(&bytes, &other, "mem").unwrap_err();
        assert_eq!(err.code(), "INVALID_WEIGHTS");
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let p = ParamStore::synthetic(&layout()[..2], 5);
        let bytes = p.to_safetensors().unwrap();
        assert!(ParamStore::from_safetensors(&bytes, &layout(), "mem").is_err());
    }
}
