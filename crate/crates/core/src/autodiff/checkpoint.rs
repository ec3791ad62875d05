use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::Bindings;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named parameters, kept in name order so serialization is canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the companion `.bin` file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub params: Vec<CheckpointEntry>,
}

const FORMAT: &str = "f64-le";

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Union of two sets; entries of `other` win on name collisions.
    pub fn merged(&self, other: &ParamSet<T>) -> ParamSet<T> {
        let mut params = self.params.clone();
        params.extend(other.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        ParamSet { params }
    }

    /// Subset whose names start with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn bind_all<'a>(&'a self, bindings: &mut Bindings<'a, T>) {
        for (name, value) in &self.params {
            bindings.bind(name.clone(), value);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        CheckpointHeader {
            format: FORMAT.to_string(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (values). Returns both paths.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(parent) = stem.parent() {
            fs::create_dir_all(parent)?;
        }
        let (json, bin) = checkpoint_paths(stem);
        fs::write(&json, serde_json::to_vec_pretty(&self.header())?)?;
        fs::write(&bin, self.to_bytes())?;
        Ok((json, bin))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, bin) = checkpoint_paths(stem);
        for p in [&json, &bin] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let header: CheckpointHeader = serde_json::from_slice(&fs::read(&json)?)?;
        let bytes = fs::read(&bin)?;
        Self::from_parts(&header, &bytes).map_err(|reason| Error::Format { path: bin, reason })
    }

    pub fn from_parts(header: &CheckpointHeader, bytes: &[u8]) -> std::result::Result<Self, String> {
        if header.format != FORMAT {
            return Err(format!("unsupported format `{}`", header.format));
        }
        let mut params = BTreeMap::new();
        for e in &header.params {
            let n = numel(&e.shape);
            let end = e.offset + n * 8;
            if end > bytes.len() {
                return Err(format!("`{}` extends past end of file", e.name));
            }
            let data = bytes[e.offset..end]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| err.to_string())?;
            params.insert(e.name.clone(), t);
        }
        Ok(ParamSet { params })
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_offsets_follow_name_order() {
        let mut p = ParamSet::<f64>::new();
        p.insert("b", Tensor::zeros(&[2, 3]));
        p.insert("a", Tensor::zeros(&[4]));
        let h = p.header();
        assert_eq!(h.params[0].name, "a");
        assert_eq!(h.params[0].offset, 0);
        assert_eq!(h.params[1].name, "b");
        assert_eq!(h.params[1].offset, 32);
        assert_eq!(p.to_bytes().len(), 80);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::<f64>::new();
        p.insert("det.w", Tensor::from_fn(&[3, 2], |i| (i as f64).exp() * 1e-3 - 0.1));
        p.insert("hfp.img.query", Tensor::from_fn(&[2, 2, 2], |i| -(i as f64) / 7.0));
        let stem = dir.path().join("ckpt");
        p.save(&stem).unwrap();
        let q = ParamSet::<f64>::load(&stem).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = ParamSet::<f64>::load(&dir.path().join("nothing")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
