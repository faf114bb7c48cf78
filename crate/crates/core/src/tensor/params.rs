use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{read_qtns, write_qtns, Tensor};
use crate::error::{Error, Result};

/// Named tensors in insertion order. Names are unique and a tensor's shape
/// never changes once inserted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {:?}", name)));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("missing parameter {:?}", name)))
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("missing parameter {:?}", name)))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} has shape {:?}, refusing {:?}",
                name,
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Writes one QTNS file per tensor plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("{:03}_{}.qtns", i, sanitize(name));
            write_qtns(t, dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = serde_json::to_string_pretty(&Manifest { tensors: entries })?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::data(&manifest_path, format!("cannot read manifest: {}", e)))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e.to_string()))?;
        let mut set = ParameterSet::new();
        for entry in manifest.tensors {
            let path = dir.join(&entry.file);
            let t = read_qtns(&path)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::data(
                    &path,
                    format!("manifest says {:?}, file holds {:?}", entry.shape, t.shape()),
                ));
            }
            set.insert(entry.name, t)?;
        }
        Ok(set)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_fixed() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![1])).is_err());
        assert!(p.set("w", Tensor::zeros(vec![4])).is_err());
        p.set("w", Tensor::full(vec![2, 2], 1.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn save_load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParameterSet::new();
        p.insert("z.weight", Tensor::full(vec![2, 3], 0.5)).unwrap();
        p.insert("a.bias", Tensor::from_vec(vec![1.0, 2.0]).unwrap()).unwrap();
        p.save(dir.path()).unwrap();
        let q = ParameterSet::load(dir.path()).unwrap();
        assert_eq!(p, q);
        let names: Vec<&str> = q.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["z.weight", "a.bias"]);
    }
}
