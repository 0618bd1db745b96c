//! Named parameter storage with a stable flatten order.
//!
//! Parameters live under path strings (`shared/layer0/weight`,
//! `task/1/bias`, ...). Flattening concatenates values in lexicographic path
//! order, which is what gradient bundles, checksums, and checkpoints rely on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path {path}")));
        }
        self.params.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    /// Replace an existing parameter; the shape must not change.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let current = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))?;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *current = value;
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar values.
    pub fn flat_len(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Concatenate all values in lexicographic path order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in self.params.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`]: write `flat` back into the store's tensors.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Contract(format!(
                "unflatten got {} values for {} parameters",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Gradient step `p -= lr * g` for every path present in `grads`.
    pub fn apply_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (path, g) in grads {
            let p = self
                .params
                .get_mut(path)
                .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
            if !p.all_finite() {
                return Err(Error::Divergence(format!(
                    "parameter {path} became non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Mount every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamBinding { ids }
    }

    /// Order-insensitive digest of paths, shapes, and value bits.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |b: u8| {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for (path, t) in &self.params {
            path.bytes().for_each(&mut eat);
            for &d in t.shape() {
                (d as u64).to_le_bytes().iter().copied().for_each(&mut eat);
            }
            for v in t.data() {
                v.to_bits().to_le_bytes().iter().copied().for_each(&mut eat);
            }
        }
        hash
    }

    /// Layout of the paths accepted by `pred`, in flatten order.
    pub fn layout_matching(&self, pred: impl Fn(&str) -> bool) -> FlattenLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (path, t) in &self.params {
            if pred(path) {
                entries.push(LayoutEntry {
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
            }
        }
        FlattenLayout {
            entries,
            total: offset,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        CheckpointTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                file.format_version
            )));
        }
        let mut store = ParameterStore::new();
        for (k, t) in file.params {
            store.insert(k, Tensor::new(t.shape, t.data)?)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    params: BTreeMap<String, CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Tape leaf ids for a bound [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, path: &str) -> Option<NodeId> {
        self.ids.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Node ids for `paths`, in the given order.
    pub fn ids_for(&self, paths: &[String]) -> Result<Vec<NodeId>> {
        paths
            .iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Contract(format!("unbound parameter path {p}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct LayoutEntry {
    path: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Flatten order for a parameter subset (e.g. the `shared/` namespace).
#[derive(Clone, Debug)]
pub struct FlattenLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl FlattenLayout {
    pub fn flat_len(&self) -> usize {
        self.total
    }

    pub fn paths(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.path.clone()).collect()
    }

    /// Flatten per-path tensors into one vector; missing paths are zero.
    pub fn flatten(&self, values: &BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.total];
        for e in &self.entries {
            if let Some(t) = values.get(&e.path) {
                if t.shape() != e.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "flatten",
                        lhs: t.shape().to_vec(),
                        rhs: e.shape.clone(),
                    });
                }
                out[e.offset..e.offset + t.len()].copy_from_slice(t.data());
            }
        }
        Ok(out)
    }

    /// Split a flat vector back into per-path tensors.
    pub fn unflatten(&self, flat: &[f64]) -> Result<BTreeMap<String, Tensor>> {
        if flat.len() != self.total {
            return Err(Error::Contract(format!(
                "unflatten got {} values, layout holds {}",
                flat.len(),
                self.total
            )));
        }
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            out.insert(
                e.path.clone(),
                Tensor::new(e.shape.clone(), flat[e.offset..e.offset + n].to_vec())?,
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("shared/w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        s.insert("task/0/b", Tensor::vector(vec![5.0])).unwrap();
        s.insert("shared/b", Tensor::vector(vec![-1.0, -2.0])).unwrap();
        s
    }

    #[test]
    fn flatten_is_lexicographic() {
        let s = sample_store();
        // shared/b < shared/w < task/0/b
        assert_eq!(s.flatten(), vec![-1.0, -2.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_identity() {
        let mut s = sample_store();
        let flat = s.flatten();
        s.unflatten(&flat).unwrap();
        assert_eq!(s.flatten(), flat);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = sample_store();
        assert!(s.insert("shared/w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bits() {
        let s = sample_store();
        let dir = std::env::temp_dir().join("mtlab-params-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        s.save(&path).unwrap();
        let loaded = ParameterStore::load(&path).unwrap();
        assert_eq!(s.checksum(), loaded.checksum());
    }

    #[test]
    fn layout_subsets_and_restores() {
        let s = sample_store();
        let layout = s.layout_matching(|p| p.starts_with("shared/"));
        assert_eq!(layout.flat_len(), 6);
        let all: BTreeMap<String, Tensor> =
            s.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let flat = layout.flatten(&all).unwrap();
        assert_eq!(flat, vec![-1.0, -2.0, 1.0, 2.0, 3.0, 4.0]);
        let back = layout.unflatten(&flat).unwrap();
        assert_eq!(back.get("shared/w").unwrap(), s.get("shared/w").unwrap());
    }
}
