//! Named parameter tables.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type TensorMap<T = f32> = IndexMap<String, Tensor<T>>;

/// Named weight tensors of a model plus the subset an editor may change.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: TensorMap<T>,
    editable: Vec<String>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(tensors: TensorMap<T>, editable: Vec<String>) -> Result<Self> {
        for name in &editable {
            if !tensors.contains_key(name) {
                return Err(Error::Names(format!("editable tensor {name} not present")));
            }
        }
        let mut sorted = editable.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != editable.len() {
            return Err(Error::Names("duplicate editable names".into()));
        }
        Ok(Self { tensors, editable })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Names(format!("no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Names(format!("no tensor named {name}")))
    }

    pub fn editable(&self) -> &[String] {
        &self.editable
    }

    pub fn is_editable(&self, name: &str) -> bool {
        self.editable.iter().any(|n| n == name)
    }

    pub fn tensors(&self) -> &TensorMap<T> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_tensors(self) -> TensorMap<T> {
        self.tensors
    }

    /// Differences `other - self` on editable tensors.
    pub fn editable_delta(&self, other: &Self) -> Result<TensorMap<T>> {
        self.editable
            .iter()
            .map(|n| Ok((n.clone(), other.get(n)?.sub(self.get(n)?)?)))
            .collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.editable == other.editable
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        fingerprint_tensors(&self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            editable: self.editable.clone(),
        }
    }
}

pub fn fingerprint_tensors<T: Scalar>(tensors: &TensorMap<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.f64().to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn editable_names_must_exist_and_be_unique() {
        let mut t = TensorMap::<f32>::new();
        t.insert("a".into(), Tensor::zeros(&[2]));
        assert!(ParamSet::new(t.clone(), vec!["b".into()]).is_err());
        assert!(ParamSet::new(t.clone(), vec!["a".into(), "a".into()]).is_err());
        assert!(ParamSet::new(t, vec!["a".into()]).is_ok());
    }
}
