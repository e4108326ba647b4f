//! Named parameter storage shared by every network.

use dewm_autograd::{Real, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not optimized (running statistics,
    /// unpooling locations).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// One line of the parameter manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Insertion-ordered map from parameter name to value.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        let name = name.into();
        let previous = self.entries.insert(name.clone(), ParamEntry { value, kind });
        assert!(previous.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::shape(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::shape(format!("no parameter named {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest(&self) -> Vec<ParamInfo> {
        self.entries
            .iter()
            .map(|(name, e)| ParamInfo {
                name: name.clone(),
                shape: e.value.shape().to_vec(),
                kind: e.kind,
            })
            .collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, e)| e.kind == ParamKind::Trainable && n.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Moves every entry under `prefix` into a new store, keeping order.
    pub fn split_prefix(&mut self, prefix: &str) -> ParamStore<T> {
        let names: Vec<String> = self.entries.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        let mut out = ParamStore::new();
        for name in names {
            let entry = self.entries.shift_remove(&name).expect("listed name");
            out.entries.insert(name, entry);
        }
        out
    }

    /// Appends all entries of `other`.
    pub fn absorb(&mut self, other: ParamStore<T>) {
        for (name, entry) in other.entries {
            self.insert(name, entry.value, entry.kind);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Kaiming-normal tensor, `std = sqrt(2 / fan_in)`, sampled in f64.
pub fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn manifest_keeps_insertion_order_and_kinds() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b.weight", Tensor::zeros(&[2, 3]), ParamKind::Trainable);
        store.insert("a.running_mean", Tensor::zeros(&[3]), ParamKind::Buffer);
        let m = store.manifest();
        assert_eq!(m[0].name, "b.weight");
        assert_eq!(m[1].kind, ParamKind::Buffer);
        assert_eq!(store.trainable_count(""), 6);
        assert!(store.get("missing").is_err());
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = kaiming(&[20_000], 50, &mut rng);
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 50.0).abs() < 0.003, "{var}");
    }

    #[test]
    fn split_then_absorb_restores_trailing_block() {
        let mut store = ParamStore::<f32>::new();
        store.insert("enc.w", Tensor::zeros(&[1]), ParamKind::Trainable);
        store.insert("disc.w", Tensor::zeros(&[2]), ParamKind::Trainable);
        let original = store.clone();
        let disc = store.split_prefix("disc.");
        assert_eq!(store.len(), 1);
        assert_eq!(disc.len(), 1);
        store.absorb(disc);
        assert_eq!(store, original);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Tensor::zeros(&[1]), ParamKind::Trainable);
        store.insert("x", Tensor::zeros(&[1]), ParamKind::Trainable);
    }
}
