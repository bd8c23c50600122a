//! Named parameter storage.
//!
//! A [`TensorStore`] maps tensor names to dense f32 tensors. Graph nodes
//! reference parameters by name; pruning zeroes elements in place. The
//! on-disk container format lives in [`crate::model_io::blob`].

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Name -> tensor map with deterministic (sorted) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> TensorStore {
        TensorStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|n| n.as_str())
    }

    /// Set one element to zero. Returns false if the name or index is unknown.
    pub fn zero_element(&mut self, name: &str, index: usize) -> bool {
        match self.tensors.get_mut(name) {
            Some(t) if index < t.len() => {
                t.data_mut()[index] = 0.0;
                true
            }
            _ => false,
        }
    }

    /// FNV-1a 64 over the canonical serialized form (sorted names, shapes,
    /// little-endian payload). Stable across platforms and runs.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a64::new();
        for (name, tensor) in self.iter() {
            h.update(name.as_bytes());
            h.update(&[0]);
            h.update(&(tensor.shape().len() as u8).to_le_bytes());
            for &d in tensor.shape() {
                h.update(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Incremental FNV-1a 64-bit hash.
pub struct Fnv1a64 {
    state: u64,
}

impl Fnv1a64 {
    pub fn new() -> Fnv1a64 {
        Fnv1a64 {
            state: 0xcbf29ce484222325,
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_stable_and_order_independent() {
        let mut a = TensorStore::new();
        a.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        a.insert("b", Tensor::new(vec![1], vec![0.5]).unwrap());

        let mut b = TensorStore::new();
        b.insert("b", Tensor::new(vec![1], vec![0.5]).unwrap());
        b.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());

        assert_eq!(a.checksum(), b.checksum());

        b.get_mut("w").unwrap().data_mut()[0] = 1.5;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn zero_element_bounds() {
        let mut s = TensorStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(s.zero_element("w", 1));
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 0.0]);
        assert!(!s.zero_element("w", 2));
        assert!(!s.zero_element("missing", 0));
    }

    #[test]
    fn fnv_known_vector() {
        // FNV-1a("a") = 0xaf63dc4c8601ec8c
        let mut h = Fnv1a64::new();
        h.update(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
    }
}
