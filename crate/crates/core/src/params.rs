//! Named parameter storage shared by the backbone and attender modules.
//!
//! Parameters live outside any graph; each forward pass binds the ones it
//! touches as graph leaves through a [`Binder`]. Iteration order is insertion
//! order everywhere (checkpoint layout and optimizer state depend on it).

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VifError};
use crate::tensor::{Graph, TensorId};

const MODULE: &str = "params";

pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    trainable: Vec<bool>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(VifError::contract(MODULE, format!("duplicate parameter {name}")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(VifError::shape(
                MODULE,
                format!("{name}: data length {} vs shape {:?}", data.len(), shape),
            ));
        }
        let idx = self.names.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.data.push(data);
        self.trainable.push(true);
        Ok(idx)
    }

    /// Gaussian-initialized parameter.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> =
            (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect();
        self.add(name, data, shape)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<usize> {
        let n: usize = shape.iter().product();
        self.add(name, vec![0.0; n], shape)
    }

    pub fn add_full(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<usize> {
        let n: usize = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| VifError::contract(MODULE, format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn shape_of(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn values(&self, idx: usize) -> &[f64] {
        &self.data[idx]
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.data[idx]
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.trainable[idx]
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &[usize], &[f64])> {
        (0..self.names.len()).map(move |i| {
            (i, self.names[i].as_str(), self.shapes[i].as_slice(), self.data[i].as_slice())
        })
    }
}

/// Per-pass cache binding store parameters to graph leaves.
pub struct Binder<'s> {
    store: &'s ParamStore,
    with_grad: bool,
    bound: Vec<Option<TensorId>>,
}

impl<'s> Binder<'s> {
    /// `with_grad = false` binds everything as constants (inference/analysis).
    pub fn new(store: &'s ParamStore, with_grad: bool) -> Self {
        Binder { store, with_grad, bound: vec![None; store.len()] }
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Result<TensorId> {
        let idx = self.store.idx(name)?;
        if let Some(id) = self.bound[idx] {
            return Ok(id);
        }
        let id = if self.with_grad && self.store.is_trainable(idx) {
            g.param(self.store.values(idx), self.store.shape_of(idx))?
        } else {
            g.constant(self.store.values(idx), self.store.shape_of(idx))?
        };
        self.bound[idx] = Some(id);
        Ok(id)
    }

    /// (store index, leaf id) for every parameter bound so far.
    pub fn bound_params(&self) -> Vec<(usize, TensorId)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|id| (i, id)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", vec![1.0], vec![1]).unwrap();
        assert!(s.add("w", vec![2.0], vec![1]).is_err());
    }

    #[test]
    fn binder_caches_and_respects_trainability() {
        let mut s = ParamStore::new();
        s.add("backbone.w", vec![1.0, 2.0], vec![2]).unwrap();
        s.add("attender.w", vec![3.0], vec![1]).unwrap();
        s.set_trainable_prefix("backbone.", false);

        let mut g = Graph::new();
        let mut b = Binder::new(&s, true);
        let id1 = b.bind(&mut g, "backbone.w").unwrap();
        let id2 = b.bind(&mut g, "backbone.w").unwrap();
        assert_eq!(id1, id2);
        assert!(!g.tensor(id1).requires_grad);
        let id3 = b.bind(&mut g, "attender.w").unwrap();
        assert!(g.tensor(id3).requires_grad);
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = ParamStore::new();
            s.add_normal("w", vec![16], 0.02, &mut rng).unwrap();
            s.values(0).to_vec()
        };
        assert_eq!(mk(), mk());
    }
}
