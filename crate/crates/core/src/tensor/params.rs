//! Named parameter storage, independent of any autodiff graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                detail: format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            });
        }
        Ok(ParamTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Parameters keyed by name; iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, ParamTensor>,
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: ParamTensor) {
        self.params.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    /// Fresh trainable leaves for one forward/backward pass.
    pub fn leaves(&self) -> Leaves {
        self.materialize(true)
    }

    /// Constant tensors: no gradient is recorded through them.
    pub fn constants(&self) -> Leaves {
        self.materialize(false)
    }

    fn materialize(&self, trainable: bool) -> Leaves {
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = if trainable {
                    Tensor::param(&p.shape, p.data.clone())
                } else {
                    Tensor::new(&p.shape, p.data.clone())
                };
                (name.clone(), t.expect("shape checked on insert"))
            })
            .collect();
        Leaves { map }
    }
}

/// Tensors materialized from a [`ParamStore`].
pub struct Leaves {
    map: BTreeMap<String, Tensor>,
}

impl Leaves {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Leaves { map }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    /// Gradients after `backward`; parameters the loss did not reach get zeros.
    pub fn grads(&self) -> Grads {
        self.map
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.len()])))
            .collect()
    }
}

/// Adds `src` into `acc` name by name.
pub fn accumulate_grads(acc: &mut Grads, src: &Grads) {
    for (name, g) in src {
        match acc.get_mut(name) {
            Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}
