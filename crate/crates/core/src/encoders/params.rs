use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.map.values_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Check that `other` carries every parameter of `self` with equal shape.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.iter() {
            let found = other.get(name)?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Put every parameter on the graph, as leaves or constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .values()
            .map(|t| if trainable { g.leaf(t) } else { g.constant(t) })
            .collect();
        Bound {
            names: self.map.keys().cloned().collect(),
            vars,
        }
    }
}

/// Graph handles for a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
