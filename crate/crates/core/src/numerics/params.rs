use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
///
/// Insertion order is the canonical order used by the optimizer, the
/// checkpoint writer and gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy of every entry whose name starts with `from`, renamed to start
    /// with `to` instead.
    pub fn copy_prefixed(&self, from: &str, to: &str) -> Result<ParamStore<F>> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(from) {
                out.insert(format!("{to}{rest}"), t.clone())?;
            }
        }
        Ok(out)
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore<F>) -> Result<f64> {
        if self.names != other.names {
            return Err(Error::contract("parameter stores differ in layout"));
        }
        let mut acc = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "param_distance",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            acc += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>();
        }
        Ok(acc.sqrt())
    }
}
