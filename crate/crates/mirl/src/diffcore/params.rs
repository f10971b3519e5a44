//! Named parameters and their binding onto tapes.
//!
//! Names are dot paths that encode the owning block (`encoder.block3.attn.wq`)
//! so depth-based tooling can select by prefix. A store owns the values and
//! accumulated gradients between steps; binding creates tape leaves in
//! insertion order, which keeps every downstream iteration deterministic.

use std::collections::HashMap;

use super::{numel, Shape, Tape, Tensor};
use crate::{MirlError, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: impl Into<Shape>, value: Vec<f64>) -> Result<()> {
        let shape = shape.into();
        if numel(&shape) != value.len() {
            return Err(MirlError::shape(
                "param",
                format!("{name}: shape {:?} vs {} values", shape, value.len()),
            ));
        }
        if self.index.contains_key(name) {
            return Err(MirlError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter {
            name: name.to_string(),
            shape,
            value,
            grad,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| MirlError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(MirlError::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter> {
        self.params.iter().filter(move |p| p.name.starts_with(prefix))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Bind every parameter as a gradient-requiring leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        self.bind_filtered(tape, |_| true)
    }

    /// Bind with per-parameter trainability: parameters failing the predicate
    /// become constants (frozen) on the tape.
    pub fn bind_filtered(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let mut map = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = if trainable(&p.name) {
                tape.variable(p.shape.clone(), p.value.clone())
            } else {
                tape.constant(p.shape.clone(), p.value.clone())
            }
            .expect("parameter leaf");
            map.insert(p.name.clone(), t);
            order.push(p.name.clone());
        }
        BoundParams { map, order }
    }

    /// Add each bound leaf's accumulated gradient into the store.
    pub fn absorb_grads(&mut self, bound: &BoundParams) {
        for p in &mut self.params {
            if let Some(t) = bound.map.get(&p.name) {
                if let Some(g) = t.grad_ref() {
                    for (a, b) in p.grad.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
        }
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place (used for gradient clipping).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Tape leaves for one forward pass, addressable by parameter name.
pub struct BoundParams {
    map: HashMap<String, Tensor>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| MirlError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        store.insert("b.w", vec![2], vec![1.0, 2.0]).unwrap();
        store.insert("a.w", vec![1], vec![3.0]).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["b.w", "a.w"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1], vec![0.0]).unwrap();
        assert!(store.insert("w", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn absorb_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", vec![2], vec![1.0, -1.0]).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let loss = bound.get("w").unwrap().square().unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            store.absorb_grads(&bound);
        }
        assert_eq!(store.get("w").unwrap().grad, vec![4.0, -4.0]);
        store.zero_grads();
        assert_eq!(store.get("w").unwrap().grad, vec![0.0, 0.0]);
    }
}
