use std::collections::BTreeMap;

use super::element::Element;
use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<G: Element>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph<F>) -> Result<Bound<'g, F>> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), g.leaf(t)?)))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'g>(&self, g: &'g Graph<F>) -> Result<Bound<'g, F>> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), g.constant(t)?)))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

/// Parameters of a store placed on a graph.
pub struct Bound<'g, F: Element> {
    vars: BTreeMap<String, Var<'g, F>>,
}

impl<'g, F: Element> Bound<'g, F> {
    /// Binds graph nodes under explicit names, e.g. to differentiate through
    /// parameters supplied by [`grad_check`](super::grad_check).
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'g, F>]) -> Self {
        Bound {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("parameter {name} is not registered")))
    }

    /// Accumulates leaf gradients into the store's `grad` buffers.
    pub fn accumulate_grads(&self, grads: &mut Gradients<F>, store: &mut ParameterStore<F>) {
        for (name, var) in &self.vars {
            let Some(g) = grads.take(*var) else { continue };
            let Some(t) = store.get_mut(name) else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => t.grad = Some(g),
            }
        }
    }
}
