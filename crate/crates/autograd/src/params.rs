//! Named parameter storage and binding onto a [`Graph`].

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names: parameter layout is
    /// fixed at construction and a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<F>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    /// Element-type conversion, preserving names and order.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.to_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replace the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<(), String> {
        let id = self
            .id_of(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            vars: self.values.iter().map(|v| graph.leaf(v.clone())).collect(),
        }
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| graph.constant(v.clone()))
                .collect(),
        }
    }

    /// Bit-level equality of names, shapes and values.
    pub fn identical(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| Real::to_f64(*x).to_bits() == Real::to_f64(*y).to_bits()))
    }
}

/// Parameters of one store, bound onto a graph.
pub struct Bound<'g, F: Real> {
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Real> Bound<'g, F> {
    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id.0]
    }

    /// Substitute a different variable for one parameter (used to inject
    /// externally computed weights).
    pub fn replace(&mut self, id: ParamId, var: Var<'g, F>) {
        self.vars[id.0] = var;
    }

    /// Gradients in store order; parameters that received none get zeros.
    pub fn gradients(&self, grads: &Gradients<F>) -> Vec<ArrayD<F>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// `N(0, std^2)` samples.
pub fn normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z * std)
    })
}

pub fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full<F: Real>(shape: &[usize], value: f64) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::from_f64(value))
}
