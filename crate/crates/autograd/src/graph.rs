//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table indexed by variable.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::real::Real;

/// Backward rule: receives the upstream gradient and a mask telling which
/// parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

/// Operation tape. Variables borrow the graph, so the graph outlives them.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_leaf(value, true)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push_leaf(&self, value: ArrayD<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(
        &self,
        value: ArrayD<F>,
        parents: &[usize],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `output`. Gradients are kept for leaves only.
    pub fn backward(&self, output: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        let out_value = &nodes[output.id].value;
        assert_eq!(
            out_value.len(),
            1,
            "backward requires a scalar output, got shape {:?}",
            out_value.shape()
        );
        grads[output.id] = Some(ArrayD::from_elem(out_value.raw_dim(), F::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[p].value.shape(),
                    "gradient shape mismatch for node {p}"
                );
                match grads[p].as_mut() {
                    Some(acc) => *acc += &g,
                    None => grads[p] = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Real> {
    pub(crate) graph: &'g Graph<F>,
    pub(crate) id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g, F: Real> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the tape: gradients stop here.
    pub fn detach(&self) -> Var<'g, F> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the variable's shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> ArrayD<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }
}
