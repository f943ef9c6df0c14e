use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the upstream gradient and which parents need a
/// gradient, return one optional gradient buffer per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's parents have
/// smaller indices. A tape is single-owner; build one per forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
    strict: Cell<bool>,
    near_zero_divisions: RefCell<Vec<(usize, Vec<usize>)>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            strict: Cell::new(false),
            near_zero_divisions: RefCell::new(Vec::new()),
        }
    }

    /// In strict mode, division by a value with magnitude below 1e-12 is a
    /// domain error instead of a logged event.
    pub fn set_strict(&self, strict: bool) {
        self.strict.set(strict);
    }

    pub fn is_strict(&self) -> bool {
        self.strict.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation names in record order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Division events: (node index, flat positions with |divisor| < 1e-12).
    pub fn near_zero_divisions(&self) -> Vec<(usize, Vec<usize>)> {
        self.near_zero_divisions.borrow().clone()
    }

    pub(crate) fn log_near_zero_division(&self, positions: Vec<usize>) {
        let id = self.len();
        self.near_zero_divisions.borrow_mut().push((id, positions));
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            op: "leaf",
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if cfg!(debug_assertions) && value.has_nan() {
            let nodes = self.nodes.borrow();
            let inputs_clean = ids.iter().all(|&i| !nodes[i].value.has_nan());
            debug_assert!(!inputs_clean, "{op} produced NaN from NaN-free inputs");
        }
        self.push(Node {
            value: Arc::new(value),
            parents: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            op,
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(var.shape(), g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root];
        if root_node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => accumulate(&mut leaf_grads[id], g),
                Some(rule) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = rule(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        if let (Some(pg), true) = (pg, need) {
                            debug_assert_eq!(pg.len(), nodes[p].value.len(), "{} grad", node.op);
                            accumulate(&mut grads[p], pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Propagate d(self)/d(leaf) into every requires-grad leaf. Repeated
    /// calls accumulate.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }
}
