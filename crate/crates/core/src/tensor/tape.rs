use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{contract_err, Result};

use super::Tensor;

/// Pushes the gradient of one node onto its parents.
///
/// Arguments are the gradient flowing into the node, the node's own value,
/// every node on the tape (for parent values) and the accumulator.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &Tensor, &[Node], &mut GradSink)>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// An append-only record of differentiable operations.
///
/// Nodes are stored in execution order, which is already a topological
/// order, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input node. Gradients are only collected for leaves that
    /// request them.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node { value, requires_grad, backward: None })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn op<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &Tensor, &[Node], &mut GradSink) + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "mixing vars from different tapes");
                nodes[p.id].requires_grad
            })
        };
        let backward: Option<BackwardFn> = requires_grad.then(|| Box::new(backward) as BackwardFn);
        self.push(Node { value, requires_grad, backward })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            needs: nodes.iter().map(|n| n.requires_grad).collect(),
            sizes: nodes.iter().map(|n| n.value.numel()).collect(),
        };
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads: sink.grads });
        }
        sink.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(grad) = sink.grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                backward(&grad, &node.value, &nodes, &mut sink);
            }
            sink.grads[id] = Some(grad);
        }
        Ok(Gradients { grads: sink.grads })
    }
}

/// Gradient accumulator used during the reverse sweep.
pub(crate) struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    sizes: Vec<usize>,
}

impl GradSink {
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Mutable gradient buffer of node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: usize) -> &mut [f64] {
        let size = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; size])
    }

    pub fn add(&mut self, id: usize, g: &[f64]) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: usize, g: Vec<f64>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`; zeros when nothing reached it.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
