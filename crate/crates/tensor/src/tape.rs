//! Differentiation tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a backward rule. Nodes are stored in creation
//! order, which is a topological order of the recorded graph, so backward is
//! a single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Inputs available to a backward rule.
pub(crate) struct BackwardCx<'a, E> {
    pub inputs: Vec<&'a Tensor<E>>,
    pub output: &'a Tensor<E>,
    pub grad: &'a Tensor<E>,
    pub needs: Vec<bool>,
}

pub(crate) trait Backward<E: Element>: Send + Sync {
    /// One entry per input; `None` where no gradient is needed.
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>>;
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<E>>>,
}

pub struct Tape<E: Element> {
    id: u32,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    consumed: bool,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward rules are kept.
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Drops every node and gradient, making the tape reusable.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(Node { value, requires_grad: requires_grad && self.grad_enabled, inputs: Vec::new(), op: None })
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Gradient of the last backward pass; `None` for variables that did not
    /// require one or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }

    pub(crate) fn check(&self, vars: &[Var]) -> Result<()> {
        if vars.iter().all(|v| v.tape == self.id) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub(crate) fn record(&mut self, value: Tensor<E>, inputs: &[Var], op: impl Backward<E> + 'static) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        let (inputs, op): (Vec<Var>, Option<Box<dyn Backward<E>>>) =
            if requires_grad { (inputs.to_vec(), Some(Box::new(op))) } else { (Vec::new(), None) };
        self.push(Node { value, requires_grad, inputs, op })
    }

    fn push(&mut self, node: Node<E>) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(node);
        Var { tape: self.id, idx }
    }

    /// Reverse sweep from a scalar loss. Gradients of every `requires_grad`
    /// leaf are retained; intermediate gradients are released as the sweep
    /// passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(&[loss])?;
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = self.nodes[loss.index()].value.shape().to_vec();
        if self.nodes[loss.index()].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.index()].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.index()] = Some(Tensor::ones(loss_shape));

        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let cx = BackwardCx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.index()].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.index()].requires_grad).collect(),
            };
            let input_grads = op.backward(&cx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.index()].requires_grad {
                    continue;
                }
                accumulate(&mut grads[v.index()], g, self.nodes[v.index()].value.shape())?;
            }
        }
        // Keep only leaf gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>, shape: &[usize]) -> Result<()> {
    if g.shape() != shape {
        return Err(TensorError::Shape {
            op: "backward",
            detail: format!("gradient shape {:?} for value of shape {:?}", g.shape(), shape),
        });
    }
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}
