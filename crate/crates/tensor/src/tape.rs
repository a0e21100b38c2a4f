//! Wengert-list tape for reverse-mode differentiation.
//!
//! Ops append a node holding a backward closure and parent references;
//! node ids increase in creation order, so a reverse sweep over ids is a
//! reverse topological traversal. Values live in [`Var`]s, not on the tape,
//! which lets a non-recording tape run inference without retaining
//! intermediates.

use std::cell::RefCell;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Gradient contributions for each parent, `None` where the parent is not
/// differentiable (`needs[i] == false`) or the contribution is zero.
pub(crate) type Grads<E> = Vec<Option<Tensor<E>>>;

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Result<Grads<E>>>;

struct Node<E: Element> {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<E>>,
    /// Parameter slot for leaves created through [`Tape::param`].
    tag: Option<usize>,
    shape: Vec<usize>,
}

pub struct Tape<E: Element> {
    recording: bool,
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A tape that records nothing; every var it produces is a constant.
    pub fn no_grad() -> Self {
        Tape { recording: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Vars created before the call must not be
    /// used afterwards; borrowing rules make that a compile error.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        Var { tape: self, value, node: None }
    }

    /// Differentiable leaf; its gradient is retrievable with [`Gradients::wrt`].
    pub fn watch(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, None)
    }

    /// Leaf bound to parameter slot `tag`; uses of the same slot accumulate.
    pub fn param(&self, tag: usize, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, Some(tag))
    }

    fn leaf(&self, value: Tensor<E>, tag: Option<usize>) -> Var<'_, E> {
        if !self.recording {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents: vec![], backward: None, tag, shape: value.shape().to_vec() });
        Var { tape: self, value, node: Some(id) }
    }

    /// Appends an op node. Parents without a node contribute `needs=false`.
    pub(crate) fn record<F>(&self, value: Tensor<E>, parents: &[&Var<'_, E>], backward: F) -> Var<'_, E>
    where
        F: Fn(&Tensor<E>, &[bool]) -> Result<Grads<E>> + 'static,
    {
        let ids: Vec<Option<NodeId>> = parents.iter().map(|p| p.node).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: ids,
            backward: Some(Box::new(backward)),
            tag: None,
            shape: value.shape().to_vec(),
        });
        Var { tape: self, value, node: Some(id) }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_, E>) -> Result<Gradients<E>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::contract("backward", "loss belongs to another tape"));
        }
        if loss.value.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut out = Gradients { leaves: vec![None; nodes.len()], params: Vec::new() };
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            debug_assert_eq!(g.shape(), node.shape.as_slice());
            let Some(backward) = &node.backward else {
                if let Some(tag) = node.tag {
                    if out.params.len() <= tag {
                        out.params.resize(tag + 1, None);
                    }
                    accumulate(&mut out.params[tag], g.clone())?;
                }
                out.leaves[id] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let contributions = backward(&g, &needs)?;
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                if let (Some(pid), Some(c)) = (parent, contrib) {
                    if c.shape() != nodes[*pid].shape.as_slice() {
                        return Err(TensorError::shape("backward", c.shape(), &nodes[*pid].shape));
                    }
                    accumulate(&mut grads[*pid], c)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
    Ok(())
}

/// Result of a backward sweep: gradients of watched leaves and parameters.
pub struct Gradients<E: Element> {
    leaves: Vec<Option<Tensor<E>>>,
    params: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a leaf var; `None` when unreachable from the loss.
    pub fn wrt(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        var.node.and_then(|id| self.leaves.get(id)).and_then(Option::as_ref)
    }

    /// Summed gradient of every leaf bound to parameter slot `tag`.
    pub fn param(&self, tag: usize) -> Option<&Tensor<E>> {
        self.params.get(tag).and_then(Option::as_ref)
    }
}

/// A tensor value flowing through a tape.
#[derive(Clone)]
pub struct Var<'t, E: Element> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) value: Tensor<E>,
    pub(crate) node: Option<NodeId>,
}

impl<'t, E: Element> Var<'t, E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<E> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> Result<E> {
        self.value.item()
    }

    pub(crate) fn same_tape(&self, op: &'static str, other: &Var<'_, E>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::contract(op, "operands recorded on different tapes"))
        }
    }

    /// Lifts a constant tensor onto this var's tape.
    pub fn lift(&self, value: Tensor<E>) -> Var<'t, E> {
        self.tape.constant(value)
    }
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("value", &self.value).finish()
    }
}
