use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::ops::{self, Op};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Non-smooth points met during a forward pass.
///
/// `min_margin` is the smallest distance of any relu input from zero (or of
/// a max reduction's winner from the runner-up). `fingerprint` hashes the
/// active branch of every kink, so two passes with equal fingerprints took
/// the same piecewise-linear region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinkStats {
    pub min_margin: f64,
    pub fingerprint: u64,
}

impl Default for KinkStats {
    fn default() -> Self {
        KinkStats { min_margin: f64::INFINITY, fingerprint: 0 }
    }
}

/// Ordered record of differentiable operations.
///
/// Node ids are assigned in execution order, so every node's inputs have
/// smaller ids and a reverse sweep over ids is a valid topological order.
/// A tape is single-threaded; run independent programs on separate tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    track_kinks: bool,
    kinks: RefCell<KinkStats>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
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

    /// A tape that records [`KinkStats`] for relu, max and clamp sites.
    pub fn with_kink_tracking() -> Self {
        Tape { track_kinks: true, ..Self::default() }
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kink_stats(&self) -> KinkStats {
        *self.kinks.borrow()
    }

    pub(crate) fn tracks_kinks(&self) -> bool {
        self.track_kinks
    }

    pub(crate) fn note_kinks(&self, margin: f64, branch: impl Hash) {
        let mut k = self.kinks.borrow_mut();
        k.min_margin = k.min_margin.min(margin);
        let mut h = DefaultHasher::new();
        k.fingerprint.hash(&mut h);
        branch.hash(&mut h);
        k.fingerprint = h.finish();
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every tracked leaf reachable from `loss` receives d loss / d leaf.
    /// Contributions from multiple uses of a value add up.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                ops::backprop(&nodes, id, &g, &mut grads);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` if the leaf is untracked or does
    /// not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get(var.id)?.as_ref().map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but unreached leaves read as zeros.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_nodes(|n| n[self.id].value.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_nodes(|n| n[self.id].value.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.tape.with_nodes(|n| n[self.id].value.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_nodes(|n| n[self.id].requires_grad)
    }
}
