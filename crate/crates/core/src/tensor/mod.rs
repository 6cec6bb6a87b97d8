//! Dense f64 tensors with a dynamic reverse-mode gradient tape.
//!
//! Every operation on a tensor that requires a gradient records a backward
//! closure together with handles to its inputs. Tensors receive a
//! monotonically increasing id from a thread-local counter, so creation order
//! is already a topological order of the recorded graph: [`Tape::record`]
//! walks the graph reachable from a loss and sorts it by id.
//!
//! Tensors are reference counted and not `Send`; a graph lives on the thread
//! that built it. Independent graphs on different threads do not interact.

mod conv;
pub mod gradcheck;
mod linalg;
pub mod nn;
mod ops;
mod shape;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use conv::Conv2dOptions;
pub use ops::LRELU_SLOPE;
pub(crate) use ops::sigmoid_scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Backward rule of a recorded operation.
///
/// Receives the forward output, the gradient flowing into it, and which
/// parents need a gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct BackwardCtx<'a> {
    pub out: &'a [f64],
    pub grad: &'a [f64],
    pub needs: &'a [bool],
}

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        if let Some(op) = &self.0.op {
            d.field("op", &op.name);
        }
        d.field("requires_grad", &self.0.requires_grad).finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.with_requires_grad())
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(Vec::new(), vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![v; numel(shape)], false)
    }

    /// A fresh leaf sharing this tensor's values, with gradient tracking on.
    pub fn with_requires_grad(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// A fresh constant leaf with the same values; cuts the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// some parent participates in differentiation.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = requires_grad.then(|| Op {
            name,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Propagates d(self)/d(leaf) into every reachable leaf that requires a
    /// gradient. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let tape = Tape::record(self);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in tape.nodes.iter() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad),
                    }
                }
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(|p| p.requires_grad()).collect();
                    let ctx = BackwardCtx {
                        out: &node.0.data,
                        grad: &grad,
                        needs: &needs,
                    };
                    let grads = (op.backward)(&ctx);
                    debug_assert_eq!(grads.len(), op.parents.len(), "{}", op.name);
                    for (parent, g) in op.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "{}", op.name);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded operations reachable from a root, in reverse creation order.
pub struct Tape {
    nodes: Vec<Tensor>,
}

/// One recorded node as seen by [`Tape::entries`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub id: u64,
    pub op: Option<&'static str>,
    pub inputs: Vec<u64>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                stack.extend(op.parents.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entries in forward (topological) order.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .rev()
            .map(|t| TapeEntry {
                id: t.id(),
                op: t.0.op.as_ref().map(|o| o.name),
                inputs: t
                    .0
                    .op
                    .as_ref()
                    .map(|o| o.parents.iter().filter(|p| p.requires_grad()).map(|p| p.id()).collect())
                    .unwrap_or_default(),
            })
            .collect()
    }
}
