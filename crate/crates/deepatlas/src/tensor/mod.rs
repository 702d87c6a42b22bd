//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its adjoint on an implicit gradient tape (the
//! operation graph held through `Rc` parent links). Calling [`Tensor::backward`]
//! on a scalar replays the tape in reverse topological order and deposits
//! gradients on every tracked tensor.
//!
//! All arithmetic is 64-bit floating point. Tensors are immutable after
//! construction; a tape is confined to a single thread.

mod conv;
mod error;
mod ops;

pub use ops::Reduce;

pub use error::TensorError;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Adjoint of one primitive op: given the gradient flowing into the node,
/// return one gradient contribution per parent (None for untracked parents).
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    backward_done: Cell<bool>,
}

/// An immutable n-dimensional array participating in the gradient tape.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

/// C-order strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Leaf tensor from raw data; `track` marks it as a gradient target.
    pub fn from_data(data: Vec<f64>, shape: &[usize], track: bool) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: fresh_id(),
            shape: shape.to_vec(),
            data,
            requires_grad: track,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward_fn: None,
            backward_done: Cell::new(false),
        })))
    }

    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_data(data, shape, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_data(vec![v], &[], false).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_data(vec![0.0; numel_of(shape)], shape, false).unwrap()
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_data(vec![v; numel_of(shape)], shape, false).unwrap()
    }

    /// Interior constructor for primitive ops. Parents whose gradients are
    /// not needed may still be listed; `backward_fn` returns None for them.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: if requires_grad { parents } else { Vec::new() },
            backward_fn: if requires_grad { Some(backward_fn) } else { None },
            backward_done: Cell::new(false),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Same values, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_data(self.0.data.clone(), &self.0.shape, false).unwrap()
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss. Errors on non-scalar tensors and
    /// on a second call over the same root.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.shape().to_vec(),
            });
        }
        if self.0.backward_done.get() {
            return Err(TensorError::DoubleBackward);
        }
        self.0.backward_done.set(true);

        // Postorder DFS, iterative to survive deep graphs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.requires_grad() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(backward_fn) = node.0.backward_fn.as_ref() else {
                continue;
            };
            let grad_out = node
                .0
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![0.0; node.numel()]);
            let contribs = backward_fn(&grad_out);
            debug_assert_eq!(contribs.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                if let Some(g) = contrib {
                    if parent.requires_grad() {
                        debug_assert_eq!(g.len(), parent.numel());
                        parent.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}
