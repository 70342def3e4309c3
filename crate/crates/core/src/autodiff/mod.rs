//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every op records its parents and a backward closure when at least one
//! parent requires a gradient. [`backward`] walks the recorded graph once in
//! reverse topological order and accumulates gradients into the leaves that
//! asked for them. Intermediate gradients live only for the duration of the
//! call.
//!
//! ```
//! use duvlg::autodiff::{ops, Tensor};
//!
//! let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
//! let y = ops::sum(&ops::mul(&x, &x).unwrap());
//! duvlg::autodiff::backward(&y).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```

mod attention;
pub mod gradcheck;
pub mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock, RwLockReadGuard};

pub use attention::{attention, AttnSegment};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A node in the differentiation graph.
///
/// Cloning is cheap and yields a handle to the same storage, so two clones
/// of a parameter observe each other's updates.
pub struct Tensor<T: Scalar = f64>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.0.shape).field("requires_grad", &self.0.requires_grad).finish()
    }
}

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Disables graph recording on the current thread while alive.
pub struct NoGradGuard {
    _priv: (),
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Ops executed while the returned guard lives produce constants.
pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard { _priv: () }
}

fn recording() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err("tensor", format!("zero extent in shape {shape:?}"));
        }
        if data.len() != numel(shape) {
            return dim_err("tensor", format!("{} values for shape {shape:?}", data.len()));
        }
        Ok(Tensor(Arc::new(Node {
            shape: shape.to_vec(),
            data: RwLock::new(data),
            grad: RwLock::new(None),
            requires_grad,
            grad_fn: None,
        })))
    }

    /// A constant that never accumulates gradient.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], &[1]).expect("scalar shape")
    }

    /// Builds an op output. Records `backward` only when a parent needs it.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = recording() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { parents, backward: Box::new(backward) });
        Tensor(Arc::new(Node { shape, data: RwLock::new(data), grad: RwLock::new(None), requires_grad, grad_fn }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("non-empty shape")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// Overwrites values in place. Graphs already built on this tensor see
    /// the new values on their next backward.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut d = self.0.data.write().expect("tensor data lock");
        if d.len() != values.len() {
            return dim_err("set_data", format!("{} values for {} slots", values.len(), d.len()));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Applies `f` to the value buffer in place.
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.0.data.write().expect("tensor data lock");
        f(&mut d);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.read().expect("tensor grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.write().expect("tensor grad lock") = None;
    }

    /// Replaces the accumulated gradient. Used by gradient clipping.
    pub fn set_grad(&self, grad: Option<Vec<T>>) {
        *self.0.grad.write().expect("tensor grad lock") = grad;
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn accumulate_leaf(&self, g: &[T]) {
        let mut slot = self.0.grad.write().expect("tensor grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Post-order over the recorded graph, parents before children.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.key());
    while let Some((node, idx)) = stack.pop() {
        let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
        if idx < parents.len() {
            let p = parents[idx].clone();
            stack.push((node, idx + 1));
            if p.requires_grad() && visited.insert(p.key()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Back-propagates from a scalar loss into every leaf that requires a
/// gradient. Leaf gradients accumulate across calls; see [`Tensor::zero_grad`].
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss);
    let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
    pending.insert(loss.key(), vec![T::one()]);
    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.key()) else {
            continue;
        };
        match &node.0.grad_fn {
            None => node.accumulate_leaf(&g),
            Some(gf) => {
                let parent_grads = (gf.backward)(&g);
                debug_assert_eq!(parent_grads.len(), gf.parents.len());
                for (p, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
