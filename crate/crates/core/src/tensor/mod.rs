//! Dense row-major tensors with eager, taped reverse-mode differentiation.
//!
//! Every operation records its parents and a backward rule on the output
//! node when any input requires a gradient. Calling [`Tensor::backward`] on
//! a scalar walks the recorded graph in reverse topological order and
//! accumulates gradients into the leaf tensors created with
//! [`Tensor::param`]. Intermediate gradients live only for the duration of
//! the backward pass; the graph itself is released when the last handle to
//! the output is dropped.
//!
//! The element type is generic over [`Elem`] so that the same model code can
//! run in `f32` for training and in `f64` as a reference for gradient
//! checking.

pub mod io;
pub(crate) mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

pub use ops::{elementwise, ElementwiseKind, BCE_EPS};

/// Floating element type a [`Tensor`] can hold.
pub trait Elem: Float + Default + fmt::Debug + fmt::Display + Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a, E: Elem> {
    /// Gradient of the loss with respect to the op output.
    pub grad_out: &'a [E],
    /// Forward output values.
    pub out: &'a [E],
    pub parents: &'a [Tensor<E>],
}

/// Maps the output gradient to one optional gradient per parent.
pub type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Vec<E>>>>;

struct Node<E: Elem> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    op: &'static str,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// the same storage and gradient buffer.
pub struct Tensor<E: Elem = f32>(Rc<Node<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<E> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<E: Elem>(data: &[E], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<E: Elem> Tensor<E> {
    fn leaf(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        check_finite(&data, "leaf construction")?;
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        })))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        Self::leaf(shape.into(), data, false)
    }

    /// Trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        Self::leaf(shape.into(), data, true)
    }

    pub fn from_f32(shape: impl Into<Vec<usize>>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::from_f32(v)).collect())
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![E::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![E::from_f64(value); n])
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::<usize>::new(), vec![E::from_f64(value)])
            .expect("finite scalar")
    }

    /// Builds an op output node. Drops the graph edge when no parent needs a
    /// gradient, so evaluation-only forwards never retain a tape.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        op: &'static str,
        backward: BackwardFn<E>,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(&data, op)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
            op,
        })))
    }

    /// Unary op with a caller-supplied value and derivative. Used to plug
    /// ad-hoc functions into the graph (and by tests to inject faulty rules).
    pub fn map_custom<F, D>(&self, op: &'static str, f: F, df: D) -> Result<Self>
    where
        F: Fn(E) -> E,
        D: Fn(E) -> E + 'static,
    {
        let out: Vec<E> = self.data().iter().map(|&x| f(x)).collect();
        Self::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            op,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| g * df(x))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.0.data.borrow()
    }

    /// Mutable access to the storage. Intended for optimizers and
    /// finite-difference probes on leaf tensors.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.borrow().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.0.data.borrow().iter().map(|v| v.as_f32()).collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Element at a 2-D index.
    pub fn at2(&self, row: usize, col: usize) -> E {
        assert_eq!(self.rank(), 2);
        self.0.data.borrow()[row * self.0.shape[1] + col]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<E>>> {
        self.0.grad.borrow()
    }

    pub fn grad_mut(&self) -> RefMut<'_, Option<Vec<E>>> {
        self.0.grad.borrow_mut()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values as a constant, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: RefCell::new(self.to_vec()),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            op: "detach",
        }))
    }

    /// Converts the values to another element type as a fresh leaf.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let data = self.0.data.borrow().iter().map(|v| F::from_f64(v.as_f64())).collect();
        Tensor::<F>::leaf(self.0.shape.clone(), data, self.requires_grad())
            .expect("cast preserves shape")
    }

    /// True when both handles point at the same node.
    pub fn same_node(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<E> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode differentiation from a single-element loss. Gradients
    /// accumulate into every reachable parameter leaf; repeated calls add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node<E>, Vec<E>> = HashMap::new();
        pending.insert(self.key(), vec![E::one()]);

        for node in order.iter().rev() {
            let Some(grad_out) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, &g)| *a = *a + g),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(rule) => {
                    let out = node.0.data.borrow();
                    let grads = rule(&BackwardCtx {
                        grad_out: &grad_out,
                        out: &out,
                        parents: &node.0.parents,
                    });
                    debug_assert_eq!(grads.len(), node.0.parents.len(), "op {}", node.0.op);
                    for (parent, grad) in node.0.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), parent.numel(), "op {}", node.0.op);
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &g)| *a = *a + g),
                            None => {
                                pending.insert(parent.key(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-requiring nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<E>> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Global L2 norm of the gradients held by `params` (missing grads count as 0).
pub fn grad_norm<E: Elem>(params: &[Tensor<E>]) -> f64 {
    params
        .iter()
        .filter_map(|p| {
            p.grad_ref()
                .as_ref()
                .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new([2], vec![1.0, f32::NAN]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::<f32>::param([3, 2], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        x.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param([2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        assert_eq!(once, vec![2.0, 4.0]);
        assert_eq!(twice, vec![4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::param([2], vec![1.0, 2.0]).unwrap();
        let err = x.scale(2.0).unwrap().backward().unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        // y = x * x + x, dy/dx = 2x + 1
        let x = Tensor::<f64>::param([1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn constants_do_not_record_graph() {
        let a = Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }
}
