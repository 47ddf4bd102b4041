//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built graph.
//! Operations on tensors that require gradients record a backward closure
//! together with their parents; [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates gradients into the leaves.
//!
//! Layout is batch, channel, height, width, row-major.

mod adam;
mod conv;
mod float;
mod norm;
mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::{conv2d, conv_transpose2d, conv_output_len, conv_transpose_output_len};
pub use float::Float;
pub(crate) use float::c;
pub use norm::{batch_norm, BatchNormMode, RunningStats};
pub use ops::{bce_with_logits, concat_channels, l1_loss, trace_kinks, Activation};

use crate::error::{Error, Result};

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// An n-dimensional array that can take part in gradient computation.
///
/// Cloning is cheap and yields a handle to the same node.
pub struct Tensor<T: Float = f32> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

/// Plain tensor payload without graph linkage. Safe to send across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// A trainable leaf: gradients are accumulated into it by `backward`.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.into_parameter())
    }

    /// Re-wrap this tensor's values as a fresh leaf that requires grad.
    pub fn into_parameter(self) -> Self {
        let data = self.node.data.borrow().clone();
        Self::leaf(self.node.shape.clone(), data, true)
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    /// Build the result of an operation. The backward closure receives the
    /// output gradient and returns one optional gradient per parent.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values. Only meaningful for leaves; the
    /// optimizer uses it to apply updates in place.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn to_data(&self) -> TensorData<T> {
        TensorData {
            shape: self.node.shape.clone(),
            data: self.to_vec(),
        }
    }

    pub fn from_data(d: TensorData<T>) -> Result<Self> {
        Self::from_vec(&d.shape, d.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy the values into a new leaf with no graph linkage.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn id(&self) -> *const Node<T> {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode differentiation from a scalar. Gradients accumulate
    /// additively into every reachable leaf that requires grad.
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
        if self.is_leaf() {
            accumulate(&self.node.grad, &[T::one()]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(grad_out) = pending.remove(&t.id()) else {
                continue;
            };
            let grad_fn = t.node.grad_fn.as_ref().expect("interior node has grad_fn");
            let grads = (grad_fn.backward)(&grad_out);
            debug_assert_eq!(grads.len(), grad_fn.parents.len());
            for (parent, g) in grad_fn.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel());
                if parent.is_leaf() {
                    accumulate(&parent.node.grad, &g);
                } else {
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(parent.id(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Interior nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if t.is_leaf() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !p.is_leaf() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Float>(slot: &RefCell<Option<Vec<T>>>, g: &[T]) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn multiple_uses_accumulate() {
        // loss = sum(x) used k times == k * single-use gradient
        let x = Tensor::<f64>::parameter(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let single = x.tanh().sum();
        single.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();

        let k = 4;
        let t = x.tanh();
        let mut total = t.sum();
        for _ in 1..k {
            total = total.add(&t.sum()).unwrap();
        }
        total.backward().unwrap();
        let gk = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&gk) {
            assert!((a * k as f64 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(3.0).detach();
        assert!(!y.requires_grad());
        let loss = y.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_on_construction() {
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
    }
}
