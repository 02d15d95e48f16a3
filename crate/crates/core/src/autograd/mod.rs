//! Define-by-run reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Var`] is an immutable tensor value that remembers how it was produced.
//! Calling [`Var::backward`] on a scalar walks the recorded graph in reverse
//! topological order and returns the gradient of every leaf that asked for one.
//! Graphs are built per forward pass and are single-threaded (`Rc`), while the
//! underlying buffers are `Arc`-shared so parameters can be bound without copies.

mod conv;
mod filter;
mod ops;
mod sample;

pub use conv::ConvOpts;
pub use filter::gaussian_taps;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::real::Real;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type GradFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    grad_fn: Option<GradFn<T>>,
}

/// Tensor value participating in the autograd graph.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> Var<T> {
    /// Constant tensor (no gradient).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Self::leaf(shape, data, false)
    }

    pub fn leaf(shape: impl Into<Vec<usize>>, data: Vec<T>, requires_grad: bool) -> Self {
        Self::from_shared(shape, Arc::new(data), requires_grad)
    }

    pub fn from_shared(shape: impl Into<Vec<usize>>, data: Arc<Vec<T>>, requires_grad: bool) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Var(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value])
    }

    /// Records an operation result. Parents and the gradient closure are only
    /// retained when at least one parent requires a gradient.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: &[&Var<T>], grad_fn: F) -> Self
    where
        F: Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, grad_fn): (Vec<Var<T>>, Option<GradFn<T>>) = if requires_grad {
            (parents.iter().map(|p| (*p).clone()).collect(), Some(Box::new(grad_fn)))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            parents,
            grad_fn,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.0.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.0.shape),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_shared(self.0.shape.clone(), self.shared_data(), false)
    }

    /// Reverse-mode sweep from a scalar.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.numel(), 1, "backward() requires a scalar, got {:?}", self.shape());
        self.backward_with(vec![T::one()])
    }

    /// Reverse-mode sweep seeded with an explicit output cotangent.
    pub fn backward_with(&self, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.numel());
        let mut out = Gradients { map: HashMap::new() };
        if !self.requires_grad() {
            return out;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    accumulate(&mut out.map, node.id(), grad);
                }
                Some(f) => {
                    let parent_grads = f(&grad);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        if let Some(g) = g {
                            if parent.requires_grad() {
                                debug_assert_eq!(g.len(), parent.numel());
                                accumulate(&mut pending, parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate<T: Real>(map: &mut HashMap<usize, Vec<T>>, id: usize, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(id, g);
        }
    }
}

/// Gradients of leaf tensors, keyed by leaf identity.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    map: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&[T]> {
        self.map.get(&v.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Vec<T>> {
        self.map.remove(&v.id())
    }

    /// Gradient of `v`, zeros if it did not influence the root.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); v.numel()])
    }
}
