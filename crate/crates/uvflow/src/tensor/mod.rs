//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! Every op builds a node that knows how to push a gradient back to its
//! parents. Calling [`Tensor::backward`] on a scalar walks the graph once in
//! reverse topological order and returns gradients keyed by leaf id. Graphs
//! are per-thread and short-lived: one forward pass, one backward pass, drop.

use ndarray::{ArrayD, IxDyn};
use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

mod ops;
pub use ops::gather_table_conv2d;

/// Element type the engine runs on. f32 for training speed, f64 for
/// finite-difference oracles where 1e-3 relative tolerances need headroom.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
    fn unit_uniform<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }
    fn unit_uniform<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
    fn unit_uniform<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording switched off; intermediates inside are
/// freed as soon as they go out of scope.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackFn<S> = Box<dyn Fn(&ArrayD<S>) -> Vec<ArrayD<S>>>;

enum Node<S: Scalar> {
    /// Differentiation endpoint; gradients are reported under `key`.
    Leaf { key: u64 },
    /// Interior op: `back` maps the output gradient to one gradient per parent.
    Op { parents: Vec<Tensor<S>>, back: BackFn<S> },
}

struct Inner<S: Scalar> {
    data: Arc<ArrayD<S>>,
    node: Option<Node<S>>,
}

#[derive(Clone)]
pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.tracked())
            .finish()
    }
}

/// Gradients of a scalar with respect to every reachable leaf, keyed by leaf id.
pub struct Gradients<S: Scalar> {
    map: HashMap<u64, ArrayD<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, key: u64) -> Option<&ArrayD<S>> {
        self.map.get(&key)
    }
    pub fn take(&mut self, key: u64) -> Option<ArrayD<S>> {
        self.map.remove(&key)
    }
}

impl<S: Scalar> Tensor<S> {
    /// Non-differentiable input: no gradient flows into it.
    pub fn constant(data: ArrayD<S>) -> Self {
        Tensor(Rc::new(Inner { data: Arc::new(data), node: None }))
    }

    pub fn constant_shared(data: Arc<ArrayD<S>>) -> Self {
        Tensor(Rc::new(Inner { data, node: None }))
    }

    /// Differentiation endpoint. Gradients accumulate under `key`; keys must be
    /// unique per distinct quantity within one backward pass.
    pub fn leaf(data: Arc<ArrayD<S>>, key: u64) -> Self {
        let node = if grad_enabled() { Some(Node::Leaf { key }) } else { None };
        Tensor(Rc::new(Inner { data, node }))
    }

    pub fn scalar(v: S) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn data(&self) -> &ArrayD<S> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn value(&self) -> S {
        debug_assert_eq!(self.0.data.len(), 1);
        *self.0.data.iter().next().unwrap()
    }

    pub fn tracked(&self) -> bool {
        self.0.node.is_some()
    }

    pub(crate) fn from_op(data: ArrayD<S>, parents: Vec<Tensor<S>>, back: BackFn<S>) -> Self {
        Self::from_op_arc(Arc::new(data), parents, back)
    }

    /// Like `from_op` but lets the op keep a handle on its own output, for
    /// backward rules written in terms of the output (tanh, softmax).
    pub(crate) fn from_op_arc(data: Arc<ArrayD<S>>, parents: Vec<Tensor<S>>, back: BackFn<S>) -> Self {
        let tracked = grad_enabled() && parents.iter().any(|p| p.0.node.is_some());
        let node = if tracked { Some(Node::Op { parents, back }) } else { None };
        Tensor(Rc::new(Inner { data, node }))
    }

    pub(crate) fn data_arc(&self) -> Arc<ArrayD<S>> {
        Arc::clone(&self.0.data)
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse pass from a scalar output. Returns gradients per leaf key.
    pub fn backward(&self) -> Gradients<S> {
        assert_eq!(self.0.data.len(), 1, "backward needs a scalar output");
        // Iterative post-order DFS; a node is emitted after all of its parents.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains_key(&t.ptr()) {
                    continue;
                }
                visited.insert(t.ptr(), ());
            }
            let parents: &[Tensor<S>] = match &t.0.node {
                Some(Node::Op { parents, .. }) => parents,
                _ => &[],
            };
            if child_idx < parents.len() {
                let next = parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if !visited.contains_key(&next.ptr()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<usize, ArrayD<S>> = HashMap::new();
        grads.insert(self.ptr(), ArrayD::from_elem(IxDyn(&[1]), S::one()));
        let mut leaf_grads: HashMap<u64, ArrayD<S>> = HashMap::new();

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr()) else { continue };
            match &t.0.node {
                None => {}
                Some(Node::Leaf { key }) => match leaf_grads.entry(*key) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &g;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                },
                Some(Node::Op { parents, back }) => {
                    let pgrads = back(&g);
                    debug_assert_eq!(pgrads.len(), parents.len());
                    for (p, pg) in parents.iter().zip(pgrads) {
                        if p.0.node.is_none() {
                            continue;
                        }
                        match grads.entry(p.ptr()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                *e.get_mut() += &pg;
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaf_grads }
    }
}
