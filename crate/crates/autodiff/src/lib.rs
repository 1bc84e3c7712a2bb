//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! Graphs are built eagerly: every operation returns a [`Tensor`] that owns its
//! value and remembers how to push gradients to its parents. Calling
//! [`Tensor::backward`] walks the graph once in reverse construction order and
//! accumulates gradients into the [`Var`] leaves that participated.
//!
//! Parameters are [`Var`]s: named, reference-counted storage for a value and
//! its gradient sink. Two layers that clone the same `Var` share storage, so
//! weight sharing and optimizer deduplication work through plain `Rc` identity.
//! A `Var` can also enter a graph as a frozen constant, which detaches it from
//! gradient flow without any mode flags on the layers that use it.
//!
//! Everything is `f64` and single-threaded at the graph level; data parallelism
//! lives inside the matrix kernels (see [`par_matmul`]).

mod adam;
pub mod archive;
mod conv;
mod nn;
mod ops;
pub mod seed;

pub use adam::{Adam, AdamState};
pub use conv::{conv2d, conv_transpose2d, par_matmul, Padding};
pub use nn::{uniform, xavier_normal, Conv2d, ConvTranspose2d, InstanceNorm2d, Linear};
pub use ops::{concat_rows, instance_norm};

use ndarray::prelude::*;
use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<u32> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// True when tensors built on this thread record gradient information.
pub fn grad_enabled() -> bool {
    NO_GRAD.with(|c| c.get() == 0)
}

/// Runs `f` with gradient recording disabled on this thread. Nestable.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(c.get() - 1));
        }
    }
    NO_GRAD.with(|c| c.set(c.get() + 1));
    let _guard = Guard;
    f()
}

/// Maps the gradient of a node's output to gradients for each parent slot.
/// The mask tells the closure which slots actually need a gradient.
type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>>>;

enum Data {
    Owned(ArrayD<f64>),
    Shared(Rc<RefCell<ArrayD<f64>>>),
}

enum Source {
    Constant,
    Leaf {
        sink: Rc<RefCell<ArrayD<f64>>>,
    },
    Node {
        parents: Vec<Tensor>,
        backward: BackwardFn,
    },
}

struct Inner {
    id: u64,
    data: Data,
    source: Source,
    needs_grad: bool,
}

impl Drop for Inner {
    // Default destruction would recurse through the parent chain and overflow
    // the stack on deep graphs; drain it iteratively instead.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = Vec::new();
        if let Source::Node { parents, .. } = &mut self.source {
            stack.append(parents);
        }
        while let Some(t) = stack.pop() {
            let Tensor { inner } = t;
            if let Ok(mut inner) = Rc::try_unwrap(inner) {
                if let Source::Node { parents, .. } = &mut inner.source {
                    stack.append(parents);
                }
            }
        }
    }
}

/// A node in an autodiff graph: a value plus (optionally) the recipe for
/// pushing gradients to its parents. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    /// Wraps an array as a constant: no gradient flows through it.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                data: Data::Owned(value),
                source: Source::Constant,
                needs_grad: false,
            }),
        }
    }

    /// A zero-dimensional constant.
    pub fn scalar_value(v: f64) -> Tensor {
        Tensor::constant(arr0(v).into_dyn())
    }

    /// A constant with the same value, cut off from this tensor's graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    pub fn with<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        match &self.inner.data {
            Data::Owned(a) => f(a),
            Data::Shared(cell) => f(&cell.borrow()),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.with(|a| a.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with(|a| a.shape().to_vec())
    }

    pub fn len(&self) -> usize {
        self.with(|a| a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The single element of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        self.with(|a| {
            assert_eq!(a.len(), 1, "scalar() on a tensor with {} elements", a.len());
            *a.iter().next().unwrap()
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Whether this tensor participates in gradient flow.
    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Accumulates gradients of this tensor's elements (seeded with ones) into
    /// every reachable `Var`. Gradients add up across calls; callers zero them
    /// between steps via the optimizer.
    pub fn backward(&self) {
        if !self.inner.needs_grad {
            return;
        }
        // Reachable needs-grad subgraph, then reverse construction order.
        // Parent ids are always smaller than child ids, so descending id order
        // is a valid reverse topological order.
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !visited.insert(t.inner.id) {
                continue;
            }
            if let Source::Node { parents, .. } = &t.inner.source {
                for p in parents {
                    if p.inner.needs_grad && !visited.contains(&p.inner.id) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        grads.insert(self.inner.id, self.with(|a| ArrayD::ones(a.raw_dim())));
        for t in &nodes {
            let Some(g) = grads.remove(&t.inner.id) else {
                continue;
            };
            match &t.inner.source {
                Source::Constant => {}
                Source::Leaf { sink } => {
                    let mut s = sink.borrow_mut();
                    assert_eq!(s.shape(), g.shape(), "gradient shape mismatch at leaf");
                    *s += &g;
                }
                Source::Node { parents, backward } => {
                    let mask: Vec<bool> = parents.iter().map(|p| p.inner.needs_grad).collect();
                    let parent_grads = backward(&g, &mask);
                    assert_eq!(parent_grads.len(), parents.len());
                    for (p, pg) in parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.inner.needs_grad {
                            continue;
                        }
                        match grads.entry(p.inner.id) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                *e.get_mut() += &pg;
                            }
                            std::collections::hash_map::Entry::Vacant(v) => {
                                v.insert(pg);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Builds an interior graph node. Degrades to a constant when no parent needs
/// a gradient (or recording is off), which prunes dead subgraphs eagerly.
pub(crate) fn make_node(
    value: ArrayD<f64>,
    parents: Vec<Tensor>,
    backward: impl Fn(&ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>> + 'static,
) -> Tensor {
    let needs = grad_enabled() && parents.iter().any(|p| p.inner.needs_grad);
    let source = if needs {
        Source::Node {
            parents,
            backward: Box::new(backward),
        }
    } else {
        Source::Constant
    };
    Tensor {
        inner: Rc::new(Inner {
            id: next_id(),
            data: Data::Owned(value),
            source,
            needs_grad: needs,
        }),
    }
}

/// A named trainable parameter: shared value storage plus a gradient sink.
/// Clones alias the same storage, which is how weight sharing is expressed.
#[derive(Clone)]
pub struct Var {
    name: String,
    value: Rc<RefCell<ArrayD<f64>>>,
    grad: Rc<RefCell<ArrayD<f64>>>,
}

impl Var {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Var {
        let grad = ArrayD::zeros(value.raw_dim());
        Var {
            name: name.into(),
            value: Rc::new(RefCell::new(value)),
            grad: Rc::new(RefCell::new(grad)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Enters a graph as a trainable leaf (constant under [`no_grad`]).
    pub fn tensor(&self) -> Tensor {
        let source = if grad_enabled() {
            Source::Leaf {
                sink: Rc::clone(&self.grad),
            }
        } else {
            Source::Constant
        };
        let needs = matches!(source, Source::Leaf { .. });
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                data: Data::Shared(Rc::clone(&self.value)),
                source,
                needs_grad: needs,
            }),
        }
    }

    /// Enters a graph as a constant: the value is used but no gradient is
    /// recorded for it. This is how discriminators are frozen during
    /// generator updates.
    pub fn frozen(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                data: Data::Shared(Rc::clone(&self.value)),
                source: Source::Constant,
                needs_grad: false,
            }),
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.value.borrow()
    }

    pub fn set_value(&self, v: ArrayD<f64>) {
        assert_eq!(
            self.value.borrow().shape(),
            v.shape(),
            "set_value shape mismatch for {}",
            self.name
        );
        *self.value.borrow_mut() = v;
    }

    pub fn with_value_mut(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.value.borrow_mut())
    }

    pub fn grad(&self) -> Ref<'_, ArrayD<f64>> {
        self.grad.borrow()
    }

    pub fn with_grad_mut(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.grad.borrow_mut())
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(0.0);
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when both vars alias the same underlying storage.
    pub fn shares_storage(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.value, &other.value)
    }

    /// Stable address of the value storage, for deduplication.
    pub fn storage_ptr(&self) -> usize {
        Rc::as_ptr(&self.value) as usize
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .finish()
    }
}
