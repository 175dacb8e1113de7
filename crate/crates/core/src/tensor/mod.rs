//! Dense f64 tensor with reverse-mode differentiation.
//!
//! Tensors are immutable once built into a graph; only leaf parameters are
//! updated in place (between steps, after the old graph is dropped) and only
//! gradients accumulate. A forward op records its parents and a backward
//! closure; [`backward`] walks the graph in reverse topological order and
//! adds one full contribution of d(loss)/d(tensor) into every reachable
//! tensor that requires a gradient, so repeated calls accumulate.
//!
//! Everything is single-threaded per graph (`Rc`-based); separate graphs on
//! separate threads are fine.

mod kernels;
pub mod ops;

pub use kernels::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    // (enabled, count) in one slot so the disabled path is a single read
    static MAC_STATE: Cell<(bool, u64)> = const { Cell::new((false, 0)) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Start counting multiply-accumulates on this thread (resets the counter).
pub fn mac_counter_start() {
    MAC_STATE.with(|c| c.set((true, 0)));
}

/// Stop counting and return the total since [`mac_counter_start`].
pub fn mac_counter_stop() -> u64 {
    MAC_STATE.with(|c| {
        let (_, n) = c.get();
        c.set((false, 0));
        n
    })
}

pub(crate) fn count_macs(n: u64) {
    MAC_STATE.with(|c| {
        let (enabled, count) = c.get();
        if enabled {
            c.set((true, count + n));
        }
    });
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense row-major f64 tensor, cheaply cloneable (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Leaf tensor from explicit data. Errors when the element count does not
    /// match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Leaf parameter (tracked for gradients).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let node = if requires_grad {
            Some(Node { parents, backward })
        } else {
            None
        };
        Tensor::new(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw storage. Only optimizers should use this;
    /// updating a tensor invalidates any graph built from its old values.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A gradient-free leaf sharing this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

/// Per-pass gradient buffers, keyed by tensor id. Backward closures
/// accumulate parent contributions here; the pass flushes the buffers into
/// the persistent `grad` slots at the end so repeated passes each add
/// exactly one d(loss)/d(x).
pub struct GradStore {
    map: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    fn new() -> GradStore {
        GradStore { map: HashMap::new() }
    }

    /// Accumulation buffer for `t`, or `None` when `t` needs no gradient.
    pub fn buf_mut(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.inner.requires_grad {
            return None;
        }
        Some(
            self.map
                .entry(t.inner.id)
                .or_insert_with(|| vec![0.0; t.numel()])
                .as_mut_slice(),
        )
    }

    /// Add `g` elementwise into the buffer for `t`.
    pub fn accumulate(&mut self, t: &Tensor, g: &[f64]) {
        if let Some(buf) = self.buf_mut(t) {
            for (a, b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Accumulate d(loss)/d(x) into every reachable tensor that requires a
/// gradient. `loss` must be scalar and the graph acyclic (guaranteed by
/// construction). Call [`Tensor::zero_grad`] on parameters between steps;
/// repeated backward passes otherwise accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.inner.requires_grad {
        return Ok(());
    }
    let order = topological_order(loss);
    let mut store = GradStore::new();
    store.map.insert(loss.inner.id, vec![1.0]);
    for t in &order {
        let Some(node) = &t.inner.node else { continue };
        let Some(g) = store.map.remove(&t.inner.id) else {
            continue;
        };
        (node.backward)(&g, &mut store);
        // put the buffer back so the flush below still sees it
        store.map.insert(t.inner.id, g);
    }
    for t in &order {
        if let Some(g) = store.map.get(&t.inner.id) {
            t.accumulate_grad(g);
        }
    }
    Ok(())
}

/// Reverse topological order (consumers before producers), loss first.
fn topological_order(loss: &Tensor) -> Vec<Tensor> {
    enum Frame {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![Frame::Enter(loss.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                if !visited.insert(t.inner.id) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                if let Some(node) = &t.inner.node {
                    for p in &node.parents {
                        if !visited.contains(&p.inner.id) && p.inner.requires_grad {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
            }
            Frame::Exit(t) => order.push(t),
        }
    }
    order.reverse();
    order
}
