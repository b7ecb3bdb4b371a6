use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::NdError;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a graph. Every tensor produced inside is a
/// constant leaf.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Option<Op>,
}

/// Dense row-major `f64` array that may take part in a reverse-mode graph.
///
/// Cloning a `Tensor` clones the handle, not the data; use [`Tensor::deep_clone`]
/// for an independent copy.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<Node>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .field("data", &n.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NdError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NdError::InvalidShape(shape.to_vec()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NdError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, NdError> {
        let t = Self::new(shape, data)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NdError> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NdError> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NdError::RaggedRows);
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op: None,
        })))
    }

    /// Builds an op result; records the op only when grad mode is on and a
    /// parent needs gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let needs = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            requires_grad: needs,
            grad: None,
            op: if needs { Some(op) } else { None },
        })))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.borrow().data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.borrow().op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Replaces the values of a leaf in place. Shape is preserved.
    pub fn set_data(&self, data: Vec<f64>) -> Result<(), NdError> {
        let mut n = self.0.borrow_mut();
        if data.len() != n.data.len() {
            return Err(NdError::DataLength {
                shape: n.shape.clone(),
                len: data.len(),
            });
        }
        n.data = data;
        Ok(())
    }

    pub fn with_data_mut<T>(&self, f: impl FnOnce(&mut [f64]) -> T) -> T {
        f(&mut self.0.borrow_mut().data)
    }

    /// Constant copy cut off from any graph.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Self::leaf(n.shape.clone(), n.data.clone(), false)
    }

    /// Independent copy keeping the `requires_grad` flag but no graph or grad.
    pub fn deep_clone(&self) -> Tensor {
        let n = self.0.borrow();
        Self::leaf(n.shape.clone(), n.data.clone(), n.requires_grad && n.op.is_none())
    }

    pub fn same_handle(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable leaf with `requires_grad`; call [`Tensor::zero_grad`]
    /// on leaves to reset.
    pub fn backward(&self) -> Result<(), NdError> {
        if self.len() != 1 {
            return Err(NdError::NonScalarBackward(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            if t.is_leaf() {
                let mut n = t.0.borrow_mut();
                if n.requires_grad {
                    match n.grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => n.grad = Some(g),
                    }
                }
                continue;
            }
            let node = t.0.borrow();
            let op = node.op.as_ref().expect("non-leaf has an op");
            for (parent, pg) in op.backward(&node.data, &g) {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.key()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.key(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (tensor, parents already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            let parents = t.0.borrow().op.as_ref().map(|op| op.parents()).unwrap_or_default();
            stack.push((t, true));
            for p in parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}
