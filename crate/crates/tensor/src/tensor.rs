//! The tensor handle and the recording tape.
//!
//! Every operation that involves a tensor with `requires_grad` records a
//! node holding its inputs and a backward closure. Nodes carry a
//! monotonically increasing sequence number, so sorting the reachable
//! nodes by that number in descending order replays the tape in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::Float;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations. Tensors created inside never
/// carry a backward function, so intermediates are freed as soon as they
/// go out of scope.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward function: receives the output gradient and the output data,
/// returns one optional gradient per input (in input order).
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Float> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
    backpropagated: Cell<bool>,
}

/// Dense row-major tensor. Cloning is cheap and shares the underlying node.
pub struct Tensor<T: Float = f32> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad);
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        if let Some(gf) = &self.node.grad_fn {
            d.field("op", &gf.name);
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Allocates a zeroed buffer, reporting allocation failure (or a request
/// over the [`crate::alloc`] budget) instead of aborting.
pub fn alloc_zeroed<T: Float>(len: usize) -> Result<Vec<T>> {
    let bytes = len.saturating_mul(std::mem::size_of::<T>());
    if !crate::alloc::fits(bytes) {
        return Err(TensorError::OutOfMemory { bytes });
    }
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| TensorError::OutOfMemory { bytes })?;
    v.resize(len, T::zero());
    Ok(v)
}

impl<T: Float> Tensor<T> {
    fn make(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
                backpropagated: Cell::new(false),
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() && data.len() == 1 {
            return Ok(Self::make(Vec::new(), data, false, None));
        }
        if numel_of(shape) != data.len() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("buffer holds {} elements", data.len()),
            });
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::from_vec(alloc_zeroed(numel_of(shape))?, shape)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(Vec::new(), vec![value], false, None)
    }

    fn into_leaf(self, requires_grad: bool) -> Self {
        match Rc::try_unwrap(self.node) {
            Ok(node) => Self::make(node.shape, node.data, requires_grad, None),
            Err(node) => Self::make(node.shape.clone(), node.data.clone(), requires_grad, None),
        }
    }

    /// Builds the output of a custom differentiable operation. When no
    /// input requires a gradient, or recording is disabled, the backward
    /// closure is discarded and the result is a constant.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::make(
                shape,
                data,
                true,
                Some(GradFn {
                    name,
                    inputs,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.node.data[0]
    }

    /// Sequence number on the tape.
    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.node.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of this tensor with no history.
    pub fn detach(&self) -> Self {
        Self::make(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    /// Copy of this tensor as a fresh leaf with the given grad flag.
    pub fn detached_leaf(&self, requires_grad: bool) -> Self {
        Self::make(self.node.shape.clone(), self.node.data.clone(), requires_grad, None)
    }

    /// Mutates the data of a tensor that is not referenced by any live
    /// graph. Used by optimizers between steps.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [T])) -> Result<()> {
        let node = Rc::get_mut(&mut self.node).ok_or(TensorError::SharedTensor)?;
        f(&mut node.data);
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::make(self.node.shape.clone(), data, self.node.requires_grad, None)
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients
    /// accumulate into every reachable leaf that requires them; leaf
    /// gradients keep accumulating across graphs until `zero_grad`.
    /// Running backward twice on the same loss is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if self.node.backpropagated.replace(true) {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        self.accumulate_grad(vec![T::one()]);
        for t in &order {
            let Some(gf) = &t.node.grad_fn else { continue };
            // intermediate gradients are consumed, only leaves keep theirs
            let Some(grad_out) = t.node.grad.borrow_mut().take() else { continue };
            let grads = (gf.backward)(&grad_out, &t.node.data);
            debug_assert_eq!(grads.len(), gf.inputs.len(), "{}", gf.name);
            for (inp, g) in gf.inputs.iter().zip(grads) {
                if let (true, Some(g)) = (inp.requires_grad(), g) {
                    debug_assert_eq!(g.len(), inp.numel(), "{}", gf.name);
                    inp.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}
