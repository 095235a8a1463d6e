use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// What a backward rule sees when it is replayed.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this op's output.
    pub upstream: &'a [f64],
    pub inputs: &'a [Tensor],
    pub output: &'a [f64],
    /// `needs[i]` is false when input `i` does not require a gradient;
    /// the rule may return `None` for it.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct OpRecord {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<OpRecord>,
}

/// Dense row-major array of `f64` with optional gradient tracking.
///
/// Cloning is cheap and shares storage. Volumes use the layout
/// batch × channels × slices × height × width.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<OpRecord>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = if requires_grad && op.is_none() {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(grad),
                op,
            }),
        }
    }

    /// Creates a constant tensor. Fails when `data` does not fill `shape` or a dim is zero.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("axis {axis}"), "dimensions must be >= 1"));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be >= 1: {shape:?}");
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Creates a trainable leaf with a zeroed gradient accumulator.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.into_parameter())
    }

    /// Detaches `self` into a fresh leaf that accumulates gradients.
    pub fn into_parameter(self) -> Self {
        let data = self.to_vec();
        Self::build(self.inner.shape.clone(), data, true, None)
    }

    /// Copies the data into a new leaf that does not track gradients.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Records the result of an op. When gradients are disabled or no
    /// input requires one, the result is a plain constant.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let tracked = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        if tracked {
            Self::build(
                shape,
                data,
                true,
                Some(OpRecord {
                    name,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.op.as_ref().map(|op| op.name)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read()
    }

    /// Mutable access to the values; only meaningful on leaves.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.inner.data.write()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.read().clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.inner.data.read()[0]
    }

    /// Copy of the accumulated gradient (leaves with `requires_grad` only).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.grad.lock().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reshape sharing no graph history; returns a differentiable view copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                "shape",
                format!("{:?} is incompatible with {:?}", shape, self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.upstream.to_vec())]),
        ))
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate (`+=`)
    /// into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(upstream) = pending.remove(&node.key()) else {
                continue;
            };
            let Some(op) = node.inner.op.as_ref() else {
                node.accumulate(&upstream);
                continue;
            };
            let needs: Vec<bool> = op.inputs.iter().map(Tensor::requires_grad).collect();
            let grads = {
                let output = node.data();
                (op.backward)(&BackwardCtx {
                    upstream: &upstream,
                    inputs: &op.inputs,
                    output: &output,
                    needs: &needs,
                })
            };
            debug_assert_eq!(grads.len(), op.inputs.len(), "backward arity of {}", op.name);
            for (input, grad) in op.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(grad.len(), input.numel(), "gradient size from {}", op.name);
                match pending.get_mut(&input.key()) {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => {
                        pending.insert(input.key(), grad);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grad: &[f64]) {
        if let Some(acc) = self.inner.grad.lock().as_mut() {
            acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
        }
    }

    /// Post-order over tracked nodes (inputs before consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited = std::collections::HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.inner.op.as_ref() {
                for input in &op.inputs {
                    if input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
