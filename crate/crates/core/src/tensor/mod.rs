//! Dense row-major tensors with a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheap, reference-counted handle. Results of differentiable
//! operations keep a [`Node`] pointing at their parents together with a
//! backward closure; leaves created with [`Tensor::parameter`] (or
//! [`Tensor::with_grad`]) accumulate gradients when [`Tensor::backward`] runs.
//! Tensors that do not require gradients never record graph nodes, so
//! inference builds no graph at all.

mod gradcheck;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck, GradReport};
pub use ops::broadcast_strides;

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Runs `f` without recording any graph on this thread: results of
/// operations are plain constants even if their inputs require grad.
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

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Storage precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = a·b + beta·c` on strided row-major views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be
    /// in bounds of the respective slice; [`gemm`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn cast_from(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn cast_from(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view used by [`gemm`]: `(slice, row stride, col stride)`.
pub(crate) type MatView<'a, T> = (&'a [T], usize, usize);

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Bounds-checked `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = *v * beta;
            }
        }
        return;
    }
    assert!(max_index(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
    assert!(max_index(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all reachable indices were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Backward closure: receives the upstream gradient and the parent tensors and
/// returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Element> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: Mutex<Option<BackwardFn<T>>>,
}

struct Inner<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op);
        }
        if self.numel() <= 16 {
            d.field("data", &self.inner.data);
        }
        d.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::cast_from(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(shape, vec![value; numel(shape)]).expect("positive shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// A trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.with_grad())
    }

    /// Returns a leaf sharing this tensor's values that records gradients.
    pub fn with_grad(&self) -> Self {
        Self::build(
            self.inner.shape.clone(),
            Arc::clone(&self.inner.data),
            true,
            None,
        )
    }

    /// Returns a leaf sharing this tensor's values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(
            self.inner.shape.clone(),
            Arc::clone(&self.inner.data),
            false,
            None,
        )
    }

    /// Records the result of a differentiable operation. When no parent
    /// requires gradients the result is a plain constant.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: shape/data mismatch");
        if grad_enabled() && parents.iter().any(Tensor::requires_grad) {
            let node = Node {
                op,
                parents,
                backward: Mutex::new(Some(backward)),
            };
            Self::build(shape, Arc::new(data), true, Some(node))
        } else {
            Self::build(shape, Arc::new(data), false, None)
        }
    }

    /// Same values under a new shape; shares storage.
    pub(crate) fn view_as(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel(&shape), self.numel());
        if !self.requires_grad() || !grad_enabled() {
            return Self::build(shape, Arc::clone(&self.inner.data), false, None);
        }
        let node = Node {
            op: "reshape",
            parents: vec![self.clone()],
            backward: Mutex::new(Some(Box::new(|g: &[T], _: &[Tensor<T>]| {
                vec![Some(g.to_vec())]
            }))),
        };
        Self::build(shape, Arc::clone(&self.inner.data), true, Some(node))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Name of the operation that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} values", self.numel());
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Converts element type; the result is a constant leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape(),
            self.inner.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        )
        .expect("shape already validated")
    }

    /// Drops every backward closure reachable from this tensor. A later
    /// `backward` through any of those nodes fails with a graph-integrity error.
    pub fn release_graph(&self) {
        for t in self.topo_order() {
            if let Some(node) = &t.inner.node {
                *node.backward.lock().expect("node lock") = None;
            }
        }
    }

    /// Post-order over nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Populates `grad` on every gradient-requiring leaf reachable from this
    /// scalar. Gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            if let Some(node) = &t.inner.node {
                if node.backward.lock().expect("node lock").is_none() {
                    return Err(Error::GraphIntegrity(format!(
                        "node '{}' (id {}) was released",
                        node.op,
                        t.id()
                    )));
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let guard = node.backward.lock().expect("node lock");
                    let f = guard.as_ref().ok_or_else(|| {
                        Error::GraphIntegrity(format!("node '{}' released mid-pass", node.op))
                    })?;
                    let parent_grads = f(&g, &node.parents);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}: grad size", node.op);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_records_nothing() {
        let a = Tensor::<f64>::ones(&[3]).with_grad();
        let b = no_grad(|| a.scale(2.0).sum());
        assert!(!b.requires_grad() && b.is_leaf());
        assert!(a.scale(2.0).requires_grad());
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0, 2], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn constants_never_get_grads() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().sum();
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sub_gradient_is_plus_minus_one() {
        let a = Tensor::<f64>::parameter(&[2, 3], vec![0.3; 6]).unwrap();
        let b = Tensor::<f64>::parameter(&[2, 3], vec![-1.0; 6]).unwrap();
        a.sub(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![-1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: loss = y + y → d/dx = 4x
        let x = Tensor::<f64>::parameter(&[1], vec![1.5]).unwrap();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn released_graph_is_rejected() {
        let x = Tensor::<f64>::parameter(&[1], vec![2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.release_graph();
        assert!(matches!(loss.backward(), Err(Error::GraphIntegrity(_))));
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::<f64>::parameter(&[1], vec![2.0]).unwrap();
        let y = x.scale(3.0).detach();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn check<S: Send + Sync>() {}
        check::<Tensor<f32>>();
        check::<Tensor<f64>>();
    }
}
