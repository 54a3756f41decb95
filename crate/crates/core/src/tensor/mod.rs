//! Dense rank-4 tensors with a reverse-mode tape.
//!
//! Every value is an `(n, c, h, w)` array stored row-major with the batch
//! outermost. Scalars and per-channel vectors are degenerate extents, e.g. a
//! loss is `(1, 1, 1, 1)` and a bias is `(1, C, 1, 1)`.
//!
//! Forward operations are recorded on a [`Tape`]; [`Tape::backward`] replays
//! them in reverse and returns gradients for every leaf that requires them.
//! Model parameters live outside the tape in a [`ParamStore`] and are bound
//! as leaves on each forward pass.

mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
mod param;
mod tape;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore};
pub use tape::{Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; the gradient-check
/// suites run the very same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for an `m x k` times `k x n` product with
    /// arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be in
    /// bounds of the corresponding buffer. Use [`gemm`] for a checked wrapper.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row/column strides of a matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub const fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub const fn col_major(rows: usize) -> Self {
        Self { rs: 1, cs: rows }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked matrix product: `c = a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    av: MatView,
    b: &[S],
    bv: MatView,
    beta: S,
    c: &mut [S],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * cv.rs + j * cv.cs;
                c[idx] = if beta == S::zero() { S::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(av.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(bv.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(cv.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: the three assertions above cover every index the kernel touches.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Extents of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Wraps `data`, checking its length and finiteness.
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::from_raw(shape, data))
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Self::from_raw(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: S) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor from `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_raw(shape, data)
    }

    /// Independent uniform draws from `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| S::lit(rng.gen_range(lo..hi))).collect();
        Self::from_raw(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape is {}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(
                "set_grad",
                format!("gradient has {} values for shape {}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Copy of the tensor in another precision (gradient dropped).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Largest absolute elementwise difference to `other` (shapes must match).
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Batch element `i` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor<S>> {
        if i >= self.shape.n {
            return Err(Error::dim("batch_item", format!("index {i} out of {}", self.shape.n)));
        }
        let len = self.shape.c * self.shape.plane();
        let shape = Shape::new(1, self.shape.c, self.shape.h, self.shape.w);
        Ok(Tensor::from_raw(shape, self.data[i * len..(i + 1) * len].to_vec()))
    }

    /// Stacks `(1, c, h, w)` tensors of equal shape along the batch axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::dim("stack", format!("{s} does not match {first}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(Shape::new(n, first.c, first.h, first.w), data))
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        let s = Shape::new(1, 1, 2, 2);
        assert!(Tensor::<f32>::from_vec(s, vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f32>::from_vec(s, vec![0.0, 1.0, f32::NAN, 2.0]),
            Err(Error::NonFinite { .. })
        ));
        let t = Tensor::<f32>::from_vec(s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        assert!(t.set_grad(vec![1.0]).is_err());
        t.set_grad(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(
            2,
            3,
            2,
            &a,
            MatView::row_major(3),
            &b,
            MatView::row_major(2),
            0.0,
            &mut c,
            MatView::row_major(2),
        );
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T as a 3x2 column-major view of the same buffer
        let mut d = [0.0f64; 9];
        gemm(
            3,
            2,
            3,
            &a,
            MatView::col_major(3),
            &a,
            MatView::row_major(3),
            0.0,
            &mut d,
            MatView::row_major(3),
        );
        assert_eq!(d[0], 1.0 + 16.0);
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 1, 1), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 1, 1));
        assert_eq!(s.batch_item(1).unwrap(), b);
    }
}
