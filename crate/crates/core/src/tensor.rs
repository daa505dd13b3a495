//! Rank-3 tensors `[batch, channels, time]` and the scalar trait the kernels
//! are generic over.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};
use rustfft::FftNum;

use crate::error::{Error, Result};

/// Floating-point element type. Training runs at `f32`; gradient checks at `f64`.
pub trait Real:
    Float + FftNum + NumAssign + FromPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(extent(m, k, rsa, csa) <= a.len());
                debug_assert!(extent(k, n, rsb, csb) <= b.len());
                debug_assert!(extent(m, n, rsc, csc) <= c.len());
                // SAFETY: the debug assertions above document the contract; every
                // caller in this crate derives strides from the slice shapes.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[allow(dead_code)]
fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Shape of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub time: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, time: usize) -> Self {
        Self {
            batch,
            channels,
            time,
        }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.time
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.channels * self.time
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}]", self.batch, self.channels, self.time)
    }
}

/// Batched 1-D signal block, row-major `(batch, channel, time)`.
///
/// The storage is shared and copy-on-write, so cloning a tensor is cheap.
/// Kernel weights reuse the type with `(out_ch, in_ch, k)` as the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: Arc::new(vec![value; shape.len()]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Single-item, single-channel tensor.
    pub fn from_signal(samples: &[T]) -> Self {
        Self {
            shape: Shape::new(1, 1, samples.len()),
            data: Arc::new(samples.to_vec()),
        }
    }

    /// Stacks equal-shape single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor3<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.channels != first.channels || t.shape.time != first.time {
                return Err(Error::shape(format!(
                    "cannot stack {} with {}",
                    t.shape, first
                )));
            }
            batch += t.shape.batch;
            data.extend_from_slice(t.data());
        }
        Self::new(Shape::new(batch, first.channels, first.time), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values of batch item `b`, `channels * time` long.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Extracts batch item `b` as its own tensor.
    pub fn item_tensor(&self, b: usize) -> Self {
        Self {
            shape: Shape::new(1, self.shape.channels, self.shape.time),
            data: Arc::new(self.item(b).to_vec()),
        }
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let t = self.shape.time;
        let start = (b * self.shape.channels + c) * t;
        &self.data[start..start + t]
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> T {
        self.data[(b * self.shape.channels + c) * self.shape.time + t]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                    .collect(),
            ),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }
}
