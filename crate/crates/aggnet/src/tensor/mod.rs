//! Dense 4-D tensors and the reverse-mode graph built over them.
//!
//! Everything the network touches is a `Tensor`: a (batch, channel, height,
//! width) array of `Real` values in row-major order. `Graph` records forward
//! operations and replays them in reverse to populate gradients.

pub(crate) mod graph;
pub(crate) mod kernels;

pub use graph::{BnStats, Graph, Mode, Var, BN_EPS};
pub use kernels::deconv_pad;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar type of the whole system. Single precision by default; the `f64`
/// feature switches every computation to double precision (gradient-check
/// builds).
#[cfg(feature = "f64")]
pub type Real = f64;
#[cfg(not(feature = "f64"))]
pub type Real = f32;

/// Name of the active precision, for diagnostics.
pub fn precision_name() -> &'static str {
    if cfg!(feature = "f64") {
        "f64"
    } else {
        "f32"
    }
}

/// (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array. Cloning is cheap (shared storage); mutation copies on
/// write when the storage is shared, so tensors behave as values and are safe
/// to read from any thread.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<Real>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, value: Real) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> Real) -> Self {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Uniform values in [lo, hi) drawn from `rng`.
    pub fn uniform(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Self {
        Self::from_fn(shape, |_| rng.range_f64(lo, hi) as Real)
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(value: Real) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [Real] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value at (n, c, h, w).
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> Real {
        self.data[self.shape.idx(n, c, h, w)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and bitwise-identical contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Reinterpret the same storage under a new shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_checked() {
        assert!(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::ones(Shape::new(1, 1, 2, 2));
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn reshape_shares_data() {
        let a = Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as Real);
        let b = a.reshaped(Shape::new(2, 4, 1, 1)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.reshaped(Shape::new(1, 1, 1, 1)).is_err());
    }
}
