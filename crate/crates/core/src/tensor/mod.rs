//! Dense tensors with reverse-mode differentiation for exactly the layers
//! the network needs: 3x3 same-padded convolution, 2x2 max-pooling, dense,
//! ReLU, softmax with cross-entropy, and the Adam optimizer.
//!
//! Everything is generic over the element type: the training pipeline runs
//! in `f32`, while gradient checks instantiate `f64` so central finite
//! differences are meaningful at h = 1e-4.

pub mod adam;
pub mod ops;

pub use adam::{adam_step, AdamConfig, LayerParams};

use num_traits::Float;

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Elem: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A(m,k) * B(k,n) + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial extents must be even for 2x2 pooling, got {h}x{w}")]
    OddSpatialExtent { h: usize, w: usize },
    #[error("target class {class} of sample {sample} out of range (0..{classes})")]
    InvalidTarget {
        sample: usize,
        class: usize,
        classes: usize,
    },
    #[error("missing gradient on {0}")]
    MissingGradient(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

/// Dense n-dimensional array in row-major order with an optional gradient
/// buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Elem = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for shape {:?} (expected {len})",
                values.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    /// Reinterprets the buffer under a new shape of equal length.
    pub fn with_shape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != self.values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Converts every value (and gradient, if present) through `f64`.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_buffer_is_lazy() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.grad().is_none());
        t.grad_mut()[2] = 1.5;
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 1.5, 0.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }
}
