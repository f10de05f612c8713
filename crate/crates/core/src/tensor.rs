//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An immutable dense array. `requires_grad` only matters when the tensor is
/// registered as a tape leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Numeric(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
            requires_grad: false,
        }
    }

    /// A single-element tensor with shape `[1]`.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.0, 0.25]);
    }
}
