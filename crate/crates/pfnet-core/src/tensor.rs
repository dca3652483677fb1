use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Logical shape of a dense 4-D tensor in (N, C, H, W) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense 4-D f32 tensor, the universal value type of the engine.
///
/// Data is reference-counted so tensors are cheap to clone and safe to
/// share across threads; once constructed a tensor is never mutated
/// except through [`Tensor::make_mut`] on a uniquely held value.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::from(dims), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![1.0; shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            requires_grad: false,
        }
    }

    /// A 1-element tensor, shape (1,1,1,1).
    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; copies only if the buffer is shared.
    pub fn make_mut(&mut self) -> &mut [f32] {
        Arc::<Vec<f32>>::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, dims: [usize; 4]) -> Result<Tensor> {
        let shape = Shape::from(dims);
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    /// Largest absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Exact byte-level equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Max elementwise absolute difference; shapes must match.
    pub fn max_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped([1, 1, 2, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped([1, 1, 5, 1]).is_err());
    }

    #[test]
    fn bit_eq_detects_sign_of_zero() {
        let a = Tensor::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert_eq!(a.max_diff(&b), 0.0);
    }
}
