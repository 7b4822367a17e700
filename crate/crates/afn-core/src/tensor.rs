//! Dense 4-d tensors in NCHW layout: (batch, channels, frequency, time).
//!
//! Values are stored row-major in a flat `Vec<f64>`; the time axis is the
//! fastest-moving index. All constructors reject non-finite data, so every
//! tensor that enters the tape holds finite values.

use crate::error::{AfnError, Result};

/// Shape of a tensor: batch `n`, channels `c`, frequency `f`, time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub t: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, f: usize, t: usize) -> Self {
        Shape { n, c, f, t }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.f * self.t
    }

    /// Flat row-major offset of element (n, c, f, t).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, f: usize, t: usize) -> usize {
        ((n * self.c + c) * self.f + f) * self.t + t
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(fm, "({},{},{},{})", self.n, self.c, self.f, self.t)
    }
}

/// A dense tensor value. Immutable once built; tape operations never mutate
/// their inputs, so tensors can be shared freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(AfnError::ShapeMismatch(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AfnError::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()], requires_grad: false }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Tensor::new(shape, vec![value; shape.numel()])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for fr in 0..shape.f {
                    for t in 0..shape.t {
                        data.push(f(n, c, fr, t));
                    }
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, f: usize, t: usize) -> f64 {
        self.data[self.shape.idx(n, c, f, t)]
    }

    /// Rounds every element to its nearest f32 and widens back, so the tensor
    /// is exactly representable in the float32 on-disk checkpoint format.
    pub fn snap_to_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_f32_exact(&self) -> bool {
        self.data.iter().all(|&v| v == v as f32 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        let err = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, AfnError::ShapeMismatch(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new(Shape::new(1, 1, 1, 2), vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, AfnError::NonFinite(_)));
        let err = Tensor::new(Shape::new(1, 1, 1, 1), vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, AfnError::NonFinite(_)));
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, f, t| {
            (n * 1000 + c * 100 + f * 10 + t) as f64
        })
        .unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data[t.shape.idx(0, 0, 0, 1)], 1.0);
        assert_eq!(t.data[t.shape.idx(0, 0, 1, 0)], 10.0);
    }

    #[test]
    fn f32_snap() {
        let mut t = Tensor::new(Shape::new(1, 1, 1, 2), vec![0.1, 1.0 / 3.0]).unwrap();
        assert!(!t.is_f32_exact());
        t.snap_to_f32();
        assert!(t.is_f32_exact());
    }
}
