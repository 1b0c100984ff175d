//! Dense row-major tensors.
//!
//! Values are held as `f64` regardless of the declared precision; a tensor
//! declared 32-bit keeps every element exactly representable as `f32` by
//! narrowing after each operation. This gives 32-bit forward semantics while
//! keeping a single numeric engine, and it makes file round-trips bitwise
//! lossless at both precisions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    P32,
    P64,
}

impl Precision {
    pub fn code(self) -> u32 {
        match self {
            Precision::P32 => 1,
            Precision::P64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Precision::P32),
            2 => Ok(Precision::P64),
            other => Err(Error::Format(format!("unknown precision code {other}"))),
        }
    }

    pub fn scalar_width(self) -> usize {
        match self {
            Precision::P32 => 4,
            Precision::P64 => 8,
        }
    }

    /// 64-bit wins in mixed-precision expressions.
    pub fn promote(a: Precision, b: Precision) -> Precision {
        if a == Precision::P64 || b == Precision::P64 {
            Precision::P64
        } else {
            Precision::P32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    extents: Vec<usize>,
    precision: Precision,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, narrowing to 32-bit representability when asked and
    /// rejecting non-finite values.
    pub fn new(extents: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let expected: usize = extents.iter().product();
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in {extents:?}")));
        }
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match extents {:?} (expected {})",
                data.len(),
                extents,
                expected
            )));
        }
        if precision == Precision::P32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} in tensor of extents {extents:?}"
            )));
        }
        Ok(Tensor {
            extents,
            precision,
            data,
        })
    }

    pub fn scalar(value: f64, precision: Precision) -> Result<Self> {
        Tensor::new(vec![], vec![value], precision)
    }

    pub fn vector(data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![data.len()], data, precision)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![rows, cols], data, precision)
    }

    pub fn zeros(extents: Vec<usize>, precision: Precision) -> Self {
        let n = extents.iter().product();
        Tensor {
            extents,
            precision,
            data: vec![0.0; n],
        }
    }

    pub fn full(extents: Vec<usize>, value: f64, precision: Precision) -> Result<Self> {
        let n = extents.iter().product();
        Tensor::new(extents, vec![value; n], precision)
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.extents[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.extents[1]
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.extents[1] + col]
    }

    /// The single value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.extents[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        if precision == self.precision {
            return self.clone();
        }
        Tensor::new(self.extents.clone(), self.data.clone(), precision)
            .expect("finite data stays valid under precision change")
    }

    /// Gathers whole rows of a rank-2 tensor, 0-based indices.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows expects rank 2, got {:?}",
                self.extents
            )));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), c, data, self.precision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_extents() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5], Precision::P64),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn p32_narrows_values() {
        let t = Tensor::vector(vec![0.1], Precision::P32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let t64 = Tensor::vector(vec![0.1], Precision::P64).unwrap();
        assert_eq!(t64.data()[0], 0.1);
    }

    #[test]
    fn p32_overflow_is_numeric_error() {
        // Finite at 64-bit, infinite after narrowing.
        assert!(matches!(
            Tensor::vector(vec![1e300], Precision::P32),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::vector(vec![f64::NAN], Precision::P64),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn scalar_rank_zero() {
        let s = Tensor::scalar(3.0, Precision::P64).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.scalar_value(), 3.0);
    }
}
