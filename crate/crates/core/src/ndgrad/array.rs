//! Dense row-major f64 arrays.

use crate::error::{Error, Result};

/// A dense multi-dimensional array of 64-bit reals, row-major.
///
/// Rank 0 (`shape == []`) is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Validation(format!(
                "array shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "array shape {:?} has a zero dimension",
                shape
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![value],
        }
    }

    /// A 1-D array.
    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// A 2-D array from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar array.
    pub fn item(&self) -> Result<f64> {
        if !self.shape.is_empty() {
            return Err(Error::Contract(format!(
                "item() on non-scalar array of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Number of rows when viewed as a matrix ([n] counts as n rows of width 1
    /// only for rank 2; rank-1 arrays are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather rows of a rank-2 array by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Array> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows on rank-{} array",
                self.rank()
            )));
        }
        let w = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Validation(format!(
                    "row index {} out of range ({} rows)",
                    i, self.shape[0]
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Array::new(vec![indices.len(), w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_element_count() {
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Array::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Array::scalar(4.25);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 4.25);
        assert!(Array::vector(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn gather_rows_copies_in_order() {
        let a = Array::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let g = a.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[5., 6., 1., 2.]);
        assert!(a.gather_rows(&[3]).is_err());
    }
}
