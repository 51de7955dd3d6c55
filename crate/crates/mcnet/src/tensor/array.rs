//! Shape-tagged dense array of 64-bit floats, row-major.

use crate::error::{Error, Result};

/// Dense numeric array. All feature maps, parameters and gradients in the
/// network are `NDArray`s; shapes are checked at every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct NDArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl NDArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(NDArray { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        NDArray { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        NDArray { shape, data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        NDArray { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Build a `[rows.len(), width]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::Dimension(format!(
                    "ragged rows: expected width {}, found {}",
                    width,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        NDArray::new(vec![rows.len(), width], data)
    }

    /// Mark this array as a differentiable leaf.
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-d array.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Split along `axis` into pieces of the given axis sizes.
    /// Exact inverse of concatenation along the same axis.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<NDArray>> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension(format!(
                "split axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let total: usize = sizes.iter().sum();
        if total != self.shape[axis] {
            return Err(Error::Dimension(format!(
                "split sizes {:?} do not sum to axis size {}",
                sizes, self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full_block = self.shape[axis] * inner;
        let mut out = Vec::with_capacity(sizes.len());
        let mut axis_off = 0usize;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let start = o * full_block + axis_off * inner;
                data.extend_from_slice(&self.data[start..start + s * inner]);
            }
            out.push(NDArray::new(shape, data)?);
            axis_off += s;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = NDArray::new(vec![2, 2], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn split_inverts_layout() {
        // [2,3] split along axis 1 into 1+2
        let a = NDArray::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let parts = a.split(1, &[1, 2]).unwrap();
        assert_eq!(parts[0].data(), &[1., 4.]);
        assert_eq!(parts[1].data(), &[2., 3., 5., 6.]);
    }
}
