//! Dense row-major `f64` tensor used throughout the head and losses.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-empty, has positive
    /// dimensions and matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Promotes 32-bit storage values.
    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Returns `(d0, d1, d2)` for a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::Shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    /// Row `i` of the tensor viewed as `(shape[0], rest)`.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Permutes the middle axis of a rank-3 tensor (the time frames of an
    /// `L×T×D` hidden-state stack).
    pub fn permute_axis1(&self, perm: &[usize]) -> Result<Tensor> {
        let (l, t, d) = self.dims3()?;
        if perm.len() != t {
            return Err(Error::Shape(format!(
                "permutation of length {} for axis of length {t}",
                perm.len()
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for li in 0..l {
            for &src in perm {
                let base = (li * t + src) * d;
                out.extend_from_slice(&self.data[base..base + d]);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn permute_time_axis() {
        let t = Tensor::from_fn(vec![2, 3, 1], |i| i as f64).unwrap();
        let p = t.permute_axis1(&[2, 0, 1]).unwrap();
        assert_eq!(p.data(), &[2.0, 0.0, 1.0, 5.0, 3.0, 4.0]);
    }
}
