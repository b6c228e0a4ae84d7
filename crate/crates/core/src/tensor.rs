//! Row-major coefficient tensors.

use crate::error::{Result, TbsError};
use crate::real::Real;

/// A d-dimensional row-major array (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTensor<T = f64> {
    extents: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> CoeffTensor<T> {
    /// Wraps `data`, checking its length and that every value is finite.
    pub fn from_vec(extents: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_extents(&extents)?;
        let len: usize = extents.iter().product();
        if data.len() != len {
            return Err(TbsError::InputValidation(format!(
                "tensor with extents {extents:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TbsError::InputValidation(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: Vec<usize>) -> Self {
        Self::filled(extents, T::zero())
    }

    pub fn filled(extents: Vec<usize>, value: T) -> Self {
        let len = extents.iter().product();
        Self {
            extents,
            data: vec![value; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(extents: Vec<usize>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let len: usize = extents.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; extents.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for a in (0..extents.len()).rev() {
                idx[a] += 1;
                if idx[a] < extents[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self { extents, data }
    }

    pub(crate) fn from_raw(extents: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(extents.iter().product::<usize>(), data.len());
        Self { extents, data }
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.extents.len());
        idx.iter()
            .zip(&self.extents)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn check_extents(&self, expected: &[usize]) -> Result<()> {
        if self.extents != expected {
            return Err(TbsError::ExtentMismatch {
                expected: expected.to_vec(),
                actual: self.extents.clone(),
            });
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(TbsError::InputValidation(format!(
                "non-finite value at flat index {pos}"
            ))),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn cast<U: Real>(&self) -> CoeffTensor<U> {
        CoeffTensor {
            extents: self.extents.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Total payload size in bytes.
    pub fn bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }
}

fn validate_extents(extents: &[usize]) -> Result<()> {
    if extents.is_empty() || extents.len() > 3 {
        return Err(TbsError::InputValidation(format!(
            "tensors must have 1 to 3 axes, got {}",
            extents.len()
        )));
    }
    if extents.contains(&0) {
        return Err(TbsError::InputValidation(format!(
            "tensor extents must be positive, got {extents:?}"
        )));
    }
    Ok(())
}

/// Embeds d-dimensional extents into three axes by prepending unit axes.
pub(crate) fn embed3(extents: &[usize]) -> [usize; 3] {
    let mut out = [1usize; 3];
    let off = 3 - extents.len();
    out[off..].copy_from_slice(extents);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(CoeffTensor::<f64>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(CoeffTensor::from_vec(vec![2], vec![0.0, f64::NAN]).is_err());
        assert!(CoeffTensor::<f64>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = CoeffTensor::<f64>::from_fn(vec![2, 3], |i| (10 * i[0] + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.get(&[1, 2]), 12.0);
    }

    #[test]
    fn embed_prepends_unit_axes() {
        assert_eq!(embed3(&[5]), [1, 1, 5]);
        assert_eq!(embed3(&[4, 5]), [1, 4, 5]);
    }
}
