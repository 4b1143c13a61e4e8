use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::DiffError;

/// Scalar type the graph can run on. Production code uses `f32`; the
/// finite-difference oracle runs the same graphs in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major `f32` array. Owned storage for parameters, features,
/// prompts and gradients outside of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, DiffError> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, DiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<(), DiffError> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(DiffError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Cosine similarity of two tensors after flattening. Returns 0 when either
/// norm is below 1e-12.
pub fn cosine_flat(a: &[f32], b: &[f32]) -> Result<f64, DiffError> {
    if a.len() != b.len() {
        return Err(DiffError::ElementCount {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_flat(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.3f32, -1.2, 4.0];
        let w: Vec<f32> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_flat(&v, &w).unwrap() - 1.0).abs() < 1e-12);
        let c = cosine_flat(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn cosine_degenerate_is_zero() {
        assert_eq!(cosine_flat(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_length_mismatch() {
        assert!(cosine_flat(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }
}
