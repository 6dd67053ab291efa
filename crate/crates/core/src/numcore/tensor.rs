use crate::error::{Error, Result};

/// Dense row-major float64 array. Construction rejects NaN/Inf and
/// shape/length disagreement, so a `Tensor` always holds finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} expects {expected} values, got {}",
                    values.len()
                ),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor construction at index {i}"),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// All-zero tensor. Zero dimensions are still rejected via `new`, hence Result.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A tensor is scalar when it holds exactly one value (shape [] or [1]).
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(Error::RootNotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Matrix row count; vectors are treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
        assert!(Tensor::scalar(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_shapes() {
        let s = Tensor::scalar(3.5).unwrap();
        assert!(s.is_scalar());
        assert_eq!(s.as_scalar().unwrap(), 3.5);
        let v = Tensor::vector(vec![1.0]).unwrap();
        assert!(v.is_scalar());
        let v2 = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(!v2.is_scalar());
        assert!(v2.as_scalar().is_err());
    }
}
