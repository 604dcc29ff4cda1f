use crate::error::{Error, Result};
use crate::numerics::real::Real;

/// Dense row-major (C-order) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                axis: 0,
                message: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    n,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                axis: 0,
                message: format!("cannot reshape {} values to {:?}", self.data.len(), shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Errors with the first non-finite element if any.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    detail: format!("element {} is {}", i, v),
                });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64_())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut t = Tensor::<f64>::zeros(&[4]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(t.check_finite("t").is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
