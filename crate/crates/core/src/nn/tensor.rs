use super::{NnError, NnResult, Scalar};

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> NnResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// A trainable parameter: value plus a zeroed gradient buffer.
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        let mut t = Self::from_vec(shape, data).expect("parameter shape");
        t.grad = Some(vec![T::zero(); t.data.len()]);
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> NnResult<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> NnResult<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts the element type; the gradient buffer is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub(crate) fn expect_shape(&self, expected: &[usize], what: &str) -> NnResult<()> {
        if self.shape != expected {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: expected {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> NnResult<()> {
        if self.shape.len() != rank {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert!(t.grad.is_none());
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert!(r.reshape(&[4]).is_err());
    }

    #[test]
    fn params_carry_grad() {
        let mut p = Tensor::<f32>::param(&[2], vec![1.0, 2.0]);
        assert_eq!(p.grad.as_deref(), Some(&[0.0f32, 0.0][..]));
        p.grad_mut()[0] = 3.0;
        p.zero_grad();
        assert_eq!(p.grad.as_deref(), Some(&[0.0f32, 0.0][..]));
        let c: Tensor<f64> = p.cast();
        assert_eq!(c.data, vec![1.0, 2.0]);
    }
}
