//! Shape-checked row-major f64 tensors.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

/// Dense f64 tensor (rank 1 or 2 in practice). `grad` is populated by the
/// tape after a backward pass; a tensor with `requires_grad == false` never
/// receives one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    /// Node handle on the currently live tape, if registered.
    pub(crate) tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values).expect("vector: nonempty")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
            return Err(Error::Input("from_rows: ragged or empty rows".into()));
        }
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    /// Gaussian init with the given std, drawn from `rng`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor::new(shape, values).expect("randn: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (or 1 for a vector).
    pub fn n_rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Gradient buffer, or zeros when no gradient flowed to this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad.clone().unwrap_or_else(|| vec![0.0; self.numel()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_must_agree() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.n_rows(), 2);
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn grad_or_zeros_default() {
        let t = Tensor::zeros(vec![3]);
        assert_eq!(t.grad_or_zeros(), vec![0.0; 3]);
    }
}
