//! Dense f64 tensor values and the taped reverse-mode engine built on them.
//!
//! Everything numeric in this crate flows through [`Graph`]: a forward pass
//! records one [`OpKind`] per produced tensor, `backward` replays the tape in
//! reverse, and [`grad_check`] validates any scalar-valued composition
//! against central finite differences.
//!
//! All values are 64-bit; gradient verification needs the headroom.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Graph, OpKind, TensorId};

use crate::error::{Result, VifError};

/// A dense row-major tensor. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(VifError::shape(
                "tensor",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Validity check: no NaN or Inf anywhere in the value buffer.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
