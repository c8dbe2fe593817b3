use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::Result;

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds this parameter's entry of `grads` (if any) into `self.grad`.
    /// Frozen parameters are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if !self.trainable {
            return Ok(());
        }
        if let Some(g) = grads.get(&self.name) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Plain gradient descent: `w <- w - lr * g` for trainable parameters, then
/// every gradient is reset to zero.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
    for p in params {
        if p.trainable && lr != 0.0 {
            for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        }
        p.zero_grad();
    }
}
