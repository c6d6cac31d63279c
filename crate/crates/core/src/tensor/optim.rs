use super::{Result, Tensor, TensorError};

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v - lr * grad; w <- w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// One zeroed velocity buffer per parameter, in the order given.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::InvalidArgument(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        let velocity = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self { learning_rate, momentum, velocity })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.velocity.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        // Validate everything before touching any weight.
        for (index, (p, v)) in params.iter().zip(&self.velocity).enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(TensorError::MissingGradient { index });
            }
            if p.numel() != v.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("parameter {index} has {} values, velocity {}", p.numel(), v.len()),
                });
            }
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel - self.learning_rate * g;
                *w += *vel;
            }
        }
        Ok(())
    }
}
