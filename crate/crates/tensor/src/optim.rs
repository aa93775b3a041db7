use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0 }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step<T: Scalar>(&mut self, param: &mut Tensor<T>, grad: &[T], cfg: &AdamConfig) -> Result<()> {
        if grad.len() != param.numel() || self.m.len() != param.numel() {
            return Err(TensorError::shape(
                "adam_step",
                format!("param {} / grad {} / state {}", param.numel(), grad.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p = T::from_f64(p.as_f64() - update);
        }
        Ok(())
    }
}

/// Adam over an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Adam { config, states: params.iter().map(|p| AdamState::new(p.numel())).collect() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every parameter that carries a gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(TensorError::arg("Adam::step", "parameter list changed length"));
        }
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad().map(<[T]>::to_vec) else { continue };
            s.step(p, &grad, &self.config)?;
        }
        Ok(())
    }
}
