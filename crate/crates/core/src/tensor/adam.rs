//! Adam optimizer state and update rule.

use super::{Elem, Tensor, TensorError};

/// Adam hyperparameters. Defaults are the standard ones: lr 1e-3,
/// beta1 0.9, beta2 0.999, epsilon 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// One layer's parameters together with its Adam moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Elem = f32> {
    pub name: String,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub m_weights: Tensor<T>,
    pub v_weights: Tensor<T>,
    pub m_bias: Tensor<T>,
    pub v_bias: Tensor<T>,
    /// Number of optimizer steps taken so far.
    pub step_count: u64,
}

impl<T: Elem> LayerParams<T> {
    pub fn new(name: impl Into<String>, weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let m_weights = Tensor::zeros(weights.shape());
        let v_weights = Tensor::zeros(weights.shape());
        let m_bias = Tensor::zeros(bias.shape());
        let v_bias = Tensor::zeros(bias.shape());
        LayerParams {
            name: name.into(),
            weights,
            bias,
            m_weights,
            v_weights,
            m_bias,
            v_bias,
            step_count: 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Elem>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            m_weights: self.m_weights.cast(),
            v_weights: self.v_weights.cast(),
            m_bias: self.m_bias.cast(),
            v_bias: self.v_bias.cast(),
            step_count: self.step_count,
        }
    }
}

/// One Adam update over a layer's weights and bias, consuming their
/// gradients:
///
/// ```text
/// m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2       t <- t+1
/// theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// ```
///
/// The update is computed in f64 and gradients are cleared afterwards.
pub fn adam_step<T: Elem>(params: &mut LayerParams<T>, config: &AdamConfig) -> Result<(), TensorError> {
    config.validate()?;
    if params.weights.grad().is_none() {
        return Err(TensorError::MissingGradient(format!("{}.weights", params.name)));
    }
    if params.bias.grad().is_none() {
        return Err(TensorError::MissingGradient(format!("{}.bias", params.name)));
    }
    params.step_count += 1;
    let t = params.step_count as i32;
    let m_corr = 1.0 - config.beta1.powi(t);
    let v_corr = 1.0 - config.beta2.powi(t);

    update(
        &mut params.weights,
        &mut params.m_weights,
        &mut params.v_weights,
        config,
        m_corr,
        v_corr,
    );
    update(
        &mut params.bias,
        &mut params.m_bias,
        &mut params.v_bias,
        config,
        m_corr,
        v_corr,
    );
    params.weights.clear_grad();
    params.bias.clear_grad();
    Ok(())
}

fn update<T: Elem>(
    theta: &mut Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    config: &AdamConfig,
    m_corr: f64,
    v_corr: f64,
) {
    let grads: Vec<f64> = theta.grad().unwrap().iter().map(|g| g.as_f64()).collect();
    for i in 0..grads.len() {
        let g = grads[i];
        let mi = config.beta1 * m.values()[i].as_f64() + (1.0 - config.beta1) * g;
        let vi = config.beta2 * v.values()[i].as_f64() + (1.0 - config.beta2) * g * g;
        m.values_mut()[i] = T::from_f64(mi);
        v.values_mut()[i] = T::from_f64(vi);
        let step = config.learning_rate * (mi / m_corr) / ((vi / v_corr).sqrt() + config.epsilon);
        theta.values_mut()[i] = T::from_f64(theta.values()[i].as_f64() - step);
    }
}
