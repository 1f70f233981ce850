use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::{ModelParams, ParamGroup};
use crate::model::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Momentum SGD with coupled weight decay and separate learning rates for
/// the feature extractor and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: SgdConfig,
    pub momentum_buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, config: SgdConfig) -> Self {
        let momentum_buffers = params.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { config, momentum_buffers }
    }

    /// `buf = momentum * buf + (grad + decay * p)`, then `p -= lr * buf`.
    pub fn sgd_step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.sgd_step_scaled(params, grads, 1.0)
    }

    /// [`sgd_step`](Self::sgd_step) with both learning rates multiplied by `lr_scale`.
    pub fn sgd_step_scaled(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>], lr_scale: f64) -> Result<()> {
        if grads.len() != params.params().len() || self.momentum_buffers.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.params().len()
            )));
        }
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for ((p, g), buf) in params.params_mut().iter_mut().zip(grads).zip(&mut self.momentum_buffers) {
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension(format!("gradient for {} has shape {:?}", p.name, g.shape())));
            }
            let lr = T::of(lr_scale
                * match p.group {
                    ParamGroup::Extractor => self.config.lr_extractor,
                    ParamGroup::Classifier => self.config.lr_classifier,
                });
            for ((w, &gv), b) in p.value.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                *b = mu * *b + gv + wd * *w;
                *w = *w - lr * *b;
            }
        }
        Ok(())
    }
}
