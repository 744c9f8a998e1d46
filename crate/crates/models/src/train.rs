//! Optimizer plumbing shared by both networks.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerSpec {
    pub fn from_train_config(t: &comix_core::config::TrainConfig, finetune: bool) -> Self {
        Self {
            lr: if finetune { t.lr_finetune } else { t.lr_pretrain },
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        }
    }
}

/// AdamW over every trainable parameter outside the frozen prefixes, with
/// global-norm gradient clipping.
pub struct Trainer {
    vars: Vec<(String, Var)>,
    opt: Option<AdamW>,
    clip: f64,
}

impl Trainer {
    pub fn new(store: &ParamStore, frozen: &[String], spec: &OptimizerSpec) -> Result<Self> {
        let vars = store.trainable_vars(frozen);
        let opt = if vars.is_empty() {
            None
        } else {
            Some(AdamW::new(
                vars.iter().map(|(_, v)| v.clone()).collect(),
                ParamsAdamW {
                    lr: spec.lr,
                    beta1: spec.beta1,
                    beta2: spec.beta2,
                    eps: spec.eps,
                    weight_decay: spec.weight_decay,
                },
            )?)
        };
        Ok(Self {
            vars,
            opt,
            clip: spec.grad_clip,
        })
    }

    pub fn n_trainable(&self) -> usize {
        self.vars.len()
    }

    pub fn set_lr(&mut self, lr: f64) {
        if let Some(o) = &mut self.opt {
            o.set_learning_rate(lr);
        }
    }

    /// Backpropagates `loss`, clips, and applies one update. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(ModelError::NonFinite("training loss"));
        }
        let mut grads = loss.backward()?;
        let norm = global_norm(&grads, &self.vars)?;
        if !norm.is_finite() {
            return Err(ModelError::NonFinite("gradient"));
        }
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / (norm + 1e-6);
            for (_, v) in &self.vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    let g = (g * scale)?;
                    grads.insert(v.as_tensor(), g);
                }
            }
        }
        if let Some(o) = &mut self.opt {
            o.step(&grads)?;
        }
        Ok(norm)
    }
}

fn global_norm(grads: &GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}
