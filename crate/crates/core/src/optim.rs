//! Parameter update rules: Adam (default), plain SGD, and the step-decay
//! learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::nn::ParameterSet;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First/second moment accumulators plus the update counter. SGD leaves the
/// accumulators at zero; the counter still advances so resumed runs agree.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

impl OptimizerState {
    /// Zeroed state matching the parameter layout.
    pub fn new(params: &ParameterSet) -> Self {
        let first = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        let second = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self { step: 0, first, second }
    }

    pub fn from_parts(step: u64, first: IndexMap<String, Tensor>, second: IndexMap<String, Tensor>) -> Self {
        Self { step, first, second }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&IndexMap<String, Tensor>, &IndexMap<String, Tensor>) {
        (&self.first, &self.second)
    }

    /// One Adam update with bias correction. Gradient layout must match the
    /// parameter layout.
    pub fn adam_step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        debug_assert!(params.same_layout(grads), "gradient layout mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("aligned layouts").data();
            let m = self.first.get_mut(name).expect("aligned layouts").data_mut();
            let v = self.second.get_mut(name).expect("aligned layouts").data_mut();
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Plain gradient descent; moments untouched.
    pub fn sgd_step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        debug_assert!(params.same_layout(grads), "gradient layout mismatch");
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("aligned layouts").data();
            for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }

    pub fn apply(
        &mut self,
        kind: OptimizerKind,
        params: &mut ParameterSet,
        grads: &ParameterSet,
        lr: f64,
    ) {
        match kind {
            OptimizerKind::Adam => self.adam_step(params, grads, lr),
            OptimizerKind::Sgd => self.sgd_step(params, grads, lr),
        }
    }
}

/// initial_lr * factor^floor(epoch / period). Evaluated by dividing through
/// the reciprocal so decade factors land on exact decimal literals: with
/// factor 0.1, epoch 600 maps 1e-3 to exactly 1e-5.
pub fn step_decay_lr(initial_lr: f64, factor: f64, epoch: u64, period: u64) -> f64 {
    let steps = (epoch / period) as i32;
    initial_lr / (1.0 / factor).powi(steps)
}
