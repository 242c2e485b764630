use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::{ParameterTree, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Frozen parameters must not appear in `grads`.
pub fn adam_step(params: &mut ParameterTree, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for name in grads.names() {
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::Alignment(format!("gradient for unknown parameter {name}")))?;
        if entry.frozen {
            return Err(Error::Alignment(format!("gradient for frozen parameter {name}")));
        }
        let gshape = grads.shape(name).unwrap_or_default();
        if entry.tensor.shape() != gshape {
            return Err(Error::Alignment(format!(
                "{name}: parameter shape {:?}, gradient shape {gshape:?}",
                entry.tensor.shape()
            )));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for name in grads.names() {
        let g = grads.get(name).expect("listed gradient");
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            let m_new = beta1 * *mv as f64 + (1.0 - beta1) * gv;
            let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}
