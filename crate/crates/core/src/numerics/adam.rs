use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::element::Element;
use super::store::ParameterStore;
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<F> {
    pub m: BTreeMap<String, Vec<F>>,
    pub v: BTreeMap<String, Vec<F>>,
    pub t: u64,
}

impl<F: Element> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter; clears gradients.
pub fn adam_step<F: Element>(
    store: &mut ParameterStore<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some((name, _)) = store
        .iter()
        .find(|(_, t)| t.requires_grad && t.grad.is_none())
    {
        return Err(Error::Training(format!("parameter {name} has no gradient")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in store.iter_mut() {
        if !param.requires_grad {
            continue;
        }
        let grad = param.grad.take().expect("checked above");
        let n = grad.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        for (i, w) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i].f64();
            let mi = cfg.beta1 * m[i].f64() + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i].f64() + (1.0 - cfg.beta2) * g * g;
            m[i] = F::c(mi);
            v[i] = F::c(vi);
            let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *w = F::c(w.f64() - step);
        }
    }
    Ok(())
}
