use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update of a single parameter buffer.
///
/// `t` is the step number after incrementing (first step is 1).
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::contract(format!(
            "adam: param {} / grad {} / m {} / v {} lengths differ",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_| Vec::new();
        let mut s = Self {
            config,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        };
        for id in store.ids() {
            let n = store.get(id).numel();
            s.m[id.index()] = vec![0.0; n];
            s.v[id.index()] = vec![0.0; n];
        }
        s
    }

    /// Applies one update from the gradient slots of `store`.
    ///
    /// Parameters without a gradient slot are treated as having zero gradient,
    /// so their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "adam state tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let grad = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            adam_update(
                t.data_mut(),
                &grad,
                &mut self.m[id.index()],
                &mut self.v[id.index()],
                self.t,
                &self.config,
            )?;
        }
        Ok(())
    }

    pub fn to_stored(&self, store: &ParamStore) -> StoredAdam {
        let named = |bufs: &Vec<Vec<f64>>| {
            store
                .ids()
                .map(|id| (store.name(id).to_string(), bufs[id.index()].clone()))
                .collect()
        };
        StoredAdam {
            config: self.config,
            t: self.t,
            m: named(&self.m),
            v: named(&self.v),
        }
    }

    pub fn from_stored(stored: &StoredAdam, store: &ParamStore) -> Result<Self> {
        let mut s = Self::new(store, stored.config);
        s.t = stored.t;
        for id in store.ids() {
            let name = store.name(id);
            let n = store.get(id).numel();
            match (stored.m.get(name), stored.v.get(name)) {
                (Some(m), Some(v)) if m.len() == n && v.len() == n => {
                    s.m[id.index()] = m.clone();
                    s.v[id.index()] = v.clone();
                }
                _ => {
                    return Err(Error::contract(format!(
                        "optimizer state for {name} is missing or mis-sized"
                    )))
                }
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredAdam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}
