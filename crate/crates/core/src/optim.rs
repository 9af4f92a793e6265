//! Decoupled-weight-decay Adam and an exponential moving average of weights.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&OptimConfig> for AdamParams {
    fn from(c: &OptimConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Tensor,
    v: Tensor,
    /// Per-parameter step count, so parameters added by growth get their own
    /// bias correction.
    t: u64,
}

/// AdamW over the trainable parameters of a [`ParamStore`]. Moment slots are
/// created lazily the first time a parameter receives a gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub params: AdamParams,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            slots: BTreeMap::new(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        let p = self.params;
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let slot = match self.slots.get_mut(name) {
                Some(s) => s,
                None => self.slots.entry(name.clone()).or_insert(Slot {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    t: 0,
                }),
            };
            slot.t += 1;
            slot.m = ((&slot.m * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            slot.v = ((&slot.v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let bc1 = 1.0 - p.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - p.beta2.powi(slot.t as i32);
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            let current = var.as_tensor().detach();
            let decayed = (&current * (1.0 - p.lr * p.weight_decay))?;
            var.set(&(decayed - (update * p.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `{prefix}.m.{name}` / `{prefix}.v.{name}`.
    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.slots {
            out.insert(format!("{prefix}.m.{name}"), s.m.clone());
            out.insert(format!("{prefix}.v.{name}"), s.v.clone());
        }
        out
    }

    pub fn step_counts(&self) -> BTreeMap<String, u64> {
        self.slots.iter().map(|(n, s)| (n.clone(), s.t)).collect()
    }

    /// Rebuilds slots from saved moments and step counts.
    pub fn restore(
        params: AdamParams,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
        steps: &BTreeMap<String, u64>,
    ) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, &t) in steps {
            let m = tensors.get(&format!("{prefix}.m.{name}"));
            let v = tensors.get(&format!("{prefix}.v.{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                slots.insert(
                    name.clone(),
                    Slot {
                        m: m.clone(),
                        v: v.clone(),
                        t,
                    },
                );
            } else {
                return Err(crate::Error::Checkpoint(format!("missing optimizer moments for {name}")));
            }
        }
        Ok(Self { params, slots })
    }
}

/// Decay used at EMA step `t` (0-based): optionally ramped as
/// `min(decay, (1 + t) / (10 + t))` so early averages track the weights.
pub fn ema_beta(decay: f64, t: u64, rampup: bool) -> f64 {
    if rampup {
        decay.min((1.0 + t as f64) / (10.0 + t as f64))
    } else {
        decay
    }
}

/// `ema ← src + β (ema − src)` for trainable parameters; parameters missing
/// from `ema` are copied in.
pub fn ema_update(ema: &mut ParamStore, src: &ParamStore, beta: f64) -> Result<()> {
    for (name, var) in src.iter() {
        let value = var.as_tensor();
        match ema.get(name) {
            Some(e) if !src.is_frozen(name) => {
                let cur = e.as_tensor().detach();
                let next = (value.detach() + ((cur - value.detach())? * beta)?)?;
                e.set(&next)?;
            }
            Some(_) => {}
            None => {
                ema.insert(name, &value.detach())?;
                if src.is_frozen(name) {
                    ema.freeze(name);
                }
            }
        }
    }
    Ok(())
}
