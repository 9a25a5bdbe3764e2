//! Optimizers over a [`ParamStore`].
//!
//! Updates are applied to a name-filtered subset of parameters so the
//! alternating adversarial steps can share one gradient sweep: the generator
//! step backpropagates through the discriminator but only touches `g.*` /
//! `f.*` / `cls.*` tensors. Moment state is tracked per parameter together
//! with its own step counter, so parameters updated on different schedules
//! keep correct bias correction and checkpoints resume bit-exactly.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone)]
struct AdamState {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: Vec::new() }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f32>>], keep: &dyn Fn(&str) -> bool) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for id in store.ids_by_name().collect::<Vec<_>>() {
            let Some(grad) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            if !keep(store.name(id)) {
                continue;
            }
            let slot = &mut self.state[id.index()];
            let st = slot.get_or_insert_with(|| AdamState {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let b1 = self.beta1 as f32;
            let b2 = self.beta2 as f32;
            let bias1 = 1.0 - (self.beta1).powi(st.t as i32);
            let bias2 = 1.0 - (self.beta2).powi(st.t as i32);
            let lr = self.lr;
            let eps = self.eps;
            let param = store.get_mut(id);
            for ((p, g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m as f64 / bias1;
                let vhat = *v as f64 / bias2;
                *p -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<ArrayD<f32>>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f32>>], keep: &dyn Fn(&str) -> bool) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in store.ids_by_name().collect::<Vec<_>>() {
            let Some(grad) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            if !keep(store.name(id)) {
                continue;
            }
            let vel = self.velocity[id.index()]
                .get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let mu = self.momentum as f32;
            let lr = self.lr as f32;
            let param = store.get_mut(id);
            for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    SgdMomentum(SgdMomentum),
}

impl Optimizer {
    /// Build from a config string (`adam` or `sgd-momentum`).
    pub fn from_kind(kind: &str, lr: f64) -> Result<Self> {
        match kind {
            "adam" => Ok(Self::Adam(Adam::new(lr))),
            "sgd-momentum" => Ok(Self::SgdMomentum(SgdMomentum::new(lr, 0.9))),
            other => Err(Error::invalid(format!(
                "unknown optimizer {other:?} (expected \"adam\" or \"sgd-momentum\")"
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Adam(_) => "adam",
            Self::SgdMomentum(_) => "sgd-momentum",
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(a) => a.lr,
            Self::SgdMomentum(s) => s.lr,
        }
    }

    /// Apply one update to every parameter that has a gradient and whose
    /// name passes `keep`.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f32>>],
        keep: F,
    ) {
        match self {
            Self::Adam(a) => a.step(store, grads, &keep),
            Self::SgdMomentum(s) => s.step(store, grads, &keep),
        }
    }

    /// Update every parameter that has a gradient.
    pub fn step_all(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f32>>]) {
        self.step(store, grads, |_| true);
    }

    /// Flatten internal state to named tensors (for checkpoints). Step
    /// counters are stored as single-element tensors.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        match self {
            Self::Adam(a) => {
                for id in store.ids_by_name() {
                    let Some(st) = a.state.get(id.index()).and_then(|s| s.as_ref()) else {
                        continue;
                    };
                    let name = store.name(id);
                    out.push((format!("opt.m.{name}"), st.m.clone()));
                    out.push((format!("opt.v.{name}"), st.v.clone()));
                    out.push((
                        format!("opt.t.{name}"),
                        ArrayD::from_elem(ndarray::IxDyn(&[1]), st.t as f32),
                    ));
                }
            }
            Self::SgdMomentum(s) => {
                for id in store.ids_by_name() {
                    let Some(vel) = s.velocity.get(id.index()).and_then(|v| v.as_ref()) else {
                        continue;
                    };
                    out.push((format!("opt.vel.{}", store.name(id)), vel.clone()));
                }
            }
        }
        out
    }

    /// Restore state produced by [`state_tensors`](Self::state_tensors).
    pub fn load_state(
        &mut self,
        store: &ParamStore,
        tensors: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<()> {
        match self {
            Self::Adam(a) => {
                a.state = vec![None; store.len()];
                for id in store.ids_by_name() {
                    let name = store.name(id);
                    let (Some(m), Some(v), Some(t)) = (
                        tensors.get(&format!("opt.m.{name}")),
                        tensors.get(&format!("opt.v.{name}")),
                        tensors.get(&format!("opt.t.{name}")),
                    ) else {
                        continue;
                    };
                    if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                        return Err(Error::invalid(format!(
                            "optimizer state for {name:?} has mismatched shape"
                        )));
                    }
                    a.state[id.index()] = Some(AdamState {
                        m: m.clone(),
                        v: v.clone(),
                        t: t.iter().next().copied().unwrap_or(0.0) as u64,
                    });
                }
            }
            Self::SgdMomentum(s) => {
                s.velocity = vec![None; store.len()];
                for id in store.ids_by_name() {
                    let name = store.name(id);
                    let Some(vel) = tensors.get(&format!("opt.vel.{name}")) else { continue };
                    if vel.shape() != store.get(id).shape() {
                        return Err(Error::invalid(format!(
                            "optimizer state for {name:?} has mismatched shape"
                        )));
                    }
                    s.velocity[id.index()] = Some(vel.clone());
                }
            }
        }
        Ok(())
    }
}

/// True when the name starts with any of the given prefixes.
pub fn name_has_prefix<'a>(prefixes: &'a [&'a str]) -> impl Fn(&str) -> bool + 'a {
    move |name| prefixes.iter().any(|p| name.starts_with(p))
}
