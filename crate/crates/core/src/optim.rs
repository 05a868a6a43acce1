//! Adam with per-group state so a group (e.g. a freshly initialized head) can be reset
//! without touching the moments of the others.

use serde::{Deserialize, Serialize};

use crate::network::{Group, Parameters};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub groups: [GroupState<T>; 3],
}

fn index(g: Group) -> usize {
    match g {
        Group::Backbone => 0,
        Group::SegHead => 1,
        Group::ContrastiveHead => 2,
    }
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            groups: Default::default(),
        }
    }

    pub fn group(&self, g: Group) -> &GroupState<T> {
        &self.groups[index(g)]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut GroupState<T> {
        &mut self.groups[index(g)]
    }

    pub fn reset_group(&mut self, g: Group) {
        self.groups[index(g)] = GroupState::default();
    }

    /// One bias-corrected Adam update of the listed groups from their accumulated gradients.
    pub fn step(&mut self, params: &mut Parameters<T>, groups: &[Group]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        for &g in groups {
            let state = &mut self.groups[index(g)];
            let mut ps = params.group_params_mut(g);
            if state.m.len() != ps.len() {
                state.m = ps.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
                state.v = state.m.clone();
                state.step = 0;
            }
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
            let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
            let step_size = T::from_f64_lossy(learning_rate / bc1);
            let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
            let eps = T::from_f64_lossy(eps);
            for ((p, m), v) in ps.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
                for (((w, g), m), v) in p
                    .value
                    .iter_mut()
                    .zip(&p.grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = b1 * *m + one_b1 * *g;
                    *v = b2 * *v + one_b2 * *g * *g;
                    *w -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
                }
            }
        }
    }
}
