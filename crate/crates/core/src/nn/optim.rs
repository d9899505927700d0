//! Optimizers. Parameter lists are passed in a fixed order on every call;
//! slot `i` of the state always belongs to parameter `i`.

use super::param::Param;
use crate::error::{Error, Result};

/// Serializable optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: String,
    pub step: u64,
    pub slots: Vec<(String, Vec<f32>)>,
}

pub trait Optimizer: Send {
    /// Apply one update using the gradients currently stored in `params`.
    fn step(&mut self, params: &mut [&mut Param], lr: f32);
    fn export_state(&self) -> OptimState;
    fn import_state(&mut self, state: OptimState) -> Result<()>;
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    fn ensure_slots(&mut self, params: &[&mut Param]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        self.ensure_slots(params);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p.value[j] -= lr * (update + self.weight_decay * p.value[j]);
            }
        }
    }

    fn export_state(&self) -> OptimState {
        let mut slots = Vec::new();
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            slots.push((format!("m.{i}"), m.clone()));
            slots.push((format!("v.{i}"), v.clone()));
        }
        OptimState { kind: "adamw".into(), step: self.step, slots }
    }

    fn import_state(&mut self, state: OptimState) -> Result<()> {
        if state.kind != "adamw" || state.slots.len() % 2 != 0 {
            return Err(Error::Checkpoint(format!("optimizer state of kind {:?} is not adamw", state.kind)));
        }
        self.step = state.step;
        self.first.clear();
        self.second.clear();
        for pair in state.slots.chunks_exact(2) {
            self.first.push(pair[0].1.clone());
            self.second.push(pair[1].1.clone());
        }
        Ok(())
    }
}

/// Plain SGD with momentum and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    step: u64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, step: 0, velocity: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            for j in 0..p.value.len() {
                vel[j] = self.momentum * vel[j] + p.grad[j];
                p.value[j] -= lr * (vel[j] + self.weight_decay * p.value[j]);
            }
        }
    }

    fn export_state(&self) -> OptimState {
        let slots = self.velocity.iter().enumerate().map(|(i, v)| (format!("velocity.{i}"), v.clone())).collect();
        OptimState { kind: "sgd".into(), step: self.step, slots }
    }

    fn import_state(&mut self, state: OptimState) -> Result<()> {
        if state.kind != "sgd" {
            return Err(Error::Checkpoint(format!("optimizer state of kind {:?} is not sgd", state.kind)));
        }
        self.step = state.step;
        self.velocity = state.slots.into_iter().map(|(_, v)| v).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam step has magnitude lr·sign(g).
        let mut p = Param::zeros("w", &[2]);
        p.value = vec![1.0, -1.0];
        p.grad = vec![0.5, -3.0];
        let mut opt = AdamW::new(0.0);
        opt.step(&mut [&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = Param::zeros("w", &[3]);
        p.value = vec![1.0, 2.0, 3.0];
        p.grad = vec![1.0, 1.0, 1.0];
        let mut opt = AdamW::new(0.01);
        opt.step(&mut [&mut p], 0.0);
        assert_eq!(p.value, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn state_round_trip() {
        let mut p = Param::zeros("w", &[2]);
        p.grad = vec![0.1, 0.2];
        let mut opt = AdamW::new(0.01);
        opt.step(&mut [&mut p], 0.01);
        let mut other = AdamW::new(0.01);
        other.import_state(opt.export_state()).unwrap();
        assert_eq!(other.export_state(), opt.export_state());
        assert!(Sgd::new(0.9, 0.0).import_state(opt.export_state()).is_err());
    }
}
