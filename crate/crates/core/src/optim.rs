//! Parameter updates: SGD and Adam with decoupled weight decay, global-norm
//! clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero over `total_steps`, after
    /// `warmup_steps` of linear warm-up.
    Linear { warmup_steps: usize, total_steps: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f32, step: usize) -> f32 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Linear {
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    base * (step + 1) as f32 / warmup_steps as f32
                } else if total_steps <= warmup_steps {
                    base
                } else {
                    let left = total_steps.saturating_sub(step) as f32;
                    base * left / (total_steps - warmup_steps) as f32
                }
            }
        }
    }
}

fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.contains("bias") || leaf.contains("gain"))
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. Parameters must be
    /// passed in the same order on every call; tensors without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr: f32) {
        self.steps += 1;
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), Default::default);
        }
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (slot, (name, t)) in params.iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else { continue };
            let decay = if decays(name) { c.weight_decay } else { 0.0 };
            let data = t.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= lr * (g + decay * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = &mut self.moments[slot];
                    if m.len() != grad.len() {
                        *m = vec![0.0; grad.len()];
                        *v = vec![0.0; grad.len()];
                    }
                    for i in 0..grad.len() {
                        let g = grad[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] -= lr * (m_hat / (v_hat.sqrt() + c.epsilon) + decay * data[i]);
                    }
                }
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[(String, &mut Tensor)]) -> f32 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Tensor)], max_norm: f32) -> f32 {
    let norm = grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * scale - v).collect::<Vec<_>>()) {
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}
