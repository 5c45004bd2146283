use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimFamily {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters and learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub family: OptimFamily,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Linear ramp over this many epochs before the milestone schedule.
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            family: OptimFamily::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            milestones: vec![150, 225],
            gamma: 0.1,
            warmup_epochs: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimSpec {
    pub fn adam(lr: f64) -> Self {
        OptimSpec {
            family: OptimFamily::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("{what}: {m}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("decay factor must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay must be nonnegative".into());
        }
        if self.nesterov && self.momentum == 0.0 && self.family == OptimFamily::Sgd {
            return bad("Nesterov momentum needs a nonzero momentum".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        Ok(())
    }

    /// Rate for iteration `iter` (0-based) of `epoch` (0-based) with
    /// `per_epoch` iterations per epoch.
    pub fn lr_at(&self, epoch: usize, iter: usize, per_epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let base = self.lr * self.gamma.powi(k as i32);
        if epoch < self.warmup_epochs {
            let done = (epoch * per_epoch + iter + 1) as f64;
            base * done / (self.warmup_epochs * per_epoch) as f64
        } else {
            base
        }
    }
}

/// Per-parameter optimizer state for one component.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    spec: OptimSpec,
    step: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    first: Vec<Tensor>,
    /// Second moment (Adam only).
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(spec: OptimSpec, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.values().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let second = if spec.family == OptimFamily::Adam {
            zeros(params)
        } else {
            Vec::new()
        };
        Optimizer {
            first: zeros(params),
            second,
            spec,
            step: 0,
        }
    }

    pub fn spec(&self) -> &OptimSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with rate `lr`. Weight decay is added to the
    /// gradient before the momentum or moment updates.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let s = &self.spec;
        let (lr, wd) = (lr as f32, s.weight_decay as f32);
        match s.family {
            OptimFamily::Sgd => {
                let mu = s.momentum as f32;
                let first_step = self.step == 1;
                for ((p, g), buf) in params.values_mut().iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                        let d = gi + wd * *w;
                        if mu == 0.0 {
                            *w -= lr * d;
                            continue;
                        }
                        *b = if first_step { d } else { mu * *b + d };
                        let upd = if s.nesterov { d + mu * *b } else { *b };
                        *w -= lr * upd;
                    }
                }
            }
            OptimFamily::Adam => {
                let (b1, b2, eps) = (s.beta1 as f32, s.beta2 as f32, s.eps as f32);
                let c1 = 1.0 - (s.beta1).powi(self.step as i32);
                let c2 = 1.0 - (s.beta2).powi(self.step as i32);
                let step_size = (lr as f64 / c1) as f32;
                let c2_sqrt = c2.sqrt() as f32;
                for (((p, g), m), v) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = gi + wd * *w;
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
                    }
                }
            }
        }
    }

    /// Buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = names
            .iter()
            .zip(&self.first)
            .map(|(n, t)| (format!("first/{n}"), t.clone()))
            .collect();
        out.extend(names.iter().zip(&self.second).map(|(n, t)| (format!("second/{n}"), t.clone())));
        out
    }

    pub fn load_state(&mut self, names: &[String], step: u64, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let mut take = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = map
                .remove(&key)
                .ok_or_else(|| Error::invalid(format!("optimizer state is missing `{key}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::invalid(format!("optimizer state `{key}` has the wrong shape")));
            }
            Ok(t)
        };
        let first = names
            .iter()
            .zip(&self.first)
            .map(|(n, t)| take(format!("first/{n}"), t))
            .collect::<Result<Vec<_>>>()?;
        let second = names
            .iter()
            .zip(&self.second)
            .map(|(n, t)| take(format!("second/{n}"), t))
            .collect::<Result<Vec<_>>>()?;
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }
}
