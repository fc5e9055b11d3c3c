use gaitforge_tensor::{Element, Tensor};

use crate::error::{config, precondition, Result};
use crate::params::{LrGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::GaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => config(format!("unknown optimizer '{}'", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Cosine floor.
    pub lr_min: f64,
    /// Learning-rate multiplier of the warm-started group.
    pub warm_start_scale: f64,
}

impl OptimizerConfig {
    /// SGD recipe of the convolutional models.
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            weight_decay: 5e-5,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            lr_min: 0.0,
            warm_start_scale: 0.1,
        }
    }

    /// AdamW recipe of the transformer models.
    pub fn adamw() -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamW, lr: 3e-4, weight_decay: 2e-2, lr_min: 3e-5, ..Self::sgd() }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return config(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return config(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return config("weight decay must be >= 0 and momentum in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || !(self.eps > 0.0) {
            return config("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.warm_start_scale > 0.0) {
            return config("warm_start_scale must be positive");
        }
        Ok(())
    }

    pub fn group_scale(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Base => 1.0,
            LrGroup::WarmStart => self.warm_start_scale,
        }
    }

    pub fn describe(&self) -> String {
        match self.kind {
            OptimizerKind::Sgd => {
                format!("optimizer=sgd lr={} momentum={} weight_decay={}", self.lr, self.momentum, self.weight_decay)
            }
            OptimizerKind::AdamW => format!(
                "optimizer=adamw lr={} lr_min={} betas=({}, {}) eps={} weight_decay={}",
                self.lr, self.lr_min, self.betas.0, self.betas.1, self.eps, self.weight_decay
            ),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer state for one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, slots: Vec::new() })
    }

    /// Updates every parameter that has a gradient; parameters without one
    /// are left untouched. `lr` maps a group to its current rate. Returns the
    /// number of parameters updated.
    pub fn step<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Tensor<E>>],
        lr: impl Fn(LrGroup) -> f64,
    ) -> Result<usize> {
        let ids: Vec<_> = store.ids().collect();
        if grads.len() != ids.len() {
            return precondition(format!("{} gradients for {} parameters", grads.len(), ids.len()));
        }
        if grads.iter().all(Option::is_none) {
            return precondition("no parameter has a gradient");
        }
        self.slots.resize_with(ids.len(), Slot::default);
        let c = self.config;
        let mut updated = 0;
        for (id, (grad, slot)) in ids.into_iter().zip(grads.iter().zip(&mut self.slots)) {
            let Some(grad) = grad else { continue };
            let param = store.param_mut(id);
            if grad.shape() != param.value.shape() {
                return precondition(format!("gradient shape {:?} for '{}'", grad.shape(), param.name));
            }
            let rate = lr(param.group);
            let w = param.value.data_mut();
            let g = grad.data();
            if slot.first.is_empty() {
                slot.first = vec![0.0; w.len()];
                if c.kind == OptimizerKind::AdamW {
                    slot.second = vec![0.0; w.len()];
                }
            }
            slot.steps += 1;
            match c.kind {
                OptimizerKind::Sgd => {
                    for i in 0..w.len() {
                        let wi = w[i].to_f64_lossy();
                        let gi = g[i].to_f64_lossy() + c.weight_decay * wi;
                        let buf = c.momentum * slot.first[i] + gi;
                        slot.first[i] = buf;
                        w[i] = E::from_f64_lossy(wi - rate * buf);
                    }
                }
                OptimizerKind::AdamW => {
                    let (b1, b2) = c.betas;
                    let bc1 = 1.0 - b1.powi(slot.steps as i32);
                    let bc2 = 1.0 - b2.powi(slot.steps as i32);
                    for i in 0..w.len() {
                        let gi = g[i].to_f64_lossy();
                        let m = b1 * slot.first[i] + (1.0 - b1) * gi;
                        let v = b2 * slot.second[i] + (1.0 - b2) * gi * gi;
                        slot.first[i] = m;
                        slot.second[i] = v;
                        let wi = w[i].to_f64_lossy() * (1.0 - rate * c.weight_decay);
                        w[i] = E::from_f64_lossy(wi - rate * (m / bc1) / ((v / bc2).sqrt() + c.eps));
                    }
                }
            }
            updated += 1;
        }
        Ok(updated)
    }
}
