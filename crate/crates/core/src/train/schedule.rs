use std::f64::consts::PI;

use crate::error::{config, precondition, Result};

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_GRANULARITY: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    MultiStep {
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Half-cosine from the base rate to the floor over `i_max` steps,
    /// updated every `granularity` steps, then held at the floor.
    Cosine {
        i_max: usize,
        granularity: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn multistep(milestones: Vec<usize>, total_steps: usize) -> Self {
        ScheduleConfig { kind: ScheduleKind::MultiStep { milestones, gamma: DEFAULT_GAMMA }, total_steps }
    }

    pub fn cosine(i_max: usize, total_steps: usize) -> Self {
        ScheduleConfig { kind: ScheduleKind::Cosine { i_max, granularity: DEFAULT_GRANULARITY }, total_steps }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScheduleKind::MultiStep { .. } => "multistep",
            ScheduleKind::Cosine { .. } => "cosine",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScheduleKind::MultiStep { milestones, gamma } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return config(format!("milestones must be strictly increasing, got {:?}", milestones));
                }
                if milestones.last().is_some_and(|&m| m >= self.total_steps) {
                    return config(format!(
                        "milestones {:?} must be below total_steps {}",
                        milestones, self.total_steps
                    ));
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return config(format!("gamma must lie in (0, 1], got {}", gamma));
                }
            }
            ScheduleKind::Cosine { i_max, granularity } => {
                if *i_max == 0 || *granularity == 0 {
                    return config("i_max and the update granularity must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` for a group whose rate starts at `base_lr` and,
/// under cosine annealing, bottoms out at `lr_min`.
pub fn lr_at(step: usize, schedule: &ScheduleConfig, base_lr: f64, lr_min: f64) -> Result<f64> {
    if step >= schedule.total_steps {
        return precondition(format!("step {} outside [0, {})", step, schedule.total_steps));
    }
    Ok(match &schedule.kind {
        ScheduleKind::MultiStep { milestones, gamma } => {
            let passed = milestones.iter().filter(|&&m| step >= m).count();
            base_lr * gamma.powi(passed as i32)
        }
        ScheduleKind::Cosine { i_max, granularity } => {
            if step >= *i_max {
                lr_min
            } else {
                let e = (step / granularity * granularity) as f64;
                lr_min + (base_lr - lr_min) * (1.0 + (PI * e / *i_max as f64).cos()) / 2.0
            }
        }
    })
}
