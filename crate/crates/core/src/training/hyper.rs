use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub mask_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 200,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            batch_size: 32,
            seq_len: 128,
            mask_rate: 0.15,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate must be in (0, 1), got {}", self.mask_rate));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must be in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return bad(format!(
                "batch_size {} / seq_len {} too small",
                self.batch_size, self.seq_len
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, hyper: &TrainHyper) -> f64 {
    let (w, total) = (hyper.warmup_steps, hyper.total_steps);
    let step = step.min(total);
    if step < w {
        hyper.lr_peak * step as f64 / w as f64
    } else if total == w {
        hyper.lr_peak
    } else {
        hyper.lr_peak * (total - step) as f64 / (total - w) as f64
    }
}
