use std::collections::BTreeMap;
use std::f64::consts::PI;

use densim_tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, Module};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Fraction of the run spent warming up.
    pub pct_start: f64,
    /// Initial learning rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is the initial one divided by this.
    pub final_div_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            epochs: 30,
            batch_size: 4,
            weight_decay: 1e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pct_start) || self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return Err(Error::Config("invalid one-cycle schedule parameters".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid AdamW moment parameters".into()));
        }
        Ok(())
    }
}

/// One-cycle learning rate with cosine warm-up and cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub peak_step: usize,
    initial: f64,
    min: f64,
}

fn cos_anneal(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) * (1.0 + (PI * frac).cos()) / 2.0
}

impl OneCycle {
    pub fn new(cfg: &OptimizerConfig, total_steps: usize) -> Self {
        let total_steps = total_steps.max(1);
        let peak_step = ((cfg.pct_start * total_steps as f64).round() as usize).min(total_steps - 1);
        let initial = cfg.max_lr / cfg.div_factor;
        Self { max_lr: cfg.max_lr, total_steps, peak_step, initial, min: initial / cfg.final_div_factor }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step == self.peak_step {
            return self.max_lr;
        }
        if step < self.peak_step {
            cos_anneal(self.initial, self.max_lr, step as f64 / self.peak_step as f64)
        } else {
            let span = (self.total_steps - 1 - self.peak_step).max(1) as f64;
            cos_anneal(self.max_lr, self.min, ((step - self.peak_step) as f64 / span).min(1.0))
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every named parameter that has a gradient. Names
    /// not present in `grads` are left bitwise untouched.
    pub fn step<T: Elem>(&mut self, model: &mut Model<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut seen = 0;
        let mut err = None;
        model.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            if g.shape() != p.value.shape() {
                err = Some(Error::Shape(format!("gradient for {} has shape {:?}", p.name, g.shape())));
                return;
            }
            seen += 1;
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for (((w, &gi), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                let gi = Elem::to_f64(gi);
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let wv = Elem::to_f64(*w);
                let updated = wv - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * wv);
                *w = T::from_f64(updated);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != grads.len() {
            return Err(Error::Shape(format!("{} gradients did not match any parameter", grads.len() - seen)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_exactly_at_max() {
        let cfg = OptimizerConfig::default();
        for total in [1, 2, 7, 100, 480] {
            let s = OneCycle::new(&cfg, total);
            let lrs: Vec<f64> = (0..total).map(|i| s.lr(i)).collect();
            let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(max, 1e-4);
            assert_eq!(lrs[s.peak_step], 1e-4);
            assert!(lrs.iter().all(|&v| v > 0.0));
        }
        let s = OneCycle::new(&cfg, 100);
        assert_eq!(s.peak_step, 30);
        assert!((s.lr(0) - 4e-6).abs() < 1e-18);
        assert!((s.lr(99) - 4e-10).abs() < 1e-18);
        for i in 0..30 {
            assert!(s.lr(i) < s.lr(i + 1));
        }
        for i in 30..99 {
            assert!(s.lr(i) > s.lr(i + 1));
        }
    }
}
