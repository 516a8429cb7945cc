//! Adam with named parameter slots and per-call learning rates, so a
//! single optimizer serves the head and prompt groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update. Entries with a `false` mask flag are
/// skipped entirely: parameter and moments stay as they were.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    mask: Option<&[bool]>,
    lr: f64,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::dim("adam_step", format!("{n} params vs {} grads", grads.len())));
    }
    if step == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    let exp = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step
    /// before updating the groups.
    pub fn tick(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn update(&mut self, name: &str, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>, lr: f64) -> Result<()> {
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Moments::zeros(params.len()));
        adam_step(params, grads, slot, mask, lr, &self.config, self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -1.0];
        let mut m = Moments::zeros(2);
        for s in 1..=10 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, None, 0.1, &AdamConfig::default(), s).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut p = vec![1.0];
            let mut m = Moments::zeros(1);
            adam_step(&mut p, &[g], &mut m, None, 0.01, &cfg, 1).unwrap();
            // m̂ = g, v̂ = g², so Δ = −lr·g/(|g|+eps)
            let expect = 1.0 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((p[0] - expect).abs() < 1e-15);
            assert!(((1.0 - p[0]).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_entries_untouched() {
        let mut p = vec![0.0, 0.0];
        let mut m = Moments::zeros(2);
        adam_step(&mut p, &[5.0, 5.0], &mut m, Some(&[true, false]), 0.1, &AdamConfig::default(), 1).unwrap();
        assert!(p[0] < 0.0);
        assert_eq!(p[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(m.m[1], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut m, None, 0.1, &AdamConfig::default(), 1).is_err());
        assert!(adam_step(&mut p, &[1.0], &mut m, None, 0.1, &AdamConfig::default(), 0).is_err());
    }
}
