//! Quadratic weight regularizers anchored at the previous task boundary.
//!
//! Parameters are handled as one flat vector over every trainable tensor,
//! in a fixed order chosen by the caller. Penalties and their gradients are
//! closed-form, so they are added to the tape gradients directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    Ewc,
    Si,
}

impl RegKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Ewc => "ewc",
            RegKind::Si => "si",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegState {
    pub kind: RegKind,
    pub lambda: f64,
    pub xi: f64,
    /// θ*, set at the first task boundary.
    pub anchor: Option<Vec<f64>>,
    pub fisher: Vec<f64>,
    pub tasks_merged: usize,
    /// SI path integral for the current task.
    pub omega: Vec<f64>,
    /// SI consolidated importance.
    pub big_omega: Vec<f64>,
    /// Parameters at the start of the current task (SI).
    pub task_start: Option<Vec<f64>>,
}

impl RegState {
    pub fn new(kind: RegKind, lambda: f64, xi: f64, n: usize) -> Self {
        let buf = |on: bool| if on { vec![0.0; n] } else { Vec::new() };
        RegState {
            kind,
            lambda,
            xi,
            anchor: None,
            fisher: buf(kind == RegKind::Ewc),
            tasks_merged: 0,
            omega: buf(kind == RegKind::Si),
            big_omega: buf(kind == RegKind::Si),
            task_start: None,
        }
    }

    /// True when the penalty can affect training at all.
    pub fn active(&self) -> bool {
        self.kind != RegKind::None && self.lambda != 0.0 && self.anchor.is_some()
    }

    /// Merges a task's Fisher diagonal as a running mean and snapshots θ*.
    pub fn ewc_update_fisher(&mut self, task_fisher: &[f64], params: &[f64]) -> Result<()> {
        check_len("ewc_update_fisher", self.fisher.len(), task_fisher.len())?;
        check_len("ewc_update_fisher", self.fisher.len(), params.len())?;
        let k = self.tasks_merged as f64;
        for (f, t) in self.fisher.iter_mut().zip(task_fisher) {
            *f = (*f * k + t) / (k + 1.0);
        }
        self.tasks_merged += 1;
        self.anchor = Some(params.to_vec());
        Ok(())
    }

    /// Records the parameters at the start of a task; the first call wins
    /// until the next consolidation.
    pub fn si_begin_task(&mut self, params: &[f64]) {
        if self.task_start.is_none() {
            self.task_start = Some(params.to_vec());
        }
    }

    /// `ω_i += −g_i·Δθ_i` for one optimizer step.
    pub fn si_accumulate(&mut self, grads: &[f64], deltas: &[f64]) -> Result<()> {
        check_len("si_accumulate", self.omega.len(), grads.len())?;
        check_len("si_accumulate", self.omega.len(), deltas.len())?;
        for ((w, g), d) in self.omega.iter_mut().zip(grads).zip(deltas) {
            *w -= g * d;
        }
        Ok(())
    }

    /// `Ω_i += ω_i / ((Δθ_i^task)² + ξ)`, then resets ω and moves the anchor.
    /// Negative path contributions are clipped so Ω stays non-negative.
    pub fn si_consolidate(&mut self, params: &[f64]) -> Result<()> {
        check_len("si_consolidate", self.big_omega.len(), params.len())?;
        let start = self.task_start.take().unwrap_or_else(|| params.to_vec());
        for i in 0..params.len() {
            let d = params[i] - start[i];
            self.big_omega[i] += (self.omega[i] / (d * d + self.xi)).max(0.0);
            self.omega[i] = 0.0;
        }
        self.tasks_merged += 1;
        self.anchor = Some(params.to_vec());
        Ok(())
    }

    pub fn penalty(&self, params: &[f64]) -> Result<f64> {
        match self.kind {
            RegKind::None => Ok(0.0),
            RegKind::Ewc => ewc_penalty(self, params),
            RegKind::Si => si_penalty(self, params),
        }
    }

    /// Gradient of [`RegState::penalty`]; `None` when the penalty is inert.
    pub fn penalty_grad(&self, params: &[f64]) -> Result<Option<Vec<f64>>> {
        if !self.active() {
            return Ok(None);
        }
        let anchor = self.anchor.as_ref().expect("active");
        check_len("penalty_grad", anchor.len(), params.len())?;
        let (weights, c) = match self.kind {
            RegKind::Ewc => (&self.fisher, self.lambda),
            RegKind::Si => (&self.big_omega, 2.0 * self.lambda),
            RegKind::None => return Ok(None),
        };
        Ok(Some(
            params
                .iter()
                .zip(anchor)
                .zip(weights)
                .map(|((p, a), w)| c * w * (p - a))
                .collect(),
        ))
    }
}

fn check_len(op: &'static str, want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::dim(op, format!("expected {want} entries, got {got}")));
    }
    Ok(())
}

fn weighted_sq(weights: &[f64], params: &[f64], anchor: &[f64]) -> f64 {
    weights
        .iter()
        .zip(params)
        .zip(anchor)
        .map(|((w, p), a)| w * (p - a) * (p - a))
        .sum()
}

/// `(λ/2)·Σ F_i(θ_i − θ*_i)²`; zero before the first boundary.
pub fn ewc_penalty(reg: &RegState, params: &[f64]) -> Result<f64> {
    let Some(anchor) = &reg.anchor else { return Ok(0.0) };
    check_len("ewc_penalty", anchor.len(), params.len())?;
    Ok(0.5 * reg.lambda * weighted_sq(&reg.fisher, params, anchor))
}

/// `λ·Σ Ω_i(θ_i − θ*_i)²`; zero before the first boundary.
pub fn si_penalty(reg: &RegState, params: &[f64]) -> Result<f64> {
    let Some(anchor) = &reg.anchor else { return Ok(0.0) };
    check_len("si_penalty", anchor.len(), params.len())?;
    Ok(reg.lambda * weighted_sq(&reg.big_omega, params, anchor))
}

/// Diagonal of the Fisher information of the masked predictive
/// distribution, averaged over `n_samples` inputs:
/// `mean_x Σ_{c∈active} p_c(x)·(∇_θ log p_c(x))²`.
///
/// `logits_fn(tape, leaves, i)` builds the logits of sample `i` on a tape
/// whose leaves are `params`; one backward pass is made per active class
/// on the shared forward.
pub fn fisher_diagonal<F>(params: &[Tensor], n_samples: usize, active: &[usize], mut logits_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &[Var], usize) -> Result<Var>,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut fisher = vec![0.0; total];
    if n_samples == 0 {
        return Ok(fisher);
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let base = tape.len();
    for i in 0..n_samples {
        let logits = logits_fn(&mut tape, &leaves, i)?;
        let z = tape.value(logits).data();
        let max = active.iter().map(|&c| z[c]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = active.iter().map(|&c| (z[c] - max).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        let mark = tape.len();
        for (k, &c) in active.iter().enumerate() {
            let p = exps[k] / zsum;
            tape.zero_grad();
            let nll = tape.masked_cross_entropy(logits, c, active)?;
            tape.backward(nll)?;
            let mut off = 0;
            for &leaf in &leaves {
                let g = tape.grad(leaf).expect("leaf");
                for (f, gi) in fisher[off..off + g.len()].iter_mut().zip(g) {
                    *f += p * gi * gi;
                }
                off += g.len();
            }
            tape.truncate(mark);
        }
        tape.truncate(base);
    }
    fisher.iter_mut().for_each(|f| *f /= n_samples as f64);
    Ok(fisher)
}
