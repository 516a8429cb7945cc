//! Classifier heads: a linear head trained with masked cross-entropy and a
//! gradient-free nearest-mean classifier. Also the per-class feature
//! statistics used for pseudo-feature alignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_nt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Nmc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `C × D`
    pub weight: Tensor,
    /// `C`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Highest score among `candidates`, ties to the lower class id.
fn argmax_among(scores: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in candidates {
        match best {
            Some(b) if scores[c] < scores[b] || (scores[c] == scores[b] && c > b) => {}
            _ => best = Some(c),
        }
    }
    best
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        LinearHead {
            weight: Tensor::uniform(&[classes, dim], 1.0 / (dim as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let (w, b) = (self.weight.clone(), self.bias.clone());
        if trainable {
            HeadVars {
                weight: tape.leaf(w),
                bias: tape.leaf(b),
            }
        } else {
            HeadVars {
                weight: tape.constant(w),
                bias: tape.constant(b),
            }
        }
    }

    /// `1 × C` logits for a `1 × D` feature.
    pub fn logits(tape: &mut Tape, vars: &HeadVars, feature: Var) -> Result<Var> {
        let z = tape.matmul_nt(feature, vars.weight)?;
        tape.add_row(z, vars.bias)
    }

    /// Same arithmetic as [`LinearHead::logits`] without a tape.
    pub fn logits_value(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let (c, d) = (self.classes(), self.dim());
        if feature.len() != d {
            return Err(Error::dim("linear head", format!("feature {} vs D={d}", feature.len())));
        }
        let mut out = vec![0.0; c];
        matmul_nt_acc(feature, self.weight.data(), &mut out, 1, d, c);
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        Ok(out)
    }

    pub fn predict(&self, feature: &[f64], candidates: &[usize]) -> Result<usize> {
        let z = self.logits_value(feature)?;
        if candidates.iter().any(|&c| c >= z.len()) {
            return Err(Error::invalid("candidate class out of range"));
        }
        argmax_among(&z, candidates).ok_or_else(|| Error::invalid("no candidate classes"))
    }
}

/// Nearest-mean classifier. Means are `sum / count`, i.e. exactly the
/// running mean of the features fitted so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NmcHead {
    pub sums: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

impl NmcHead {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fit(&mut self, features: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::dim("nmc_fit", format!("{} features vs {} labels", features.len(), labels.len())));
        }
        for (f, &y) in features.iter().zip(labels) {
            let sum = self.sums.entry(y).or_insert_with(|| vec![0.0; f.len()]);
            if sum.len() != f.len() {
                return Err(Error::dim("nmc_fit", "feature width changed"));
            }
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
            }
            *self.counts.entry(y).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> Option<Vec<f64>> {
        let n = *self.counts.get(&class)? as f64;
        Some(self.sums[&class].iter().map(|s| s / n).collect())
    }

    /// Nearest fitted mean among `candidates` (all fitted classes when
    /// `None`); ties to the lower class id.
    pub fn predict(&self, feature: &[f64], candidates: Option<&[usize]>) -> Result<usize> {
        let pool: Vec<usize> = match candidates {
            Some(c) => {
                let mut c: Vec<usize> = c.iter().copied().filter(|k| self.counts.contains_key(k)).collect();
                c.sort_unstable();
                c
            }
            None => self.counts.keys().copied().collect(),
        };
        let mut best: Option<(f64, usize)> = None;
        for c in pool {
            let mean = self.mean(c).expect("fitted");
            if mean.len() != feature.len() {
                return Err(Error::dim("nmc_predict", format!("feature {} vs mean {}", feature.len(), mean.len())));
            }
            let d: f64 = mean.iter().zip(feature).map(|(m, x)| (m - x) * (m - x)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map(|(_, c)| c)
            .ok_or_else(|| Error::invalid("nmc_predict before any class was fitted"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: Vec<f64>,
    /// Population variance per dimension.
    pub var: Vec<f64>,
    pub count: usize,
}

impl ClassStats {
    pub fn from_features(features: &[&[f64]]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::invalid("class statistics need at least one feature"));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(*f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(*f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        Ok(ClassStats { mean, var, count: n })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapOptions {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TapOptions {
    fn default() -> Self {
        TapOptions {
            samples_per_class: 64,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Retrains the linear head on Gaussian pseudo-features drawn from the
/// stored statistics of every seen class, with all seen classes active.
pub fn tap_align<R: Rng + ?Sized>(
    head: &LinearHead,
    stats: &BTreeMap<usize, ClassStats>,
    seen: &[usize],
    opts: &TapOptions,
    rng: &mut R,
) -> Result<LinearHead> {
    if let Some(c) = seen.iter().find(|c| !stats.contains_key(c)) {
        return Err(Error::invalid(format!("no feature statistics for class {c}")));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut active = seen.to_vec();
    active.sort_unstable();
    let mut pseudo: Vec<(Vec<f64>, usize)> = Vec::with_capacity(active.len() * opts.samples_per_class);
    for &c in &active {
        for _ in 0..opts.samples_per_class {
            pseudo.push((stats[&c].sample(rng), c));
        }
    }

    let mut out = head.clone();
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..pseudo.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let vars = out.register(&mut tape, true);
            let mark = tape.len();
            for &i in batch {
                let (f, y) = &pseudo[i];
                let fv = tape.constant(Tensor::new(&[1, f.len()], f.clone())?);
                let z = LinearHead::logits(&mut tape, &vars, fv)?;
                let l = tape.masked_cross_entropy(z, *y, &active)?;
                let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                tape.backward(l)?;
                tape.truncate(mark);
            }
            let gw = tape.grad(vars.weight).expect("leaf").to_vec();
            let gb = tape.grad(vars.bias).expect("leaf").to_vec();
            adam.tick();
            adam.update("head.weight", out.weight.data_mut(), &gw, None, opts.lr)?;
            adam.update("head.bias", out.bias.data_mut(), &gb, None, opts.lr)?;
        }
    }
    Ok(out)
}
