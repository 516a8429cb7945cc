//! Diagnostic metrics over run outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::cosine;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSimilarity {
    /// `100 · mean_i cos(p_i, p_proto)`, in `[−100, 100]`.
    pub value: f64,
    /// The prototype had zero norm; `value` is 0 by definition.
    pub zero_prototype: bool,
}

impl PromptSimilarity {
    pub fn negative(&self) -> bool {
        self.value < 0.0
    }
}

/// Average cosine similarity of each retrieved prompt to their mean, scaled
/// by 100. Zero-norm individual prompts contribute similarity 0.
pub fn prompt_similarity(prompts: &[Vec<f64>]) -> Result<PromptSimilarity> {
    let k = prompts.len();
    if k == 0 {
        return Err(Error::invalid("prompt similarity needs at least one prompt"));
    }
    let d = prompts[0].len();
    if prompts.iter().any(|p| p.len() != d) {
        return Err(Error::dim("prompt_similarity", "prompts differ in length"));
    }
    let mut proto = vec![0.0; d];
    for p in prompts {
        for (a, b) in proto.iter_mut().zip(p) {
            *a += b;
        }
    }
    proto.iter_mut().for_each(|a| *a /= k as f64);
    if proto.iter().all(|&a| a == 0.0) {
        return Ok(PromptSimilarity {
            value: 0.0,
            zero_prototype: true,
        });
    }
    let total: f64 = prompts.iter().map(|p| cosine(p, &proto).unwrap_or(0.0)).sum();
    Ok(PromptSimilarity {
        value: 100.0 * total / k as f64,
        zero_prototype: false,
    })
}

/// `A[t][s]` for `s ≤ t`; cells above the diagonal do not exist.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Test-set size of each task.
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Self {
        AccuracyMatrix {
            rows: Vec::new(),
            test_sizes,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.test_sizes.len()
    }

    /// Appends the row for the next trained task; it must hold exactly one
    /// entry per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 || t >= self.num_tasks() {
            return Err(Error::invalid(format!("row {t} must have {} entries", t + 1)));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("accuracy outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, s: usize) -> Option<f64> {
        self.rows.get(t)?.get(s).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks()
    }
}

/// `A[s][s] − A[T−1][s]`; absent for the last task or an incomplete matrix.
pub fn forgetting(a: &AccuracyMatrix, s: usize) -> Option<f64> {
    let last = a.num_tasks().checked_sub(1)?;
    if s >= last || !a.is_complete() {
        return None;
    }
    Some(a.get(s, s)? - a.get(last, s)?)
}

/// Mean forgetting over tasks `0..T−1`; absent for single-task streams.
pub fn aggregate_forgetting(a: &AccuracyMatrix) -> Option<f64> {
    let n = a.num_tasks().checked_sub(1)?;
    if n == 0 {
        return None;
    }
    let vals: Option<Vec<f64>> = (0..n).map(|s| forgetting(a, s)).collect();
    let vals = vals?;
    Some(vals.iter().sum::<f64>() / n as f64)
}

/// Local accuracy gain over the linear probe on task `t`, both measured
/// right after training `t`. `local_*` are local-accuracy matrices.
pub fn adaptation(local_method: &AccuracyMatrix, local_probe: &AccuracyMatrix, t: usize) -> Result<f64> {
    if local_method.test_sizes != local_probe.test_sizes {
        return Err(Error::invalid("adaptation compares runs over different streams"));
    }
    let m = local_method.get(t, t).ok_or_else(|| Error::invalid(format!("task {t} not evaluated")))?;
    let p = local_probe.get(t, t).ok_or_else(|| Error::invalid(format!("task {t} not evaluated")))?;
    Ok(m - p)
}

/// Mean and sample standard deviation; `None` std for a single value.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, None));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, Some(var.sqrt())))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
