//! Parameter-count sweep over only_prompt, paired with a linear-probe run
//! per seed for the adaptation metric.

use serde::{Deserialize, Serialize};

use crate::analysis::metrics::aggregate_forgetting;
use crate::analysis::report::{find_probe, mean_adaptation};
use crate::backbone::BackboneState;
use crate::config::{Config, MethodStrategy};
use crate::data::Dataset;
use crate::engine::{run_stream, RunContext, RunRecord};
use crate::error::{Error, Result};
use crate::stream::{split_stream, split_stream_fine_grained};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_params: usize,
    pub seed: u64,
    pub final_acc: Option<f64>,
    pub adaptation: Option<f64>,
    pub forgetting: Option<f64>,
    /// Set when the run failed; the point is kept, not dropped.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Successful runs, probes included, ordered by (seed, n_params).
    pub records: Vec<RunRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_params,seed,final_acc,adaptation,forgetting,error\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.n_params,
                p.seed,
                f(p.final_acc),
                f(p.adaptation),
                f(p.forgetting),
                p.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }

    /// Points of one seed in increasing `n_params` order.
    pub fn series(&self, seed: u64) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.seed == seed).collect()
    }

    /// Mean of `field` per grid value over seeds with a value there.
    pub fn mean_by_params(&self, field: impl Fn(&SweepPoint) -> Option<f64>) -> Vec<(usize, Option<f64>)> {
        let mut grid: Vec<usize> = self.points.iter().map(|p| p.n_params).collect();
        grid.sort_unstable();
        grid.dedup();
        grid.into_iter()
            .map(|n| {
                let vals: Vec<f64> = self.points.iter().filter(|p| p.n_params == n).filter_map(&field).collect();
                (n, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect()
    }
}

/// Applies a run seed: it selects both the class order and the training
/// randomness.
pub fn seeded(base: &Config, seed: u64) -> Config {
    let mut c = base.clone();
    c.stream.stream_seed = seed;
    c.train.train_seed = seed;
    c
}

pub fn build_stream(cfg: &Config, dataset: &Dataset) -> Result<crate::stream::StreamSpec> {
    let s = &cfg.stream;
    let stream = if s.fine_grained {
        split_stream_fine_grained(dataset, s.tasks, s.family_size, s.stream_seed)?
    } else {
        split_stream(dataset, s.tasks, s.stream_seed)?
    };
    if s.val_per_class > 0 {
        stream.with_validation(dataset, s.val_per_class)
    } else {
        Ok(stream)
    }
}

/// Runs one config end to end on a given dataset and backbone.
pub fn run_config(cfg: &Config, dataset: &Dataset, backbone: &BackboneState) -> Result<RunRecord> {
    let stream = build_stream(cfg, dataset)?;
    let ctx = RunContext::new(cfg.clone(), dataset.clone(), stream, backbone.clone())?;
    run_stream(&ctx)
}

/// Sweeps `params` × `seeds`, executing up to `jobs` runs at once. The
/// result does not depend on `jobs`.
pub fn sweep(
    base: &Config,
    dataset: &Dataset,
    backbone: &BackboneState,
    params: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    let mut grid = params.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() < 2 || grid[0] == 0 {
        return Err(Error::invalid("sweep grid needs at least two positive sizes"));
    }
    // (seed, n_params); n = 0 is the linear probe
    let mut jobs_list: Vec<(u64, usize)> = Vec::new();
    for &s in seeds {
        jobs_list.push((s, 0));
        jobs_list.extend(grid.iter().map(|&n| (s, n)));
    }
    let run_one = |&(seed, n): &(u64, usize)| -> Result<RunRecord> {
        let mut cfg = seeded(base, seed);
        if n == 0 {
            cfg.method.strategy = MethodStrategy::None;
        } else {
            cfg.method.strategy = MethodStrategy::OnlyPrompt;
            cfg.method.n_params = n;
        }
        run_config(&cfg, dataset, backbone)
    };
    let outcomes: Vec<Result<RunRecord>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| jobs_list.par_iter().map(run_one).collect())
    } else {
        jobs_list.iter().map(run_one).collect()
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (job, out) in jobs_list.iter().zip(outcomes) {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push((*job, e.to_string())),
        }
    }
    let mut points = Vec::new();
    for &(seed, n) in &jobs_list {
        if n == 0 {
            continue;
        }
        if let Some((_, msg)) = failures.iter().find(|(j, _)| *j == (seed, n)) {
            points.push(SweepPoint {
                n_params: n,
                seed,
                final_acc: None,
                adaptation: None,
                forgetting: None,
                error: Some(msg.clone()),
            });
            continue;
        }
        let r = records
            .iter()
            .find(|r| r.seed == seed && r.method != crate::analysis::report::PROBE_METHOD && r.n_params_prompt == n)
            .expect("successful run recorded");
        let adaptation = match find_probe(r, &records) {
            Some(p) => Some(mean_adaptation(r, p)?),
            None => None,
        };
        points.push(SweepPoint {
            n_params: n,
            seed,
            final_acc: r.final_accuracy(),
            adaptation,
            forgetting: aggregate_forgetting(&r.accuracy),
            error: None,
        });
    }
    Ok(SweepResult { points, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(λ, validation final accuracy)` for every candidate, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks `λ_reg` from `[reg] lambda_grid` by final accuracy on the
/// validation split (`[stream] val_per_class` samples carved from each
/// class's training set). Ties go to the smaller λ.
pub fn select_lambda(base: &Config, dataset: &Dataset, backbone: &BackboneState) -> Result<LambdaSelection> {
    if base.reg.kind == crate::methods::RegKind::None {
        return Err(Error::invalid("λ selection needs [reg] kind = ewc or si"));
    }
    if base.stream.val_per_class == 0 {
        return Err(Error::invalid("λ selection needs [stream] val_per_class > 0"));
    }
    if base.reg.lambda_grid.is_empty() {
        return Err(Error::invalid("[reg] lambda_grid is empty"));
    }
    let stream = build_stream(base, dataset)?.validation_view();
    let mut scores = Vec::new();
    for &lambda in &base.reg.lambda_grid {
        let mut cfg = base.clone();
        cfg.reg.lambda = lambda;
        let ctx = RunContext::new(cfg, dataset.clone(), stream.clone(), backbone.clone())?;
        let acc = run_stream(&ctx)?.final_accuracy().ok_or_else(|| Error::invalid("empty stream"))?;
        scores.push((lambda, acc));
    }
    let mut best = scores[0];
    for &(l, a) in &scores[1..] {
        if a > best.1 || (a == best.1 && l < best.0) {
            best = (l, a);
        }
    }
    Ok(LambdaSelection { lambda: best.0, scores })
}
