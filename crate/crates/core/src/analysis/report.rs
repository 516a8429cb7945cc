//! Results tables: one CSV row per (run, task) plus per-group mean ± std.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::metrics::{adaptation, aggregate_forgetting, forgetting, mean_std};
use crate::config::Config;
use crate::engine::RunRecord;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "run_id,seed,method,n_params_prompt,n_params_keys,task_index,global_acc,local_acc,p_sim,adaptation,forgetting,reg_kind,lambda_reg";

pub const PROBE_METHOD: &str = "linear_probe";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub n_params_prompt: usize,
    pub n_params_keys: usize,
    pub task_index: usize,
    pub global_acc: f64,
    pub local_acc: f64,
    pub p_sim: Option<f64>,
    pub adaptation: Option<f64>,
    pub forgetting: Option<f64>,
    pub reg_kind: String,
    pub lambda_reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample std; absent for a single run.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let (mean, std) = mean_std(values)?;
        Some(Stat { mean, std, n: values.len() })
    }

    /// Percent cell, `86.9 (±0.4)`, or `86.9` for a single run.
    pub fn cell(&self) -> String {
        format_cell(self.mean, self.std)
    }
}

/// Formats a fraction as a percentage with one decimal and an optional std.
pub fn format_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.1} (±{:.1})", 100.0 * mean, 100.0 * s),
        None => format!("{:.1}", 100.0 * mean),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub n_params_prompt: usize,
    pub n_params_keys: usize,
    pub reg_kind: String,
    pub lambda_reg: f64,
    pub seeds: Vec<u64>,
    pub final_acc: Stat,
    pub forgetting: Option<Stat>,
    pub adaptation: Option<Stat>,
    pub p_sim: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// sha256 over `"blob <len>\0"` followed by the canonical JSON of the
    /// input records.
    pub inputs_hash: String,
    pub rows: Vec<CsvRow>,
    pub groups: Vec<GroupSummary>,
    pub configs: BTreeMap<String, Config>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn check(record: &RunRecord) -> Result<()> {
    let bad = |d: &str| Err(Error::invalid(format!("record {}: {d}", record.run_id)));
    if !record.is_complete() {
        return bad("accuracy matrix is incomplete");
    }
    let t = record.accuracy.num_tasks();
    if record.global_acc.len() != t || record.p_sim.len() != t || record.local_accuracy.rows.len() != t {
        return bad("series lengths disagree with the task count");
    }
    for s in [&record.run_id, &record.method, &record.reg_kind] {
        if s.contains([',', '"', '\n']) {
            return bad("text fields may not contain commas, quotes or newlines");
        }
    }
    Ok(())
}

/// The linear-probe run sharing stream and seeds with `record`.
pub fn find_probe<'a>(record: &RunRecord, pool: &'a [RunRecord]) -> Option<&'a RunRecord> {
    pool.iter().find(|p| {
        p.method == PROBE_METHOD
            && p.class_order == record.class_order
            && p.data_seed == record.data_seed
            && p.train_seed == record.train_seed
            && p.accuracy.test_sizes == record.accuracy.test_sizes
    })
}

pub fn mean_adaptation(record: &RunRecord, probe: &RunRecord) -> Result<f64> {
    let t = record.accuracy.num_tasks();
    let mut sum = 0.0;
    for i in 0..t {
        sum += adaptation(&record.local_accuracy, &probe.local_accuracy, i)?;
    }
    Ok(sum / t.max(1) as f64)
}

pub fn csv_rows(records: &[RunRecord]) -> Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for r in records {
        check(r)?;
        let probe = find_probe(r, records);
        for t in 0..r.accuracy.num_tasks() {
            let adapt = match probe {
                Some(p) => Some(adaptation(&r.local_accuracy, &p.local_accuracy, t)?),
                None => None,
            };
            rows.push(CsvRow {
                run_id: r.run_id.clone(),
                seed: r.seed,
                method: r.method.clone(),
                n_params_prompt: r.n_params_prompt,
                n_params_keys: r.n_params_keys,
                task_index: t,
                global_acc: r.global_acc[t],
                local_acc: r.local_accuracy.get(t, t).expect("complete"),
                p_sim: r.p_sim[t],
                adaptation: adapt,
                forgetting: forgetting(&r.accuracy, t),
                reg_kind: r.reg_kind.clone(),
                lambda_reg: r.lambda_reg,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            r.method,
            r.n_params_prompt,
            r.n_params_keys,
            r.task_index,
            r.global_acc,
            r.local_acc,
            opt(r.p_sim),
            opt(r.adaptation),
            opt(r.forgetting),
            r.reg_kind,
            r.lambda_reg
        );
    }
    out
}

pub fn inputs_hash(records: &[RunRecord]) -> Result<String> {
    let json = serde_json::to_vec(records)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", json.len()).as_bytes());
    h.update(&json);
    Ok(hex::encode(h.finalize()))
}

pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    let rows = csv_rows(records)?;
    let mut groups: BTreeMap<(String, usize, String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.n_params_prompt, r.reg_kind.clone(), r.lambda_reg.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((method, n_params_prompt, reg_kind, _), members) in groups {
        let finals: Vec<f64> = members.iter().filter_map(|r| r.final_accuracy()).collect();
        let forg: Vec<f64> = members.iter().filter_map(|r| aggregate_forgetting(&r.accuracy)).collect();
        let mut adapt = Vec::new();
        for r in &members {
            if let Some(p) = find_probe(r, records) {
                adapt.push(mean_adaptation(r, p)?);
            }
        }
        let psim: Vec<f64> = members.iter().filter_map(|r| r.p_sim.last().copied().flatten()).collect();
        out.push(GroupSummary {
            method,
            n_params_prompt,
            n_params_keys: members[0].n_params_keys,
            reg_kind,
            lambda_reg: members[0].lambda_reg,
            seeds: members.iter().map(|r| r.seed).collect(),
            final_acc: Stat::of(&finals).ok_or_else(|| Error::invalid("group without results"))?,
            forgetting: Stat::of(&forg),
            adaptation: if adapt.len() == members.len() { Stat::of(&adapt) } else { None },
            p_sim: if psim.len() == members.len() { Stat::of(&psim) } else { None },
        });
    }
    Ok(Summary {
        inputs_hash: inputs_hash(records)?,
        rows,
        groups: out,
        configs: records.iter().map(|r| (r.run_id.clone(), r.config.clone())).collect(),
    })
}

fn cell(s: &Option<Stat>) -> String {
    s.as_ref().map_or("-".to_string(), Stat::cell)
}

/// Plain-text table in the `mean (±std)` style, one line per group.
pub fn format_table(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method\tparams\tkeys\treg\tseeds\tfinal acc\tforgetting\tadaptation\tP_sim");
    for g in &summary.groups {
        let psim = g.p_sim.as_ref().map_or("-".to_string(), |s| match s.std {
            Some(sd) => format!("{:.1} (±{:.1})", s.mean, sd),
            None => format!("{:.1}", s.mean),
        });
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.method,
            g.n_params_prompt,
            g.n_params_keys,
            g.reg_kind,
            g.seeds.len(),
            g.final_acc.cell(),
            cell(&g.forgetting),
            cell(&g.adaptation),
            psim
        );
    }
    out
}

/// `method,n_params_prompt,…` with separate mean and std columns; std is
/// empty for single runs.
pub fn groups_to_csv(summary: &Summary) -> String {
    let mut out = String::from(
        "method,n_params_prompt,n_params_keys,reg_kind,lambda_reg,runs,final_acc,final_acc_std,forgetting,forgetting_std,adaptation,adaptation_std,p_sim,p_sim_std\n",
    );
    let pair = |s: &Option<Stat>| match s {
        Some(s) => (s.mean.to_string(), opt(s.std)),
        None => (String::new(), String::new()),
    };
    for g in &summary.groups {
        let (fm, fs) = pair(&g.forgetting);
        let (am, as_) = pair(&g.adaptation);
        let (pm, ps) = pair(&g.p_sim);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.method,
            g.n_params_prompt,
            g.n_params_keys,
            g.reg_kind,
            g.lambda_reg,
            g.seeds.len(),
            g.final_acc.mean,
            opt(g.final_acc.std),
            fm,
            fs,
            am,
            as_,
            pm,
            ps
        );
    }
    out
}
