use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use prfcl::analysis::report::{format_table, groups_to_csv, rows_to_csv, summarize};
use prfcl::analysis::sweep::{build_stream, seeded, sweep};
use prfcl::analysis::{prune_pool, PruneResult};
use prfcl::backbone::BackboneState;
use prfcl::config::Config;
use prfcl::data::{generate_synthetic, Dataset};
use prfcl::engine::checkpoint::Checkpoint;
use prfcl::engine::pretrain::pretrain_backbone;
use prfcl::engine::{RunContext, RunRecord, Runner};
use prfcl::io::write_atomic;
use prfcl::weights::{load_backbone, save_backbone};
use prfcl::Error;

/// Prompt-based rehearsal-free continual learning on a tiny ViT.
#[derive(Parser, Debug)]
#[command(name = "prfcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset described by [stream] and write it as CILB.
    GenData(GenData),
    /// Pretrain the backbone on the upstream classes and write PTW1 weights.
    Pretrain(Pretrain),
    /// Run one method over the task stream; writes record.json and results.csv.
    Run(Run),
    /// Sweep only_prompt over prompt sizes; writes sweep.csv and records.json.
    Sweep(Sweep),
    /// Recompute P_sim and accuracies from a checkpoint, optionally pruning the pool.
    Diagnose(Diagnose),
    /// Aggregate run records into CSV rows and mean (±std) tables.
    Report(Report),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (TOML sections [backbone], [stream], [method], [train], [reg], [sweep], [pretrain]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone weights (PTW1). Without it the backbone is pretrained in-process.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides [stream] data_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides [pretrain] seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Run {
    #[command(flatten)]
    common: Common,
    /// Sets both stream_seed and train_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write a checkpoint (CKP1) here after every task.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written under the same config and seed.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many tasks have been trained in total.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated prompt sizes; overrides [sweep] params.
    #[arg(long, value_delimiter = ',')]
    params: Option<Vec<usize>>,
    /// Comma-separated run seeds; overrides [sweep] seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Concurrent runs; overrides [sweep] jobs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct Diagnose {
    #[command(flatten)]
    common: Common,
    /// Seed the checkpointed run was started with.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Remove this fraction of the pool (uniformly at random) and re-evaluate.
    #[arg(long)]
    prune: Option<f64>,
    /// Seed for choosing the pruned prompts.
    #[arg(long, default_value_t = 0)]
    prune_seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Report {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// record.json / records.json files to aggregate.
    #[arg(required = true)]
    records: Vec<PathBuf>,
}

fn load_config(path: Option<&Path>) -> prfcl::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_dataset(cfg: &Config) -> prfcl::Result<Dataset> {
    match &cfg.stream.dataset {
        Some(p) => Dataset::read(Path::new(p)),
        None => generate_synthetic(&cfg.synthetic_spec()),
    }
}

fn load_weights(cfg: &Config, path: Option<&Path>) -> prfcl::Result<BackboneState> {
    match path {
        Some(p) => load_backbone(&cfg.backbone, p),
        None => {
            info!("no --weights given, pretraining the backbone");
            pretrain_backbone(cfg)
        }
    }
}

fn create_dir(path: &Path) -> prfcl::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> prfcl::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn context(common: &Common, seed: Option<u64>) -> prfcl::Result<RunContext> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg = seeded(&cfg, s);
    }
    let dataset = load_dataset(&cfg)?;
    let backbone = load_weights(&cfg, common.weights.as_deref())?;
    let stream = build_stream(&cfg, &dataset)?;
    RunContext::new(cfg, dataset, stream, backbone)
}

fn gen_data(a: GenData) -> prfcl::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.stream.data_seed = s;
    }
    let ds = generate_synthetic(&cfg.synthetic_spec())?;
    write_atomic(&a.out, &ds.encode()?)?;
    info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> prfcl::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    let bb = pretrain_backbone(&cfg)?;
    save_backbone(&bb, &a.out)
}

fn run(a: Run) -> prfcl::Result<()> {
    let ctx = context(&a.common, a.seed)?;
    let mut runner = match &a.resume {
        Some(p) => Checkpoint::load(p)?.resume(&ctx)?,
        None => Runner::new(&ctx)?,
    };
    let end = a.stop_after.unwrap_or(usize::MAX);
    while !runner.is_done() && runner.next_task < end {
        runner.train_task()?;
        info!("task {} done", runner.next_task);
        if let Some(p) = &a.checkpoint {
            Checkpoint::capture(&runner).save(p)?;
        }
    }
    if !runner.is_done() {
        info!("stopped after {} tasks; continue with --resume", runner.next_task);
        return Ok(());
    }
    let record = runner.into_record();
    create_dir(&a.out)?;
    write_json(&a.out.join("record.json"), &record)?;
    write_atomic(&a.out.join("results.csv"), rows_to_csv(&summarize(std::slice::from_ref(&record))?.rows).as_bytes())
}

fn sweep_cmd(a: Sweep) -> prfcl::Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let params = a.params.unwrap_or_else(|| cfg.sweep.params.clone());
    let seeds = a.seed.unwrap_or_else(|| cfg.sweep.seeds.clone());
    let jobs = a.jobs.unwrap_or(cfg.sweep.jobs).max(1);
    let dataset = load_dataset(&cfg)?;
    let backbone = load_weights(&cfg, a.common.weights.as_deref())?;
    let result = sweep(&cfg, &dataset, &backbone, &params, &seeds, jobs)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("sweep.csv"), result.to_csv().as_bytes())?;
    write_json(&a.out.join("records.json"), &result.records)?;
    let failed = result.points.iter().filter(|p| p.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} sweep points failed; see the error column");
    }
    Ok(())
}

#[derive(Serialize)]
struct Diagnosis {
    tasks_trained: usize,
    accuracy: f64,
    p_sim: Option<f64>,
    p_sim_init: Option<f64>,
    p_sim_flagged: bool,
    prune: Option<PruneResult>,
}

fn diagnose(a: Diagnose) -> prfcl::Result<()> {
    let ctx = context(&a.common, a.seed)?;
    let mut runner = Checkpoint::load(&a.checkpoint)?.resume(&ctx)?;
    let accuracy = runner.reevaluate()?;
    let p_sim = runner.record.p_sim.last().copied().flatten();
    let prune = match a.prune {
        Some(f) => Some(prune_pool(&mut runner, f, a.prune_seed)?),
        None => None,
    };
    let d = Diagnosis {
        tasks_trained: runner.next_task,
        accuracy,
        p_sim,
        p_sim_init: runner.record.p_sim_init,
        p_sim_flagged: runner.record.p_sim_flagged,
        prune,
    };
    write_json(&a.out, &d)
}

fn read_records(path: &Path) -> prfcl::Result<Vec<RunRecord>> {
    let bytes = prfcl::io::read(path)?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    if v.is_array() {
        Ok(serde_json::from_value(v)?)
    } else {
        Ok(vec![serde_json::from_value(v)?])
    }
}

fn report(a: Report) -> prfcl::Result<()> {
    let mut records = Vec::new();
    for p in &a.records {
        records.extend(read_records(p)?);
    }
    let summary = summarize(&records)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("results.csv"), rows_to_csv(&summary.rows).as_bytes())?;
    write_atomic(&a.out.join("groups.csv"), groups_to_csv(&summary).as_bytes())?;
    write_json(&a.out.join("summary.json"), &summary)?;
    let table = format_table(&summary);
    write_atomic(&a.out.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Report(a) => report(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
