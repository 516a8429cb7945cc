//! Sequential training over a task stream.
//!
//! A [`Runner`] owns all mutable state of one run (prompts, heads,
//! regularizer, optimizer moments, RNG) and trains tasks one at a time, so a
//! run can be checkpointed between tasks and resumed bit-for-bit.

pub mod checkpoint;
pub mod optim;
pub mod pretrain;
pub mod record;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::metrics::{prompt_similarity, AccuracyMatrix};
use crate::backbone::{forward_features, BackboneState, Encoder};
use crate::config::{Adapt, Config, QueryKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::methods::head::{tap_align, ClassStats, HeadKind, HeadVars, LinearHead, NmcHead};
use crate::methods::prompts::{build_only_prompt, build_pool, build_weighted, PromptState, PromptVars, Strategy};
use crate::methods::reg::{fisher_diagonal, RegKind, RegState};
use crate::stream::{train_batches, StreamSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

use optim::Adam;
pub use record::{method_label, RunRecord};

/// Immutable inputs shared by every task of a run.
pub struct RunContext {
    pub config: Config,
    pub dataset: Dataset,
    pub stream: StreamSpec,
    /// Frozen backbone that receives the prompts.
    pub backbone: BackboneState,
    /// Separate query encoder, present for the oracle query.
    pub query_backbone: Option<BackboneState>,
}

impl RunContext {
    /// Builds the context, training the oracle query encoder when the
    /// config asks for one.
    pub fn new(config: Config, dataset: Dataset, stream: StreamSpec, backbone: BackboneState) -> Result<Self> {
        config.validate()?;
        if !backbone.frozen {
            return Err(Error::invalid("runs need a frozen backbone"));
        }
        if backbone.config != config.backbone {
            return Err(Error::invalid("backbone weights do not match [backbone] config"));
        }
        if dataset.height != config.backbone.image_size || dataset.channels != config.backbone.channels {
            return Err(Error::invalid("dataset image shape does not match [backbone] config"));
        }
        let wants_oracle = config.method.query == QueryKind::Oracle
            && config.method.strategy.prompt_strategy().is_some_and(|s| s.uses_query());
        let query_backbone = if wants_oracle {
            Some(crate::methods::oracle::train_oracle_query(&dataset, &stream, &backbone, &config)?)
        } else {
            None
        };
        Ok(RunContext {
            config,
            dataset,
            stream,
            backbone,
            query_backbone,
        })
    }
}

/// All trainable and stateful parts of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub prompts: Option<PromptState>,
    pub head: LinearHead,
    pub nmc: Option<NmcHead>,
    /// Per-class feature statistics for pseudo-feature alignment.
    pub stats: BTreeMap<usize, ClassStats>,
    pub reg: RegState,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl Learner {
    pub fn init(cfg: &Config, num_classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.train_seed);
        let d = cfg.backbone.embed_dim;
        let m = &cfg.method;
        let prompts = match m.strategy.prompt_strategy() {
            None => None,
            Some(Strategy::OnlyPrompt) => Some(build_only_prompt(m.n_params, d, &mut rng)?),
            Some(Strategy::Pool) => Some(build_pool(m.pool_size, m.prompt_length, d, m.top_n, &mut rng)?),
            Some(Strategy::Weighted) => Some(build_weighted(m.pool_size, m.prompt_length, d, &mut rng)?),
        };
        let head = LinearHead::init(num_classes, d, &mut rng);
        Ok(Self::assemble(cfg, prompts, head, rng))
    }

    /// Wraps explicit prompt and head states, e.g. to share an
    /// initialization between two strategies.
    pub fn assemble(cfg: &Config, prompts: Option<PromptState>, head: LinearHead, rng: ChaCha8Rng) -> Self {
        let mut l = Learner {
            prompts,
            head,
            nmc: (cfg.method.head == HeadKind::Nmc).then(NmcHead::new),
            stats: BTreeMap::new(),
            reg: RegState::new(RegKind::None, 0.0, cfg.reg.xi, 0),
            adam: Adam::new(cfg.train.adam()),
            rng,
        };
        l.reg = RegState::new(cfg.reg.kind, cfg.reg.lambda, cfg.reg.xi, l.flat_params().len());
        l
    }

    /// Trainable tensors in regularizer order: prompt values (as
    /// `M × L_p·D`), keys, head weight, head bias.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompts {
            out.push(p.value_matrix());
            if let Some(k) = &p.keys {
                out.push(k.clone());
            }
        }
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompts {
            out.extend_from_slice(p.values.data());
            if let Some(k) = &p.keys {
                out.extend_from_slice(k.data());
            }
        }
        out.extend_from_slice(self.head.weight.data());
        out.extend_from_slice(self.head.bias.data());
        out
    }

    fn segment_lengths(&self) -> Vec<usize> {
        self.param_tensors().iter().map(Tensor::len).collect()
    }
}

#[derive(Clone, Debug)]
struct Cached {
    feature: Vec<f64>,
    prompt: Option<Vec<f64>>,
}

fn sorted(classes: &[usize]) -> Vec<usize> {
    let mut c = classes.to_vec();
    c.sort_unstable();
    c
}

pub struct Runner<'a> {
    ctx: &'a RunContext,
    pub learner: Learner,
    pub record: RunRecord,
    pub next_task: usize,
    encoder: Encoder,
    query_encoder: Option<Encoder>,
    queries: HashMap<usize, Tensor>,
    /// Features and inserted prompts under the current prompt values.
    features: HashMap<usize, Cached>,
}

impl<'a> Runner<'a> {
    pub fn new(ctx: &'a RunContext) -> Result<Self> {
        let learner = Learner::init(&ctx.config, ctx.dataset.num_classes)?;
        Self::with_learner(ctx, learner)
    }

    pub fn with_learner(ctx: &'a RunContext, learner: Learner) -> Result<Self> {
        let record = new_record(ctx, &learner);
        let mut r = Self::bare(ctx, learner, record, 0)?;
        r.record.p_sim_init = r.initial_similarity()?;
        Ok(r)
    }

    pub(crate) fn bare(ctx: &'a RunContext, learner: Learner, record: RunRecord, next_task: usize) -> Result<Self> {
        let uses_query = learner.prompts.as_ref().is_some_and(|p| p.strategy.uses_query());
        let query_encoder = if uses_query {
            Some(Encoder::new(ctx.query_backbone.as_ref().unwrap_or(&ctx.backbone))?)
        } else {
            None
        };
        Ok(Runner {
            ctx,
            learner,
            record,
            next_task,
            encoder: Encoder::new(&ctx.backbone)?,
            query_encoder,
            queries: HashMap::new(),
            features: HashMap::new(),
        })
    }

    pub fn context(&self) -> &RunContext {
        self.ctx
    }

    pub fn is_done(&self) -> bool {
        self.next_task >= self.ctx.stream.num_tasks()
    }

    /// Trains and evaluates tasks until `stop_after` tasks are done (or the
    /// stream ends).
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<()> {
        let end = stop_after.map_or(self.ctx.stream.num_tasks(), |n| n.min(self.ctx.stream.num_tasks()));
        while self.next_task < end {
            self.train_task()?;
        }
        Ok(())
    }

    pub fn into_record(self) -> RunRecord {
        self.record
    }

    fn initial_similarity(&mut self) -> Result<Option<f64>> {
        let Some(prompts) = self.learner.prompts.clone() else { return Ok(None) };
        let all: Vec<usize> = self.ctx.stream.tasks.iter().flat_map(|t| t.test.iter().copied()).collect();
        if all.is_empty() {
            return Ok(None);
        }
        let mut flat = Vec::with_capacity(all.len());
        for idx in all {
            let q = self.query(idx)?;
            flat.push(prompts.prompt_for(q.as_ref())?.0.into_data());
        }
        let s = prompt_similarity(&flat)?;
        self.record.p_sim_flagged |= s.negative() || s.zero_prototype;
        Ok(Some(s.value))
    }

    fn query(&mut self, idx: usize) -> Result<Option<Tensor>> {
        let Some(enc) = self.query_encoder.as_mut() else { return Ok(None) };
        if let Some(q) = self.queries.get(&idx) {
            return Ok(Some(q.clone()));
        }
        let q = enc.features(&self.ctx.dataset.image(idx), None)?;
        self.queries.insert(idx, q.clone());
        Ok(Some(q))
    }

    fn cached(&mut self, idx: usize) -> Result<Cached> {
        if let Some(c) = self.features.get(&idx) {
            return Ok(c.clone());
        }
        let q = self.query(idx)?;
        let prompt = match &self.learner.prompts {
            Some(p) => Some(p.prompt_for(q.as_ref())?.0),
            None => None,
        };
        let f = self.encoder.features(&self.ctx.dataset.image(idx), prompt.as_ref())?;
        let c = Cached {
            feature: f.into_data(),
            prompt: prompt.map(Tensor::into_data),
        };
        self.features.insert(idx, c.clone());
        Ok(c)
    }

    fn prompts_trainable(&self, t: usize) -> bool {
        self.learner.prompts.is_some()
            && match self.ctx.config.method.adapt {
                Adapt::All => true,
                Adapt::First => t == 0,
                Adapt::None => false,
            }
    }

    /// A single optimizer step on a batch of task `next_task`, taken exactly
    /// as [`Runner::train_task`] would take it. Boundary updates and
    /// evaluation are not run.
    pub fn train_step(&mut self, indices: &[usize], labels: &[usize]) -> Result<f64> {
        let t = self.next_task;
        let task = self.ctx.stream.tasks.get(t).ok_or_else(|| Error::invalid("stream already finished"))?;
        if indices.len() != labels.len() || indices.is_empty() {
            return Err(Error::invalid("batch indices and labels must be non-empty and aligned"));
        }
        let active = sorted(&task.classes);
        if self.prompts_trainable(t) {
            self.prompt_step(indices, labels, &active)
        } else {
            self.head_step(indices, labels, &active)
        }
    }

    /// Trains task `next_task`, applies the boundary updates and appends its
    /// evaluation to the record.
    pub fn train_task(&mut self) -> Result<()> {
        let t = self.next_task;
        let ctx = self.ctx;
        let cfg = &ctx.config;
        if t >= ctx.stream.num_tasks() {
            return Err(Error::invalid("stream already finished"));
        }
        let active = sorted(&ctx.stream.tasks[t].classes);
        let train_prompts = self.prompts_trainable(t);
        // the linear head is only worth training when it predicts or
        // carries the loss for prompt training
        let train_head = cfg.method.head == HeadKind::Linear || train_prompts;
        if self.learner.reg.kind == RegKind::Si {
            let flat = self.learner.flat_params();
            self.learner.reg.si_begin_task(&flat);
        }

        let mut epoch_losses = Vec::new();
        if train_head {
            for epoch in 0..cfg.train.epochs {
                let mut sum = 0.0;
                let mut n = 0usize;
                for batch in train_batches(&ctx.stream, &ctx.dataset, t, cfg.train.batch_size, cfg.train.train_seed, epoch) {
                    sum += if train_prompts {
                        self.prompt_step(&batch.indices, &batch.labels, &active)?
                    } else {
                        self.head_step(&batch.indices, &batch.labels, &active)?
                    };
                    n += 1;
                }
                let mean = sum / n.max(1) as f64;
                if !mean.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                epoch_losses.push(mean);
            }
        }
        self.record.train_loss.push(epoch_losses);

        self.task_end(t, &active)?;
        self.evaluate(t)?;
        self.next_task += 1;
        Ok(())
    }

    fn prompt_step(&mut self, indices: &[usize], labels: &[usize], active: &[usize]) -> Result<f64> {
        let ctx = self.ctx;
        let queries: Vec<Option<Tensor>> = indices.iter().map(|&i| self.query(i)).collect::<Result<_>>()?;
        let prompts = self.learner.prompts.as_ref().expect("prompt step without prompts");
        let coef = ctx.config.method.surrogate_coef;
        let mut tape = Tape::new();
        let bvars = ctx.backbone.register(&mut tape, false)?;
        let pvars = prompts.register(&mut tape, true);
        let hvars = self.learner.head.register(&mut tape, true);
        let mark = tape.len();
        let scale = 1.0 / indices.len() as f64;
        let mut total = 0.0;
        for (k, (&idx, &label)) in indices.iter().zip(labels).enumerate() {
            let a = prompts.assemble(&mut tape, &pvars, queries[k].as_ref())?;
            let f = forward_features(&mut tape, &bvars, &ctx.dataset.image(idx), Some(a.prompt))?;
            let z = LinearHead::logits(&mut tape, &hvars, f)?;
            let mut l = tape.masked_cross_entropy(z, label, active)?;
            if let Some(s) = a.surrogate {
                if coef != 0.0 {
                    let s = tape.scale(s, coef)?;
                    l = tape.add(l, s)?;
                }
            }
            let l = tape.scale(l, scale)?;
            total += tape.value(l).data()[0];
            tape.backward(l)?;
            tape.truncate(mark);
        }
        let grad = |v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        let mut grads = vec![grad(pvars.values)];
        if let Some(k) = pvars.keys {
            grads.push(grad(k));
        }
        grads.push(grad(hvars.weight));
        grads.push(grad(hvars.bias));
        self.apply_update(grads, true)?;
        self.features.clear();
        Ok(total)
    }

    fn head_step(&mut self, indices: &[usize], labels: &[usize], active: &[usize]) -> Result<f64> {
        let feats: Vec<Vec<f64>> = indices.iter().map(|&i| Ok(self.cached(i)?.feature)).collect::<Result<_>>()?;
        let d = self.learner.head.dim();
        let mut tape = Tape::new();
        let hvars = self.learner.head.register(&mut tape, true);
        let mark = tape.len();
        let scale = 1.0 / indices.len() as f64;
        let mut total = 0.0;
        for (f, &label) in feats.into_iter().zip(labels) {
            let fv = tape.constant(Tensor::new(&[1, d], f)?);
            let z = LinearHead::logits(&mut tape, &hvars, fv)?;
            let l = tape.masked_cross_entropy(z, label, active)?;
            let l = tape.scale(l, scale)?;
            total += tape.value(l).data()[0];
            tape.backward(l)?;
            tape.truncate(mark);
        }
        let seg = self.learner.segment_lengths();
        let n_prompt = seg.len() - 2;
        let mut grads: Vec<Vec<f64>> = seg[..n_prompt].iter().map(|&n| vec![0.0; n]).collect();
        grads.push(tape.grad(hvars.weight).expect("leaf").to_vec());
        grads.push(tape.grad(hvars.bias).expect("leaf").to_vec());
        self.apply_update(grads, false)?;
        Ok(total)
    }

    /// One optimizer step from per-tensor task-loss gradients (in
    /// [`Learner::param_tensors`] order) plus the regularizer gradient.
    fn apply_update(&mut self, task_grads: Vec<Vec<f64>>, update_prompts: bool) -> Result<()> {
        let cfg = &self.ctx.config.train;
        let l = &mut self.learner;
        let track = l.reg.active() || l.reg.kind == RegKind::Si;
        let before = if track { l.flat_params() } else { Vec::new() };
        let mut grads = task_grads.clone();
        if let Some(pg) = l.reg.penalty_grad(&before)? {
            let mut off = 0;
            for g in grads.iter_mut() {
                for (gi, p) in g.iter_mut().zip(&pg[off..]) {
                    *gi += p;
                }
                off += g.len();
            }
        }
        l.adam.tick();
        let mut gi = grads.iter();
        if let Some(p) = l.prompts.as_mut() {
            let gv = gi.next().expect("values grad");
            let gk = if p.keys.is_some() { gi.next() } else { None };
            if update_prompts {
                let mask = p.trainable_mask.clone();
                l.adam.update("prompt.values", p.values.data_mut(), gv, Some(&mask), cfg.lr_prompt)?;
                if let (Some(k), Some(gk)) = (p.keys.as_mut(), gk) {
                    l.adam.update("prompt.keys", k.data_mut(), gk, None, cfg.lr_prompt)?;
                }
            }
        }
        let gw = gi.next().expect("head weight grad");
        let gb = gi.next().expect("head bias grad");
        l.adam.update("head.weight", l.head.weight.data_mut(), gw, None, cfg.lr_head)?;
        l.adam.update("head.bias", l.head.bias.data_mut(), gb, None, cfg.lr_head)?;
        if l.reg.kind == RegKind::Si {
            let after = l.flat_params();
            let deltas: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            let flat_grads: Vec<f64> = task_grads.concat();
            l.reg.si_accumulate(&flat_grads, &deltas)?;
        }
        Ok(())
    }

    fn task_end(&mut self, t: usize, active: &[usize]) -> Result<()> {
        let ctx = self.ctx;
        let cfg = &ctx.config;
        if self.learner.nmc.is_some() || cfg.method.tap {
            let train = ctx.stream.tasks[t].train.clone();
            let mut feats = Vec::with_capacity(train.len());
            let mut labels = Vec::with_capacity(train.len());
            for &i in &train {
                feats.push(self.cached(i)?.feature);
                labels.push(ctx.dataset.samples[i].label);
            }
            if let Some(nmc) = self.learner.nmc.as_mut() {
                nmc.fit(&feats, &labels)?;
            }
            if cfg.method.tap {
                for &c in active {
                    let members: Vec<&[f64]> = feats
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &y)| y == c)
                        .map(|(f, _)| f.as_slice())
                        .collect();
                    if !members.is_empty() {
                        self.learner.stats.insert(c, ClassStats::from_features(&members)?);
                    }
                }
                let seen = sorted(&ctx.stream.seen_classes(t));
                let opts = cfg.tap_options();
                let l = &mut self.learner;
                l.head = tap_align(&l.head, &l.stats, &seen, &opts, &mut l.rng)?;
            }
        }
        match self.learner.reg.kind {
            RegKind::None => {}
            RegKind::Ewc => {
                let fisher = self.fisher(t, active)?;
                let flat = self.learner.flat_params();
                self.learner.reg.ewc_update_fisher(&fisher, &flat)?;
            }
            RegKind::Si => {
                let flat = self.learner.flat_params();
                self.learner.reg.si_consolidate(&flat)?;
            }
        }
        Ok(())
    }

    /// Diagonal Fisher of the task-masked predictive distribution over task
    /// `t`'s training samples.
    fn fisher(&mut self, t: usize, active: &[usize]) -> Result<Vec<f64>> {
        let ctx = self.ctx;
        let train = ctx.stream.tasks[t].train.clone();
        let queries: Vec<Option<Tensor>> = train.iter().map(|&i| self.query(i)).collect::<Result<_>>()?;
        let params = self.learner.param_tensors();
        let prompts = self.learner.prompts.as_ref();
        let has_keys = prompts.is_some_and(|p| p.keys.is_some());
        fisher_diagonal(&params, train.len(), active, |tape, leaves, i| {
            let bvars = ctx.backbone.register(tape, false)?;
            let mut next = 0;
            let prompt = match prompts {
                Some(p) => {
                    let pv = PromptVars {
                        values: leaves[0],
                        keys: has_keys.then(|| leaves[1]),
                    };
                    next = if has_keys { 2 } else { 1 };
                    Some(p.assemble(tape, &pv, queries[i].as_ref())?.prompt)
                }
                None => None,
            };
            let f = forward_features(tape, &bvars, &ctx.dataset.image(train[i]), prompt)?;
            let hv = HeadVars {
                weight: leaves[next],
                bias: leaves[next + 1],
            };
            LinearHead::logits(tape, &hv, f)
        })
    }

    fn evaluate(&mut self, t: usize) -> Result<()> {
        let ctx = self.ctx;
        let seen = sorted(&ctx.stream.seen_classes(t));
        let mut row_global = Vec::with_capacity(t + 1);
        let mut row_local = Vec::with_capacity(t + 1);
        let mut correct_all = 0usize;
        let mut n_all = 0usize;
        let mut retrieved = Vec::new();
        for s in 0..=t {
            let task_classes = sorted(&ctx.stream.tasks[s].classes);
            let test = &ctx.stream.tasks[s].test;
            let (mut cg, mut cl) = (0usize, 0usize);
            for &idx in test {
                let c = self.cached(idx)?;
                let label = ctx.dataset.samples[idx].label;
                let (pg, pl) = match &self.learner.nmc {
                    Some(nmc) => (
                        nmc.predict(&c.feature, Some(&seen))?,
                        nmc.predict(&c.feature, Some(&task_classes))?,
                    ),
                    None => (
                        self.learner.head.predict(&c.feature, &seen)?,
                        self.learner.head.predict(&c.feature, &task_classes)?,
                    ),
                };
                cg += usize::from(pg == label);
                cl += usize::from(pl == label);
                if let Some(p) = c.prompt {
                    retrieved.push(p);
                }
            }
            let n = test.len().max(1) as f64;
            row_global.push(cg as f64 / n);
            row_local.push(cl as f64 / n);
            correct_all += cg;
            n_all += test.len();
        }
        self.record.accuracy.push_row(row_global)?;
        self.record.local_accuracy.push_row(row_local)?;
        self.record.global_acc.push(correct_all as f64 / n_all.max(1) as f64);
        let p_sim = if retrieved.is_empty() {
            None
        } else {
            let s = prompt_similarity(&retrieved)?;
            self.record.p_sim_flagged |= s.negative() || s.zero_prototype;
            Some(s.value)
        };
        self.record.p_sim.push(p_sim);
        Ok(())
    }

    /// Re-evaluates the current state on every task seen so far without
    /// training, returning the global accuracy over their union.
    pub fn reevaluate(&mut self) -> Result<f64> {
        let t = self.next_task.checked_sub(1).ok_or_else(|| Error::invalid("nothing trained yet"))?;
        let saved = self.record.clone();
        self.record.accuracy.rows.truncate(t);
        self.record.local_accuracy.rows.truncate(t);
        self.record.global_acc.truncate(t);
        self.record.p_sim.truncate(t);
        self.evaluate(t)?;
        let acc = *self.record.global_acc.last().expect("evaluated");
        self.record = saved;
        Ok(acc)
    }

    /// Replaces the prompt state (e.g. after pruning) and drops cached
    /// features.
    pub fn set_prompts(&mut self, prompts: Option<PromptState>) {
        self.learner.prompts = prompts;
        self.features.clear();
    }
}

fn new_record(ctx: &RunContext, learner: &Learner) -> RunRecord {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let label = method_label(cfg);
    let n_prompt = learner.prompts.as_ref().map_or(0, PromptState::trainable_values);
    let n_keys = learner.prompts.as_ref().map_or(0, PromptState::key_params);
    let sizes: Vec<usize> = ctx.stream.tasks.iter().map(|t| t.test.len()).collect();
    RunRecord {
        run_id: format!("{label}-n{n_prompt}-s{}-{}", cfg.train.train_seed, &hash[..8]),
        method: label,
        seed: cfg.train.train_seed,
        data_seed: cfg.stream.data_seed,
        stream_seed: cfg.stream.stream_seed,
        train_seed: cfg.train.train_seed,
        n_params_prompt: n_prompt,
        n_params_keys: n_keys,
        n_params_head: learner.head.weight.len() + learner.head.bias.len(),
        lr_ratio: cfg.train.lr_ratio(),
        reg_kind: cfg.reg.kind.as_str().to_string(),
        lambda_reg: cfg.reg.lambda,
        class_order: ctx.stream.class_order.clone(),
        accuracy: AccuracyMatrix::new(sizes.clone()),
        local_accuracy: AccuracyMatrix::new(sizes),
        global_acc: Vec::new(),
        p_sim: Vec::new(),
        p_sim_init: None,
        p_sim_flagged: false,
        train_loss: Vec::new(),
        config_hash: hash,
        config: cfg.clone(),
    }
}

/// Runs the whole stream from scratch.
pub fn run_stream(ctx: &RunContext) -> Result<RunRecord> {
    let mut r = Runner::new(ctx)?;
    r.run(None)?;
    Ok(r.into_record())
}
