//! `CKP1` checkpoints, all little-endian:
//!
//! ```text
//! "CKP1" | u32 count | count × tensor entry (PTW1 layout, f64 data)
//!        | u32 manifest_len | manifest (UTF-8 JSON)
//! ```
//!
//! The manifest carries the config hash, the next task index, the optimizer
//! step counter, the RNG state as u64 words and the partial run record.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::optim::{Adam, Moments};
use crate::engine::record::RunRecord;
use crate::engine::{Learner, RunContext, Runner};
use crate::error::{Error, Result};
use crate::methods::head::{ClassStats, LinearHead, NmcHead};
use crate::methods::prompts::{PromptState, Strategy};
use crate::methods::reg::{RegKind, RegState};
use crate::tensor::Tensor;
use crate::weights::{decode_entries, encode_entries, Precision, Reader};

pub const CKP1_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngWords {
    pub seed: [u64; 4],
    pub stream: u64,
    /// Word position, low then high 64 bits.
    pub word_pos: [u64; 2],
}

impl RngWords {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let s = rng.get_seed();
        let mut seed = [0u64; 4];
        for (i, w) in seed.iter_mut().enumerate() {
            *w = u64::from_le_bytes(s[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        let pos = rng.get_word_pos();
        RngWords {
            seed,
            stream: rng.get_stream(),
            word_pos: [pos as u64, (pos >> 64) as u64],
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut s = [0u8; 32];
        for (i, w) in self.seed.iter().enumerate() {
            s[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(s);
        rng.set_stream(self.stream);
        rng.set_word_pos(u128::from(self.word_pos[0]) | (u128::from(self.word_pos[1]) << 64));
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PromptMeta {
    strategy: Strategy,
    top_n: usize,
    has_keys: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RegMeta {
    kind: RegKind,
    lambda: f64,
    xi: f64,
    tasks_merged: usize,
    has_anchor: bool,
    has_task_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    next_task: usize,
    adam_step: u64,
    adam_slots: Vec<String>,
    rng: RngWords,
    prompt: Option<PromptMeta>,
    nmc_counts: Option<BTreeMap<usize, usize>>,
    stats_counts: BTreeMap<usize, usize>,
    reg: RegMeta,
    record: RunRecord,
}

/// A run paused between tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub next_task: usize,
    pub learner: Learner,
    pub record: RunRecord,
}

fn vec_tensor(v: &[f64]) -> Option<Tensor> {
    (!v.is_empty()).then(|| Tensor::vector(v.to_vec()))
}

impl Checkpoint {
    pub fn capture(runner: &Runner<'_>) -> Self {
        Checkpoint {
            config_hash: runner.context().config.hash(),
            next_task: runner.next_task,
            learner: runner.learner.clone(),
            record: runner.record.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let l = &self.learner;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        if let Some(p) = &l.prompts {
            tensors.push(("prompt.values".into(), p.values.clone()));
            let mask: Vec<f64> = p.trainable_mask.iter().map(|&m| f64::from(u8::from(m))).collect();
            tensors.push(("prompt.mask".into(), Tensor::new(p.values.shape(), mask)?));
            if let Some(k) = &p.keys {
                tensors.push(("prompt.keys".into(), k.clone()));
            }
        }
        tensors.push(("head.weight".into(), l.head.weight.clone()));
        tensors.push(("head.bias".into(), l.head.bias.clone()));
        for (name, m) in &l.adam.slots {
            tensors.extend(vec_tensor(&m.m).map(|t| (format!("adam.{name}.m"), t)));
            tensors.extend(vec_tensor(&m.v).map(|t| (format!("adam.{name}.v"), t)));
        }
        let r = &l.reg;
        for (name, v) in [("fisher", &r.fisher), ("omega", &r.omega), ("big_omega", &r.big_omega)] {
            tensors.extend(vec_tensor(v).map(|t| (format!("reg.{name}"), t)));
        }
        if let Some(a) = &r.anchor {
            tensors.extend(vec_tensor(a).map(|t| ("reg.anchor".to_string(), t)));
        }
        if let Some(a) = &r.task_start {
            tensors.extend(vec_tensor(a).map(|t| ("reg.task_start".to_string(), t)));
        }
        if let Some(nmc) = &l.nmc {
            for (c, s) in &nmc.sums {
                tensors.push((format!("nmc.{c}"), Tensor::vector(s.clone())));
            }
        }
        for (c, s) in &l.stats {
            tensors.push((format!("stats.{c}.mean"), Tensor::vector(s.mean.clone())));
            tensors.push((format!("stats.{c}.var"), Tensor::vector(s.var.clone())));
        }

        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            next_task: self.next_task,
            adam_step: l.adam.step,
            adam_slots: l.adam.slots.keys().cloned().collect(),
            rng: RngWords::capture(&l.rng),
            prompt: l.prompts.as_ref().map(|p| PromptMeta {
                strategy: p.strategy,
                top_n: p.top_n,
                has_keys: p.keys.is_some(),
            }),
            nmc_counts: l.nmc.as_ref().map(|n| n.counts.clone()),
            stats_counts: l.stats.iter().map(|(c, s)| (*c, s.count)).collect(),
            reg: RegMeta {
                kind: r.kind,
                lambda: r.lambda,
                xi: r.xi,
                tasks_merged: r.tasks_merged,
                has_anchor: r.anchor.is_some(),
                has_task_start: r.task_start.is_some(),
            },
            record: self.record.clone(),
        };

        let mut out = CKP1_MAGIC.to_vec();
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        encode_entries(&mut out, &refs, Precision::F64)?;
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::invalid("manifest too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CKP1_MAGIC)?;
        let entries = decode_entries(&mut r, Precision::F64)?;
        let len = r.u32()? as usize;
        let at = r.position();
        let manifest: Manifest = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Parse {
            offset: at,
            detail: format!("manifest: {e}"),
        })?;
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes after manifest"));
        }
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name).ok_or_else(|| Error::Parse {
                offset: at,
                detail: format!("checkpoint lacks tensor {name}"),
            })
        };
        let data = |t: Tensor| t.into_data();

        let prompts = match &manifest.prompt {
            None => None,
            Some(meta) => {
                let values = take("prompt.values")?;
                let mask = take("prompt.mask")?.into_data().iter().map(|&m| m != 0.0).collect();
                let keys = if meta.has_keys { Some(take("prompt.keys")?) } else { None };
                Some(PromptState {
                    strategy: meta.strategy,
                    values,
                    keys,
                    trainable_mask: mask,
                    top_n: meta.top_n,
                })
            }
        };
        let head = LinearHead {
            weight: take("head.weight")?,
            bias: take("head.bias")?,
        };
        let mut slots = BTreeMap::new();
        for name in &manifest.adam_slots {
            slots.insert(
                name.clone(),
                Moments {
                    m: data(take(&format!("adam.{name}.m"))?),
                    v: data(take(&format!("adam.{name}.v"))?),
                },
            );
        }
        let rm = &manifest.reg;
        let mut reg = RegState {
            kind: rm.kind,
            lambda: rm.lambda,
            xi: rm.xi,
            anchor: None,
            fisher: Vec::new(),
            tasks_merged: rm.tasks_merged,
            omega: Vec::new(),
            big_omega: Vec::new(),
            task_start: None,
        };
        match rm.kind {
            RegKind::None => {}
            RegKind::Ewc => reg.fisher = data(take("reg.fisher")?),
            RegKind::Si => {
                reg.omega = data(take("reg.omega")?);
                reg.big_omega = data(take("reg.big_omega")?);
            }
        }
        if rm.has_anchor {
            reg.anchor = Some(data(take("reg.anchor")?));
        }
        if rm.has_task_start {
            reg.task_start = Some(data(take("reg.task_start")?));
        }
        let nmc = match &manifest.nmc_counts {
            None => None,
            Some(counts) => {
                let mut n = NmcHead::new();
                for (&c, &k) in counts {
                    n.sums.insert(c, data(take(&format!("nmc.{c}"))?));
                    n.counts.insert(c, k);
                }
                Some(n)
            }
        };
        let mut stats = BTreeMap::new();
        for (&c, &count) in &manifest.stats_counts {
            stats.insert(
                c,
                ClassStats {
                    mean: data(take(&format!("stats.{c}.mean"))?),
                    var: data(take(&format!("stats.{c}.var"))?),
                    count,
                },
            );
        }
        if let Some(name) = map.keys().next() {
            return Err(Error::Parse {
                offset: at,
                detail: format!("unexpected tensor {name}"),
            });
        }
        let adam = Adam {
            config: manifest.record.config.train.adam(),
            step: manifest.adam_step,
            slots,
        };
        Ok(Checkpoint {
            config_hash: manifest.config_hash,
            next_task: manifest.next_task,
            learner: Learner {
                prompts,
                head,
                nmc,
                stats,
                reg,
                adam,
                rng: manifest.rng.restore(),
            },
            record: manifest.record,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&crate::io::read(path)?)
    }

    /// Continues the run; the context must carry the same config.
    pub fn resume(self, ctx: &RunContext) -> Result<Runner<'_>> {
        if ctx.config.hash() != self.config_hash {
            return Err(Error::Config {
                line: 0,
                detail: "checkpoint was written under a different config".into(),
            });
        }
        Runner::bare(ctx, self.learner, self.record, self.next_task)
    }
}
