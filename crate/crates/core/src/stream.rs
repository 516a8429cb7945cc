//! Class-incremental task streams and their batch iterators.
//!
//! Training batches carry the task id; evaluation batches have no such
//! field, so nothing downstream of [`eval_batches`] can condition on task
//! identity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Held-out part of the training split, empty unless carved out.
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub num_classes: usize,
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub tasks: Vec<TaskSpec>,
}

fn partition_sizes(c: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| c / t + usize::from(i < c % t)).collect()
}

fn task_from_classes(dataset: &Dataset, classes: Vec<usize>) -> TaskSpec {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if classes.contains(&s.label) {
            match s.split {
                Split::Train => train.push(i),
                Split::Test => test.push(i),
            }
        }
    }
    TaskSpec {
        classes,
        train,
        test,
        val: Vec::new(),
    }
}

/// Shuffles the class order by `seed` and cuts it into `num_tasks`
/// contiguous groups whose sizes differ by at most one.
pub fn split_stream(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<StreamSpec> {
    let c = dataset.num_classes;
    if num_tasks == 0 || num_tasks > c {
        return Err(Error::invalid(format!("cannot split {c} classes into {num_tasks} tasks")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for size in partition_sizes(c, num_tasks) {
        let classes = order[start..start + size].to_vec();
        start += size;
        tasks.push(task_from_classes(dataset, classes));
    }
    Ok(StreamSpec {
        num_classes: c,
        seed,
        class_order: order,
        tasks,
    })
}

/// Fine-grained variant: classes `f·k .. (f+1)·k` form family `f`, and the
/// members of each family are spread over distinct tasks. Requires
/// `family_size == num_tasks` and `C` divisible by it.
pub fn split_stream_fine_grained(dataset: &Dataset, num_tasks: usize, family_size: usize, seed: u64) -> Result<StreamSpec> {
    let c = dataset.num_classes;
    if family_size != num_tasks || num_tasks == 0 || c % num_tasks != 0 {
        return Err(Error::invalid(format!(
            "fine-grained split needs family_size == tasks dividing C (C={c}, tasks={num_tasks}, family={family_size})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut families: Vec<usize> = (0..c / family_size).collect();
    families.shuffle(&mut rng);
    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); num_tasks];
    for f in families {
        let mut members: Vec<usize> = (f * family_size..(f + 1) * family_size).collect();
        members.shuffle(&mut rng);
        for (t, m) in members.into_iter().enumerate() {
            per_task[t].push(m);
        }
    }
    let class_order = per_task.iter().flatten().copied().collect();
    let tasks = per_task.into_iter().map(|cls| task_from_classes(dataset, cls)).collect();
    Ok(StreamSpec {
        num_classes: c,
        seed,
        class_order,
        tasks,
    })
}

impl StreamSpec {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flat_map(|k| k.classes.iter().copied()).collect()
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|k| k.classes.contains(&class))
    }

    /// Moves the last `per_class` training samples of every class into the
    /// validation list. Classes keep at least one training sample.
    pub fn with_validation(mut self, dataset: &Dataset, per_class: usize) -> Result<Self> {
        for task in &mut self.tasks {
            let mut keep = Vec::new();
            let mut val = Vec::new();
            for &c in &task.classes {
                let idx: Vec<usize> = task.train.iter().copied().filter(|&i| dataset.samples[i].label == c).collect();
                if idx.len() <= per_class {
                    return Err(Error::invalid(format!("class {c} has only {} training samples", idx.len())));
                }
                let cut = idx.len() - per_class;
                keep.extend_from_slice(&idx[..cut]);
                val.extend_from_slice(&idx[cut..]);
            }
            keep.sort_unstable();
            val.sort_unstable();
            task.train = keep;
            task.val = val;
        }
        Ok(self)
    }

    /// Swaps each task's test list for its validation list.
    pub fn validation_view(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tasks {
            t.test = std::mem::take(&mut t.val);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub task_id: usize,
}

/// Evaluation records deliberately have no task id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn epoch_seed(seed: u64, task: usize, epoch: usize) -> u64 {
    seed ^ (epoch as u64) ^ ((task as u64) << 32)
}

/// Shuffled training batches of task `t`, permuted by `seed ⊕ epoch`.
pub fn train_batches<'a>(
    stream: &'a StreamSpec,
    dataset: &'a Dataset,
    t: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = TrainBatch> + 'a {
    let mut order = stream.tasks[t].train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, t, epoch)));
    let size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| TrainBatch {
        labels: indices.iter().map(|&i| dataset.samples[i].label).collect(),
        indices,
        task_id: t,
    })
}

/// Unshuffled test batches of task `t`.
pub fn eval_batches<'a>(
    stream: &'a StreamSpec,
    dataset: &'a Dataset,
    t: usize,
    batch_size: usize,
) -> impl Iterator<Item = EvalBatch> + 'a {
    let size = batch_size.max(1);
    stream.tasks[t].test.chunks(size).map(move |c| EvalBatch {
        indices: c.to_vec(),
        labels: c.iter().map(|&i| dataset.samples[i].label).collect(),
    })
}
