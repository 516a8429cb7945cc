use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Runner;
use crate::error::{Error, Result};
use crate::methods::prompts::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub fraction: f64,
    pub removed: Vec<usize>,
    pub pool_before: usize,
    pub pool_after: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Removes `⌊fraction·M⌋` prompts (and keys) chosen uniformly at random and
/// re-evaluates every seen task. No retraining happens; the runner keeps
/// the pruned pool.
pub fn prune_pool(runner: &mut Runner<'_>, fraction: f64, seed: u64) -> Result<PruneResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("pruning fraction must lie in (0, 1)"));
    }
    let mut prompts = match &runner.learner.prompts {
        Some(p) if p.strategy != Strategy::OnlyPrompt => p.clone(),
        _ => return Err(Error::invalid("pruning needs a prompt pool")),
    };
    let m = prompts.pool_size();
    let k = (fraction * m as f64).floor() as usize;
    if k >= m {
        return Err(Error::invalid("pruning would leave no prompts"));
    }
    let before = runner.reevaluate()?;
    let mut removed = sample(&mut ChaCha8Rng::seed_from_u64(seed), m, k).into_vec();
    removed.sort_unstable();
    prompts.remove(&removed)?;
    runner.set_prompts(Some(prompts));
    let after = runner.reevaluate()?;
    Ok(PruneResult {
        fraction,
        removed,
        pool_before: m,
        pool_after: m - k,
        accuracy_before: before,
        accuracy_after: after,
    })
}
