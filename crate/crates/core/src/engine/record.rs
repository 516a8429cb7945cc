use serde::{Deserialize, Serialize};

use crate::analysis::metrics::AccuracyMatrix;
use crate::config::{Adapt, Config, MethodStrategy, QueryKind};
use crate::methods::head::HeadKind;
use crate::methods::reg::RegKind;

/// Everything a run produces; contains no wall-clock data, so equal seeds
/// and config give byte-identical serializations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub data_seed: u64,
    pub stream_seed: u64,
    pub train_seed: u64,
    /// Trainable prompt entries (padding excluded).
    pub n_params_prompt: usize,
    /// Key entries, reported separately from prompt values.
    pub n_params_keys: usize,
    pub n_params_head: usize,
    /// λ = lr_prompt / lr_head.
    pub lr_ratio: f64,
    pub reg_kind: String,
    pub lambda_reg: f64,
    pub class_order: Vec<usize>,
    /// Global accuracy on task `s` after training task `t`.
    pub accuracy: AccuracyMatrix,
    /// Same, restricted to task-`s` logits.
    pub local_accuracy: AccuracyMatrix,
    /// Accuracy over the union of seen test sets after each task.
    pub global_acc: Vec<f64>,
    pub p_sim: Vec<Option<f64>>,
    /// P_sim of the initial prompts over every test sample in the stream.
    pub p_sim_init: Option<f64>,
    /// Set when any P_sim was negative or had a zero prototype.
    pub p_sim_flagged: bool,
    /// Mean training loss per epoch, per task.
    pub train_loss: Vec<Vec<f64>>,
    pub config_hash: String,
    pub config: Config,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.global_acc.last().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.accuracy.is_complete()
    }
}

/// Short method label, e.g. `only_prompt`, `linear_probe`,
/// `first_task_pool+nmc`.
pub fn method_label(cfg: &Config) -> String {
    let m = &cfg.method;
    let mut s = match (m.strategy, m.head) {
        (MethodStrategy::None, HeadKind::Linear) => "linear_probe".to_string(),
        (MethodStrategy::None, HeadKind::Nmc) => "nmc".to_string(),
        (st, HeadKind::Linear) => st.as_str().to_string(),
        (st, HeadKind::Nmc) => format!("{}+nmc", st.as_str()),
    };
    if m.strategy != MethodStrategy::None {
        match m.adapt {
            Adapt::All => {}
            Adapt::First => s = format!("first_task_{s}"),
            Adapt::None => s = format!("frozen_{s}"),
        }
        if m.query == QueryKind::Oracle && m.strategy.prompt_strategy().is_some_and(|p| p.uses_query()) {
            s.push_str("+oracle");
        }
    }
    if m.tap {
        s.push_str("+tap");
    }
    if cfg.reg.kind != RegKind::None {
        s.push('+');
        s.push_str(cfg.reg.kind.as_str());
    }
    s
}
