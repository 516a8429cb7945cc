//! Adaptation strategies, query mechanisms, heads and regularizers.

pub mod head;
pub mod oracle;
pub mod prompts;
pub mod reg;
pub mod retrieval;

pub use head::{tap_align, ClassStats, HeadKind, LinearHead, NmcHead};
pub use prompts::{build_only_prompt, build_pool, build_weighted, PromptState, Strategy};
pub use reg::{ewc_penalty, si_penalty, RegKind, RegState};
pub use retrieval::{retrieve_top_n, surrogate_key_loss, weighted_compose};
