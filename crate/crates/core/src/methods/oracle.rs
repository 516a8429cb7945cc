use crate::backbone::BackboneState;
use crate::config::Config;
use crate::data::Dataset;
use crate::engine::pretrain::{finetune_full, FinetuneOptions};
use crate::error::Result;
use crate::stream::StreamSpec;

/// Query encoder fine-tuned i.i.d. on the whole stream, i.e. jointly on all
/// training samples of every task. The backbone that receives prompts is
/// not touched.
pub fn train_oracle_query(dataset: &Dataset, stream: &StreamSpec, backbone: &BackboneState, config: &Config) -> Result<BackboneState> {
    let train: Vec<usize> = stream.tasks.iter().flat_map(|t| t.train.iter().copied()).collect();
    let classes: Vec<usize> = stream.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
    let opts = FinetuneOptions {
        epochs: config.method.oracle_epochs,
        batch_size: config.train.batch_size,
        lr: config.method.oracle_lr,
        seed: config.train.train_seed,
    };
    finetune_full(backbone, dataset, &train, &classes, &opts)
}
