#![allow(dead_code)]

use std::sync::OnceLock;

use prfcl::analysis::sweep::{build_stream, seeded};
use prfcl::backbone::BackboneState;
use prfcl::config::Config;
use prfcl::data::{generate_synthetic, Dataset};
use prfcl::engine::pretrain::pretrain_backbone;
use prfcl::engine::RunContext;

/// A small stream that still exercises every code path.
pub const SMALL: &str = r#"
[stream]
classes = 8
tasks = 2
train_per_class = 8
test_per_class = 4

[pretrain]
classes = 8
train_per_class = 8
test_per_class = 4
epochs = 2

[train]
epochs = 2
batch_size = 8
"#;

pub fn small_config() -> Config {
    Config::parse(SMALL).unwrap()
}

pub fn with(edit: impl FnOnce(&mut Config)) -> Config {
    let mut c = small_config();
    edit(&mut c);
    c.validate().unwrap();
    c
}

pub fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_synthetic(&small_config().synthetic_spec()).unwrap())
}

pub fn backbone() -> &'static BackboneState {
    static BB: OnceLock<BackboneState> = OnceLock::new();
    BB.get_or_init(|| pretrain_backbone(&small_config()).unwrap())
}

pub fn context(cfg: &Config, seed: u64) -> RunContext {
    let cfg = seeded(cfg, seed);
    let stream = build_stream(&cfg, dataset()).unwrap();
    RunContext::new(cfg, dataset().clone(), stream, backbone().clone()).unwrap()
}
