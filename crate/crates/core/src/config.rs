//! Run configuration: `[section]` headers with `key = value` pairs, parsed
//! as TOML. Unknown keys are rejected with their line number.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ViTConfig;
use crate::data::SyntheticSpec;
use crate::engine::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::methods::head::{HeadKind, TapOptions};
use crate::methods::prompts::Strategy;
use crate::methods::reg::RegKind;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backbone: ViTConfig,
    pub stream: StreamConfig,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub sweep: SweepConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// CILB file to load instead of generating the synthetic dataset.
    pub dataset: Option<String>,
    pub classes: usize,
    pub tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Training samples per class held out for validation; 0 disables.
    pub val_per_class: usize,
    pub jitter: f64,
    pub noise: f64,
    pub fine_grained: bool,
    pub family_size: usize,
    pub data_seed: u64,
    pub stream_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            dataset: None,
            classes: 20,
            tasks: 5,
            train_per_class: 24,
            test_per_class: 12,
            val_per_class: 0,
            jitter: 1.0,
            noise: 0.3,
            fine_grained: false,
            family_size: 5,
            data_seed: 0,
            stream_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodStrategy {
    /// No prompts: a linear probe (or NMC) on frozen features.
    None,
    OnlyPrompt,
    Pool,
    Weighted,
}

impl MethodStrategy {
    pub fn prompt_strategy(self) -> Option<Strategy> {
        match self {
            MethodStrategy::None => None,
            MethodStrategy::OnlyPrompt => Some(Strategy::OnlyPrompt),
            MethodStrategy::Pool => Some(Strategy::Pool),
            MethodStrategy::Weighted => Some(Strategy::Weighted),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodStrategy::None => "none",
            MethodStrategy::OnlyPrompt => "only_prompt",
            MethodStrategy::Pool => "pool",
            MethodStrategy::Weighted => "weighted",
        }
    }
}

/// Which tasks train the prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapt {
    All,
    First,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Default,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub strategy: MethodStrategy,
    /// Trainable prompt entries for `only_prompt`.
    pub n_params: usize,
    pub pool_size: usize,
    pub prompt_length: usize,
    pub top_n: usize,
    pub head: HeadKind,
    pub adapt: Adapt,
    pub query: QueryKind,
    pub surrogate_coef: f64,
    pub tap: bool,
    pub tap_samples: usize,
    pub tap_epochs: usize,
    pub tap_lr: f64,
    /// Full fine-tuning settings for the oracle query backbone.
    pub oracle_epochs: usize,
    pub oracle_lr: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        let tap = TapOptions::default();
        MethodConfig {
            strategy: MethodStrategy::OnlyPrompt,
            n_params: 768,
            pool_size: 10,
            prompt_length: 2,
            top_n: 3,
            head: HeadKind::Linear,
            adapt: Adapt::All,
            query: QueryKind::Default,
            surrogate_coef: 0.5,
            tap: false,
            tap_samples: tap.samples_per_class,
            tap_epochs: tap.epochs,
            tap_lr: tap.lr,
            oracle_epochs: 10,
            oracle_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_prompt: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr_head: 1e-3,
            lr_prompt: 1e-2,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            train_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// λ, the prompt learning rate relative to the head's.
    pub fn lr_ratio(&self) -> f64 {
        self.lr_prompt / self.lr_head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda: f64,
    pub xi: f64,
    /// Candidates for validation-based selection of `lambda`.
    pub lambda_grid: Vec<f64>,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            kind: RegKind::None,
            lambda: 0.0,
            xi: 0.1,
            lambda_grid: vec![1.0, 10.0, 100.0, 1000.0, 1e4, 1e5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub params: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            params: vec![48, 96, 192, 384, 768, 1536, 3072, 6144, 12288],
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: f64,
    pub noise: f64,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            classes: 32,
            train_per_class: 32,
            test_per_class: 8,
            jitter: 1.0,
            noise: 0.3,
            data_seed: 1_000,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            detail: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = crate::io::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config {
            line: 0,
            detail: "config is not UTF-8".into(),
        })?;
        Self::parse(&text)
    }

    fn bad(detail: impl Into<String>) -> Error {
        Error::Config {
            line: 0,
            detail: detail.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|e| Self::bad(e.to_string()))?;
        let s = &self.stream;
        if s.tasks == 0 || s.tasks > s.classes {
            return Err(Self::bad(format!("{} classes cannot be split into {} tasks", s.classes, s.tasks)));
        }
        if s.val_per_class >= s.train_per_class {
            return Err(Self::bad("val_per_class must be below train_per_class"));
        }
        let t = &self.train;
        if !(t.lr_head > 0.0) || !(t.lr_prompt >= 0.0) {
            return Err(Self::bad("lr_head must be > 0 and lr_prompt ≥ 0"));
        }
        if t.batch_size == 0 {
            return Err(Self::bad("batch_size must be positive"));
        }
        let m = &self.method;
        match m.strategy {
            MethodStrategy::OnlyPrompt if m.n_params == 0 => return Err(Self::bad("n_params must be ≥ 1")),
            MethodStrategy::Pool if m.top_n == 0 || m.top_n > m.pool_size => {
                return Err(Self::bad("top_n must be within 1..=pool_size"))
            }
            MethodStrategy::Pool | MethodStrategy::Weighted if m.prompt_length == 0 => {
                return Err(Self::bad("prompt_length must be positive"))
            }
            _ => {}
        }
        if m.tap && m.head != HeadKind::Linear {
            return Err(Self::bad("tap alignment needs the linear head"));
        }
        if !(self.reg.lambda >= 0.0) || !(self.reg.xi > 0.0) {
            return Err(Self::bad("reg.lambda must be ≥ 0 and reg.xi > 0"));
        }
        Ok(())
    }

    /// Dataset generation settings implied by `[stream]` and `[backbone]`.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.stream;
        SyntheticSpec {
            classes: s.classes,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            image_size: self.backbone.image_size,
            channels: self.backbone.channels,
            jitter: s.jitter,
            noise: s.noise,
            fine_grained: s.fine_grained,
            family_size: s.family_size,
            seed: s.data_seed,
        }
    }

    pub fn pretrain_spec(&self) -> SyntheticSpec {
        let p = &self.pretrain;
        SyntheticSpec {
            classes: p.classes,
            train_per_class: p.train_per_class,
            test_per_class: p.test_per_class,
            image_size: self.backbone.image_size,
            channels: self.backbone.channels,
            jitter: p.jitter,
            noise: p.noise,
            fine_grained: false,
            family_size: 1,
            seed: p.data_seed,
        }
    }

    pub fn tap_options(&self) -> TapOptions {
        TapOptions {
            samples_per_class: self.method.tap_samples,
            epochs: self.method.tap_epochs,
            batch_size: self.train.batch_size,
            lr: self.method.tap_lr,
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::parse("").unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "# comment\n[train]\nepochs = 2\nbogus = 1\n";
        match Config::parse(text) {
            Err(Error::Config { line, detail }) => {
                assert_eq!(line, 4);
                assert!(detail.contains("bogus"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sections_parse() {
        let text = "[method]\nstrategy = \"pool\"\npool_size = 10\ntop_n = 3\n[reg]\nkind = \"ewc\"\nlambda = 5.0\n[sweep]\nparams = [48, 96]\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.method.strategy, MethodStrategy::Pool);
        assert_eq!(c.reg.kind, RegKind::Ewc);
        assert_eq!(c.sweep.params, vec![48, 96]);
    }

    #[test]
    fn semantic_errors() {
        assert!(Config::parse("[stream]\nclasses = 3\n").is_err());
        assert!(Config::parse("[train]\nlr_head = 0.0\n").is_err());
        assert!(Config::parse("[method]\nstrategy = \"pool\"\ntop_n = 11\n").is_err());
        assert!(Config::parse("[method]\nstrategy = \"bogus\"\n").is_err());
    }
}
