//! Full-network training: the desk-scale stand-in for a pretrained
//! backbone, also used to build the oracle query encoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_features, BackboneState, Encoder};
use crate::config::Config;
use crate::data::{generate_synthetic, Dataset, Split};
use crate::engine::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::methods::head::LinearHead;
use crate::stream::epoch_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::weights::quantize_to_f32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains every backbone weight plus a fresh linear head on `train`
/// (cross-entropy over `classes`), discards the head and returns the
/// frozen backbone.
pub fn finetune_full(
    start: &BackboneState,
    dataset: &Dataset,
    train: &[usize],
    classes: &[usize],
    opts: &FinetuneOptions,
) -> Result<BackboneState> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut state = start.clone();
    state.frozen = false;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut head = LinearHead::init(dataset.num_classes, state.config.embed_dim, &mut rng);
    let mut active = classes.to_vec();
    active.sort_unstable();
    let mut adam = Adam::new(AdamConfig::default());
    for epoch in 0..opts.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, 0, epoch)));
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let bvars = state.register(&mut tape, true)?;
            let hvars = head.register(&mut tape, true);
            let mark = tape.len();
            for &idx in batch {
                let f = forward_features(&mut tape, &bvars, &dataset.image(idx), None)?;
                let z = LinearHead::logits(&mut tape, &hvars, f)?;
                let l = tape.masked_cross_entropy(z, dataset.samples[idx].label, &active)?;
                let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                tape.backward(l)?;
                tape.truncate(mark);
            }
            adam.tick();
            for (i, (v, t)) in bvars.all().into_iter().zip(state.tensors_mut()).enumerate() {
                let g = tape.grad(v).expect("leaf").to_vec();
                adam.update(&format!("backbone.{i}"), t.data_mut(), &g, None, opts.lr)?;
            }
            let gw = tape.grad(hvars.weight).expect("leaf").to_vec();
            let gb = tape.grad(hvars.bias).expect("leaf").to_vec();
            adam.update("head.weight", head.weight.data_mut(), &gw, None, opts.lr)?;
            adam.update("head.bias", head.bias.data_mut(), &gb, None, opts.lr)?;
        }
    }
    state.freeze();
    Ok(state)
}

/// Pretrains a backbone on the upstream synthetic dataset described by
/// `[pretrain]`. Weights are rounded to `f32`, so the returned state is
/// exactly what a `PTW1` file stores.
pub fn pretrain_backbone(config: &Config) -> Result<BackboneState> {
    let upstream = generate_synthetic(&config.pretrain_spec())?;
    let p = &config.pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let init = BackboneState::random(&config.backbone, &mut rng)?;
    let train: Vec<usize> = (0..upstream.len()).filter(|&i| upstream.samples[i].split == Split::Train).collect();
    let classes: Vec<usize> = (0..upstream.num_classes).collect();
    let opts = FinetuneOptions {
        epochs: p.epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        seed: p.seed,
    };
    let mut state = finetune_full(&init, &upstream, &train, &classes, &opts)?;
    quantize_to_f32(&mut state);
    Ok(state)
}

/// Test accuracy of a linear head trained on frozen features of the
/// train split (all classes active).
pub fn linear_probe_accuracy(backbone: &BackboneState, dataset: &Dataset, opts: &FinetuneOptions) -> Result<f64> {
    let mut enc = Encoder::new(backbone)?;
    let d = backbone.config.embed_dim;
    let mut feats = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        feats.push(enc.features(&dataset.image(i), None)?);
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].split == Split::Train).collect();
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].split == Split::Test).collect();
    let classes: Vec<usize> = (0..dataset.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut head = LinearHead::init(dataset.num_classes, d, &mut rng);
    let mut adam = Adam::new(AdamConfig::default());
    for epoch in 0..opts.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, 0, epoch)));
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut tape = Tape::new();
            let hv = head.register(&mut tape, true);
            let mark = tape.len();
            for &i in batch {
                let f = tape.constant(Tensor::new(&[1, d], feats[i].data().to_vec())?);
                let z = LinearHead::logits(&mut tape, &hv, f)?;
                let l = tape.masked_cross_entropy(z, dataset.samples[i].label, &classes)?;
                let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                tape.backward(l)?;
                tape.truncate(mark);
            }
            adam.tick();
            let gw = tape.grad(hv.weight).expect("leaf").to_vec();
            let gb = tape.grad(hv.bias).expect("leaf").to_vec();
            adam.update("w", head.weight.data_mut(), &gw, None, opts.lr)?;
            adam.update("b", head.bias.data_mut(), &gb, None, opts.lr)?;
        }
    }
    let mut correct = 0usize;
    for &i in &test {
        correct += usize::from(head.predict(feats[i].data(), &classes)? == dataset.samples[i].label);
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}
