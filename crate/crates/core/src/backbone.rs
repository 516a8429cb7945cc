//! Tiny Vision Transformer used as the frozen feature extractor.
//!
//! Block composition (post-norm around a pre-normed sublayer, one LayerNorm
//! parameter pair per sublayer):
//!
//! ```text
//! h   = LN₁(Attn(LN₁(x)) + x)
//! out = LN₂(MLP(LN₂(h)) + h)
//! ```
//!
//! The input sequence is `[cls + pos₀; prompts; patches + pos₁..]`. Prompt
//! rows receive no positional embedding, so the prompt count can vary
//! without resizing the positional table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Block index whose input receives the prompts; 0 is the input layer.
    pub insert_layer: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            insert_layer: 0,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim < 2 || self.channels == 0 {
            return Err(Error::invalid("embed_dim must be ≥ 2 and channels ≥ 1"));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        if self.depth > 0 && self.insert_layer >= self.depth {
            return Err(Error::invalid(format!(
                "insert_layer {} must be below depth {}",
                self.insert_layer, self.depth
            )));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::invalid("ln_eps must be non-negative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub config: ViTConfig,
    /// `(patch_size²·channels) × D`
    pub patch_embed: Tensor,
    /// `(1 + N_p) × D`
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub frozen: bool,
}

impl BackboneState {
    /// Uniform `(−1/√D, 1/√D)` for every projection and embedding; LayerNorm
    /// starts at identity and biases at zero.
    pub fn random<R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        let bound = 1.0 / (d as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::uniform(shape, bound, rng);
        let patch_embed = u(&[config.patch_dim(), d]);
        let pos_embed = u(&[1 + config.num_patches(), d]);
        let cls_token = u(&[1, d]);
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                w_q: u(&[d, d]),
                w_k: u(&[d, d]),
                w_v: u(&[d, d]),
                w_o: u(&[d, d]),
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                w1: u(&[d, h]),
                b1: Tensor::zeros(&[h]),
                w2: u(&[h, d]),
                b2: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_gamma: Tensor::filled(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Canonical `(name, tensor)` list, e.g. `blocks.0.attn.w_q`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_fields(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gamma".to_string(), &self.final_gamma));
        out.push(("final_ln.beta".to_string(), &self.final_beta));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_embed, &mut self.pos_embed, &mut self.cls_token];
        for b in &mut self.blocks {
            out.extend([
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
            ]);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    /// Rebuilds a state from canonical names; every name must be present
    /// with the shape the config implies.
    pub fn from_named(config: &ViTConfig, tensors: Vec<(String, Tensor)>, frozen: bool) -> Result<Self> {
        let mut template = Self::random(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let names: Vec<String> = template.named_tensors().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        for (name, slot) in names.iter().zip(template.tensors_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        template.frozen = frozen;
        Ok(template)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every weight on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<BackboneVars> {
        if trainable && self.frozen {
            return Err(Error::invalid("cannot train a frozen backbone"));
        }
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_embed = put(&self.patch_embed);
        let pos_embed = put(&self.pos_embed);
        let cls_token = put(&self.cls_token);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                w_q: put(&b.w_q),
                w_k: put(&b.w_k),
                w_v: put(&b.w_v),
                w_o: put(&b.w_o),
                ln1_gamma: put(&b.ln1_gamma),
                ln1_beta: put(&b.ln1_beta),
                w1: put(&b.w1),
                b1: put(&b.b1),
                w2: put(&b.w2),
                b2: put(&b.b2),
                ln2_gamma: put(&b.ln2_gamma),
                ln2_beta: put(&b.ln2_beta),
            })
            .collect();
        let final_gamma = put(&self.final_gamma);
        let final_beta = put(&self.final_beta);
        Ok(BackboneVars {
            config: self.config.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_gamma,
            final_beta,
        })
    }
}

fn block_fields(b: &BlockWeights) -> [(&'static str, &Tensor); 12] {
    [
        ("attn.w_q", &b.w_q),
        ("attn.w_k", &b.w_k),
        ("attn.w_v", &b.w_v),
        ("attn.w_o", &b.w_o),
        ("ln1.gamma", &b.ln1_gamma),
        ("ln1.beta", &b.ln1_beta),
        ("mlp.w1", &b.w1),
        ("mlp.b1", &b.b1),
        ("mlp.w2", &b.w2),
        ("mlp.b2", &b.b2),
        ("ln2.gamma", &b.ln2_gamma),
        ("ln2.beta", &b.ln2_beta),
    ]
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BlockVars {
    pub fn all(&self) -> [Var; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln1_gamma,
            self.ln1_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Backbone weights recorded on one tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub config: ViTConfig,
    pub patch_embed: Var,
    pub pos_embed: Var,
    pub cls_token: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

impl BackboneVars {
    /// Same order as [`BackboneState::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.pos_embed, self.cls_token];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }
}

/// Splits a `channels×H×W` image into row-major patches, each flattened
/// channel-major, giving an `N_p × (patch²·channels)` matrix.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim(
            "patch_embed",
            format!("image {:?}, expected [{c}, {s}, {s}]", image.shape()),
        ));
    }
    let g = config.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(g * g * config.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (pr * p + y) * s + pc * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[g * g, config.patch_dim()], out)
}

/// Projects patches through `E`; no positional embedding, no bias.
pub fn patch_embed(tape: &mut Tape, vars: &BackboneVars, image: &Tensor) -> Result<Var> {
    let patches = tape.constant(patchify(image, &vars.config)?);
    tape.matmul(patches, vars.patch_embed)
}

/// `[cls + pos₀; prompts; patches + pos₁..]`.
pub fn build_input_sequence(
    tape: &mut Tape,
    vars: &BackboneVars,
    patches: Var,
    prompts: Option<Var>,
) -> Result<Var> {
    let n_p = vars.config.num_patches();
    let d = vars.config.embed_dim;
    if tape.value(patches).matrix_dims() != (n_p, d) {
        return Err(Error::dim("build_input_sequence", "patch embedding shape"));
    }
    let cls_pos = tape.slice_rows(vars.pos_embed, 0, 1)?;
    let patch_pos = tape.slice_rows(vars.pos_embed, 1, n_p)?;
    let cls = tape.add(vars.cls_token, cls_pos)?;
    let body = tape.add(patches, patch_pos)?;
    let head = match prompts {
        Some(p) => {
            if tape.value(p).matrix_dims().1 != d {
                return Err(Error::dim("build_input_sequence", "prompt width differs from D"));
            }
            tape.concat_rows(cls, p)?
        }
        None => cls,
    };
    tape.concat_rows(head, body)
}

/// Multi-head self-attention. With `cls_only`, queries are restricted to
/// row 0 and the output is `1×D`; keys and values still span all rows.
pub fn attention(tape: &mut Tape, x: Var, block: &BlockVars, heads: usize, cls_only: bool) -> Result<Var> {
    let (_, d) = tape.value(x).matrix_dims();
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("attention", format!("D={d} with {heads} heads")));
    }
    let dk = d / heads;
    let q_src = if cls_only { tape.slice_rows(x, 0, 1)? } else { x };
    let q = tape.matmul(q_src, block.w_q)?;
    let k = tape.matmul(x, block.w_k)?;
    let v = tape.matmul(x, block.w_v)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(merged, block.w_o)
}

/// Attention sublayer then MLP sublayer, each `LN(f(LN(x)) + x)`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &ViTConfig,
    cls_only: bool,
) -> Result<Var> {
    let eps = config.ln_eps;
    let normed = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, eps)?;
    let attn = attention(tape, normed, block, config.heads, cls_only)?;
    let resid = if cls_only { tape.slice_rows(x, 0, 1)? } else { x };
    let sum = tape.add(attn, resid)?;
    let h = tape.layer_norm(sum, block.ln1_gamma, block.ln1_beta, eps)?;

    let normed = tape.layer_norm(h, block.ln2_gamma, block.ln2_beta, eps)?;
    let hidden = tape.matmul(normed, block.w1)?;
    let hidden = tape.add_row(hidden, block.b1)?;
    let hidden = tape.gelu(hidden)?;
    let mlp = tape.matmul(hidden, block.w2)?;
    let mlp = tape.add_row(mlp, block.b2)?;
    let sum = tape.add(mlp, h)?;
    tape.layer_norm(sum, block.ln2_gamma, block.ln2_beta, eps)
}

/// Final-LN `[CLS]` feature (`1×D`) for one image with optional prompts.
pub fn forward_features(
    tape: &mut Tape,
    vars: &BackboneVars,
    image: &Tensor,
    prompts: Option<Var>,
) -> Result<Var> {
    let cfg = &vars.config;
    let patches = patch_embed(tape, vars, image)?;
    let at_input = if cfg.insert_layer == 0 { prompts } else { None };
    let mut x = build_input_sequence(tape, vars, patches, at_input)?;
    let depth = vars.blocks.len();
    for (i, block) in vars.blocks.iter().enumerate() {
        if i == cfg.insert_layer && i > 0 {
            if let Some(p) = prompts {
                let len = tape.value(x).matrix_dims().0;
                let cls = tape.slice_rows(x, 0, 1)?;
                let rest = tape.slice_rows(x, 1, len - 1)?;
                let head = tape.concat_rows(cls, p)?;
                x = tape.concat_rows(head, rest)?;
            }
        }
        x = block_forward(tape, x, block, cfg, i + 1 == depth)?;
    }
    let cls = if depth == 0 { tape.slice_rows(x, 0, 1)? } else { x };
    tape.layer_norm(cls, vars.final_gamma, vars.final_beta, cfg.ln_eps)
}

/// A frozen backbone already recorded on a private tape, for repeated
/// gradient-free feature extraction.
pub struct Encoder {
    tape: Tape,
    vars: BackboneVars,
    mark: usize,
}

impl Encoder {
    pub fn new(state: &BackboneState) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = state.register(&mut tape, false)?;
        let mark = tape.len();
        Ok(Self { tape, vars, mark })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.vars.config
    }

    /// Feature with an optional prompt matrix (`N_tok×D`).
    pub fn features(&mut self, image: &Tensor, prompts: Option<&Tensor>) -> Result<Tensor> {
        self.tape.truncate(self.mark);
        let p = prompts.map(|p| self.tape.constant(p.clone()));
        let f = forward_features(&mut self.tape, &self.vars, image, p)?;
        let out = self.tape.value(f).clone().reshape(&[self.vars.config.embed_dim]);
        self.tape.truncate(self.mark);
        out
    }
}

/// Prompt-free feature on the designated query backbone.
pub fn query_feature(encoder: &mut Encoder, image: &Tensor) -> Result<Tensor> {
    encoder.features(image, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig { image_size: 15, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ViTConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(ViTConfig::default().num_patches(), 16);
    }

    #[test]
    fn patchify_counts_and_order() {
        let cfg = small();
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&Tensor::zeros(&[1, 6, 6]), &cfg).is_err());
    }

    #[test]
    fn patch_embed_constant_patches() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = state.register(&mut tape, false).unwrap();

        let zero = patch_embed(&mut tape, &vars, &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));

        // patch k is filled with constant k+1
        let mut px = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                px[y * 4 + x] = ((y / 2) * 2 + x / 2 + 1) as f64;
            }
        }
        let img = Tensor::new(&[1, 4, 4], px).unwrap();
        let out = patch_embed(&mut tape, &vars, &img).unwrap();
        let e = &state.patch_embed;
        for k in 0..4 {
            for j in 0..4 {
                let col_sum: f64 = (0..4).map(|r| e.data()[r * 4 + j]).sum();
                let expect = (k + 1) as f64 * col_sum;
                assert!((tape.value(out).row(k)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_layout() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = state.register(&mut tape, false).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        let patches = patch_embed(&mut tape, &vars, &img).unwrap();
        let seq = build_input_sequence(&mut tape, &vars, patches, None).unwrap();
        assert_eq!(tape.value(seq).matrix_dims(), (17, 32));

        let prompt = tape.leaf(Tensor::filled(&[1, 32], 0.25));
        let seq = build_input_sequence(&mut tape, &vars, patches, Some(prompt)).unwrap();
        assert_eq!(tape.value(seq).matrix_dims(), (18, 32));
        // prompt row carries no positional embedding
        assert!(tape.value(seq).row(1).iter().all(|&v| v == 0.25));
        let cls: Vec<f64> = state
            .cls_token
            .data()
            .iter()
            .zip(state.pos_embed.row(0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(seq).row(0), &cls[..]);

        let wrong = tape.leaf(Tensor::zeros(&[1, 8]));
        assert!(build_input_sequence(&mut tape, &vars, patches, Some(wrong)).is_err());
    }

    fn identity_block(tape: &mut Tape, d: usize) -> BlockVars {
        let eye = tape.constant(Tensor::identity(d));
        let ones = tape.constant(Tensor::filled(&[d], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[d]));
        let w1 = tape.constant(Tensor::zeros(&[d, d]));
        BlockVars {
            w_q: eye,
            w_k: eye,
            w_v: eye,
            w_o: eye,
            ln1_gamma: ones,
            ln1_beta: zeros,
            w1,
            b1: zeros,
            w2: w1,
            b2: zeros,
            ln2_gamma: ones,
            ln2_beta: zeros,
        }
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::new();
        let b = identity_block(&mut tape, 1);
        let x = tape.constant(Tensor::from_rows(&[&[2.0]]).unwrap());
        let y = attention(&mut tape, x, &b, 1, false).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);

        let b = identity_block(&mut tape, 2);
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let y = attention(&mut tape, x, &b, 1, false).unwrap();
        let a = 0.5f64.sqrt();
        let expect = a.exp() / (a.exp() + 1.0);
        assert!((tape.value(y).row(0)[0] - 0.6698).abs() < 1e-3);
        assert!((tape.value(y).row(0)[1] - 0.3302).abs() < 1e-3);
        assert!((tape.value(y).row(0)[0] - expect).abs() < 1e-12);

        let x = tape.constant(Tensor::from_rows(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]]).unwrap());
        let y = attention(&mut tape, x, &b, 2, false).unwrap();
        let out = tape.value(y);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = state.register(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::uniform(&[6, 32], 1.0, &mut rng));
        let blk = &vars.blocks[0];
        let eye = tape.constant(Tensor::identity(32));
        let probe = BlockVars { w_o: eye, ..blk.clone() };
        let y = attention(&mut tape, x, &probe, 2, false).unwrap();
        let v = tape.matmul(x, blk.w_v).unwrap();
        let (vv, yy) = (tape.value(v).clone(), tape.value(y).clone());
        for col in 0..32 {
            let vals: Vec<f64> = (0..6).map(|r| vv.row(r)[col]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..6 {
                let o = yy.row(r)[col];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_block_is_double_layer_norm() {
        let d = 4;
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[d, d]));
        let ones = tape.constant(Tensor::filled(&[d], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[d]));
        let w1 = tape.constant(Tensor::zeros(&[d, 16]));
        let b1 = tape.constant(Tensor::zeros(&[16]));
        let w2 = tape.constant(Tensor::zeros(&[16, d]));
        let blk = BlockVars {
            w_q: zero,
            w_k: zero,
            w_v: zero,
            w_o: zero,
            ln1_gamma: ones,
            ln1_beta: zeros,
            w1,
            b1,
            w2,
            b2: zeros,
            ln2_gamma: ones,
            ln2_beta: zeros,
        };
        let cfg = ViTConfig { embed_dim: d, heads: 2, ..Default::default() };
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, -0.5, 4.0], &[0.0, 3.0, 1.0, 1.0], &[2.0, 2.0, 2.0, 2.5]]).unwrap());
        let y = block_forward(&mut tape, x, &blk, &cfg, false).unwrap();
        assert_eq!(tape.value(y).matrix_dims(), (3, 4));
        let l1 = tape.layer_norm(x, ones, zeros, cfg.ln_eps).unwrap();
        let l2 = tape.layer_norm(l1, ones, zeros, cfg.ln_eps).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(l2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_wrt_input() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 32], 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 32], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let vars = state.register(t, false)?;
                let y = block_forward(t, v[0], &vars.blocks[0], &cfg, false)?;
                let w = t.constant(w.clone());
                let z = t.mul(y, w)?;
                t.sum(z)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cls_only_last_block_matches_full() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = state.register(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::uniform(&[9, 32], 1.0, &mut rng));
        let full = block_forward(&mut tape, x, &vars.blocks[1], &cfg, false).unwrap();
        let cls = block_forward(&mut tape, x, &vars.blocks[1], &cfg, true).unwrap();
        for (a, b) in tape.value(full).row(0).iter().zip(tape.value(cls).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn features_respond_to_prompts_and_are_deterministic() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = BackboneState::random(&cfg, &mut rng).unwrap();
        state.freeze();
        let img = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let mut enc = Encoder::new(&state).unwrap();
        let a = enc.features(&img, None).unwrap();
        let b = enc.features(&img, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert_eq!(query_feature(&mut enc, &img).unwrap(), a);

        let mut p = Tensor::uniform(&[3, 32], 0.2, &mut rng);
        let f0 = enc.features(&img, Some(&p)).unwrap();
        assert_eq!(f0.len(), 32);
        p.data_mut()[5] += 1e-3;
        let f1 = enc.features(&img, Some(&p)).unwrap();
        let delta: f64 = f0.data().iter().zip(f1.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn deeper_insertion_keeps_feature_width() {
        let cfg = ViTConfig { insert_layer: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = BackboneState::random(&cfg, &mut rng).unwrap();
        let img = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let mut enc = Encoder::new(&state).unwrap();
        let p = Tensor::uniform(&[2, 32], 0.2, &mut rng);
        let with = enc.features(&img, Some(&p)).unwrap();
        let without = enc.features(&img, None).unwrap();
        assert_eq!(with.len(), 32);
        assert_ne!(with, without);
    }

    #[test]
    fn frozen_backbone_refuses_trainable_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = BackboneState::random(&ViTConfig::default(), &mut rng).unwrap();
        state.freeze();
        let mut tape = Tape::new();
        assert!(state.register(&mut tape, true).is_err());
        let vars = state.register(&mut tape, false).unwrap();
        assert!(vars.all().iter().all(|&v| !tape.requires_grad(v)));
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let cfg = ViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut state = BackboneState::random(&cfg, &mut rng).unwrap();
        state.freeze();
        let img = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let prompt = Tensor::uniform(&[2, 32], 0.2, &mut rng);
        let w = Tensor::uniform(&[1, 32], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let vars = state.register(t, false)?;
                let f = forward_features(t, &vars, &img, Some(v[0]))?;
                let w = t.constant(w.clone());
                let z = t.mul(f, w)?;
                t.sum(z)
            },
            &[prompt],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
