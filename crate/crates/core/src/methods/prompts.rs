//! Trainable prompt parameters and their per-input assembly.
//!
//! All three strategies store values as `M × L_p × D`:
//!
//! * `only_prompt` — one shared prompt of `N` tokens (`M = 1`, `L_p = N`),
//!   no keys, no query.
//! * `pool` — `M` key/value pairs; the `top_n` keys closest to the query
//!   select prompts that are concatenated in rank order.
//! * `weighted` — every prompt contributes, weighted by a softmax over the
//!   query–key cosine similarities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::retrieval::{retrieve_top_n, surrogate_key_loss, weighted_compose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OnlyPrompt,
    Pool,
    Weighted,
}

impl Strategy {
    pub fn uses_query(self) -> bool {
        !matches!(self, Strategy::OnlyPrompt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub strategy: Strategy,
    /// `M × L_p × D`
    pub values: Tensor,
    /// `M × D`, present for `pool` and `weighted`.
    pub keys: Option<Tensor>,
    /// One flag per entry of `values`; masked-off entries stay exactly zero.
    pub trainable_mask: Vec<bool>,
    pub top_n: usize,
}

fn init_bound(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// `N = ⌈n_params / D⌉` tokens; the trailing `N·D − n_params` entries of the
/// last token are frozen zeros.
pub fn build_only_prompt<R: Rng + ?Sized>(n_params: usize, d: usize, rng: &mut R) -> Result<PromptState> {
    if n_params == 0 || d == 0 {
        return Err(Error::invalid("only_prompt needs n_params ≥ 1 and D ≥ 1"));
    }
    let n = n_params.div_ceil(d);
    let mut values = Tensor::uniform(&[1, n, d], init_bound(d), rng);
    let mask: Vec<bool> = (0..n * d).map(|i| i < n_params).collect();
    for (v, &m) in values.data_mut().iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(PromptState {
        strategy: Strategy::OnlyPrompt,
        values,
        keys: None,
        trainable_mask: mask,
        top_n: 1,
    })
}

pub fn build_pool<R: Rng + ?Sized>(
    pool_size: usize,
    prompt_length: usize,
    d: usize,
    top_n: usize,
    rng: &mut R,
) -> Result<PromptState> {
    if pool_size == 0 || prompt_length == 0 || top_n == 0 || top_n > pool_size {
        return Err(Error::invalid(format!(
            "pool needs 1 ≤ top_n ≤ M (M={pool_size}, top_n={top_n}) and L_p ≥ 1"
        )));
    }
    let values = Tensor::uniform(&[pool_size, prompt_length, d], init_bound(d), rng);
    let keys = Tensor::uniform(&[pool_size, d], init_bound(d), rng);
    Ok(PromptState {
        strategy: Strategy::Pool,
        trainable_mask: vec![true; values.len()],
        values,
        keys: Some(keys),
        top_n,
    })
}

pub fn build_weighted<R: Rng + ?Sized>(pool_size: usize, prompt_length: usize, d: usize, rng: &mut R) -> Result<PromptState> {
    let mut s = build_pool(pool_size, prompt_length, d, 1, rng)?;
    s.strategy = Strategy::Weighted;
    s.top_n = pool_size;
    Ok(s)
}

impl PromptState {
    pub fn pool_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn prompt_length(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn trainable_values(&self) -> usize {
        self.trainable_mask.iter().filter(|&&m| m).count()
    }

    pub fn key_params(&self) -> usize {
        self.keys.as_ref().map_or(0, Tensor::len)
    }

    /// Tokens inserted into the sequence per input.
    pub fn inserted_tokens(&self) -> usize {
        match self.strategy {
            Strategy::OnlyPrompt | Strategy::Weighted => self.prompt_length(),
            Strategy::Pool => self.top_n * self.prompt_length(),
        }
    }

    /// Values as the `M × (L_p·D)` matrix used on the tape.
    pub fn value_matrix(&self) -> Tensor {
        let (m, l, d) = (self.pool_size(), self.prompt_length(), self.dim());
        self.values.clone().reshape(&[m, l * d]).expect("same length")
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> PromptVars {
        let mut put = |t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        let values = put(self.value_matrix());
        let keys = self.keys.clone().map(put);
        PromptVars { values, keys }
    }

    /// Builds the prompt matrix (`N_tok × D`) for one input. `query` is
    /// required for the query-driven strategies.
    pub fn assemble(&self, tape: &mut Tape, vars: &PromptVars, query: Option<&Tensor>) -> Result<Assembled> {
        let d = self.dim();
        match self.strategy {
            Strategy::OnlyPrompt => {
                let prompt = tape.reshape(vars.values, &[self.prompt_length(), d])?;
                Ok(Assembled {
                    prompt,
                    selected: vec![0],
                    surrogate: None,
                })
            }
            Strategy::Pool => {
                let query = query.ok_or_else(|| Error::invalid("pool retrieval needs a query"))?;
                let keys = vars.keys.ok_or_else(|| Error::invalid("pool without keys"))?;
                let selected = retrieve_top_n(query, tape.value(keys), self.top_n)?;
                let chosen = tape.select_rows(vars.values, &selected)?;
                let prompt = tape.reshape(chosen, &[selected.len() * self.prompt_length(), d])?;
                let q = tape.constant(query.clone());
                let chosen_keys = tape.select_rows(keys, &selected)?;
                let surrogate = surrogate_key_loss(tape, q, chosen_keys)?;
                Ok(Assembled {
                    prompt,
                    selected,
                    surrogate: Some(surrogate),
                })
            }
            Strategy::Weighted => {
                let query = query.ok_or_else(|| Error::invalid("weighted composition needs a query"))?;
                let keys = vars.keys.ok_or_else(|| Error::invalid("weighted pool without keys"))?;
                let q = tape.constant(query.clone());
                let composed = weighted_compose(tape, q, keys, vars.values)?;
                let prompt = tape.reshape(composed, &[self.prompt_length(), d])?;
                Ok(Assembled {
                    prompt,
                    selected: (0..self.pool_size()).collect(),
                    surrogate: None,
                })
            }
        }
    }

    /// Gradient-free assembly: the prompt matrix actually inserted for this
    /// query.
    pub fn prompt_for(&self, query: Option<&Tensor>) -> Result<(Tensor, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let a = self.assemble(&mut tape, &vars, query)?;
        Ok((tape.value(a.prompt).clone(), a.selected))
    }

    /// Writes back `M × (L_p·D)` values, zeroing masked entries.
    pub fn set_values(&mut self, flat: &[f64]) {
        for ((v, &new), &m) in self.values.data_mut().iter_mut().zip(flat).zip(&self.trainable_mask) {
            *v = if m { new } else { 0.0 };
        }
    }

    /// Drops prompts (and their keys) by index; `top_n` is clipped.
    pub fn remove(&mut self, drop: &[usize]) -> Result<()> {
        let m = self.pool_size();
        let keep: Vec<usize> = (0..m).filter(|i| !drop.contains(i)).collect();
        if keep.is_empty() {
            return Err(Error::invalid("pruning would leave no prompts"));
        }
        let (l, d) = (self.prompt_length(), self.dim());
        let stride = l * d;
        let mut values = Vec::with_capacity(keep.len() * stride);
        let mut mask = Vec::with_capacity(keep.len() * stride);
        for &i in &keep {
            values.extend_from_slice(&self.values.data()[i * stride..(i + 1) * stride]);
            mask.extend_from_slice(&self.trainable_mask[i * stride..(i + 1) * stride]);
        }
        self.values = Tensor::new(&[keep.len(), l, d], values)?;
        self.trainable_mask = mask;
        if let Some(k) = &self.keys {
            let rows: Vec<f64> = keep.iter().flat_map(|&i| k.row(i).to_vec()).collect();
            self.keys = Some(Tensor::new(&[keep.len(), d], rows)?);
        }
        self.top_n = self.top_n.min(keep.len());
        if self.strategy == Strategy::Weighted {
            self.top_n = keep.len();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub values: Var,
    pub keys: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub prompt: Var,
    pub selected: Vec<usize>,
    pub surrogate: Option<Var>,
}
