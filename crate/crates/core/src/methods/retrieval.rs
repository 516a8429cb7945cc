//! Query–key machinery: hard top-n retrieval, the key surrogate loss and
//! soft weighted composition.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Tensor};

/// Indices of the `top_n` keys by cosine similarity to `query`, descending,
/// ties to the lower index. Zero-norm vectors score −1. The selection is a
/// plain index list and carries no gradient.
pub fn retrieve_top_n(query: &Tensor, keys: &Tensor, top_n: usize) -> Result<Vec<usize>> {
    let (m, d) = keys.matrix_dims();
    if query.len() != d {
        return Err(Error::dim("retrieve_top_n", format!("query {} vs keys {m}x{d}", query.len())));
    }
    if top_n == 0 || top_n > m {
        return Err(Error::invalid(format!("top_n {top_n} outside 1..={m}")));
    }
    let sims: Vec<f64> = (0..m)
        .map(|j| cosine(query.data(), keys.row(j)).unwrap_or(-1.0))
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    // partial_cmp so that −0.0 and 0.0 tie
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(top_n);
    Ok(order)
}

/// `mean_j (1 − cos(query, key_j))`. Pass the query as a constant so only
/// the keys are trained.
pub fn surrogate_key_loss(tape: &mut Tape, query: Var, selected_keys: Var) -> Result<Var> {
    let n = tape.value(selected_keys).matrix_dims().0;
    if n == 0 {
        return Err(Error::invalid("surrogate loss needs at least one key"));
    }
    let cos = tape.cosine_rows(query, selected_keys)?;
    let total = tape.sum(cos)?;
    let mean = tape.scale(total, -1.0 / n as f64)?;
    tape.shift(mean, 1.0)
}

/// `Σ_j α_j P_j` with `α = softmax_j cos(query, key_j)`; `values` is the
/// `M × (L_p·D)` matrix. Returns `1 × (L_p·D)`.
pub fn weighted_compose(tape: &mut Tape, query: Var, keys: Var, values: Var) -> Result<Var> {
    let cos = tape.cosine_rows(query, keys)?;
    let alpha = tape.softmax_rows(cos)?;
    tape.matmul(alpha, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_rank(query: &[f64], keys: &[Vec<f64>]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = keys
            .iter()
            .enumerate()
            .map(|(j, k)| (cosine(query, k).unwrap_or(-1.0), j))
            .collect();
        // stable insertion sort, strictly-greater moves first
        for i in 1..scored.len() {
            let mut j = i;
            while j > 0 && scored[j].0 > scored[j - 1].0 {
                scored.swap(j, j - 1);
                j -= 1;
            }
        }
        scored.into_iter().map(|(_, j)| j).collect()
    }

    #[test]
    fn retrieval_examples() {
        let keys = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]).unwrap();
        let q = Tensor::vector(vec![0.9, 0.1]);
        assert_eq!(retrieve_top_n(&q, &keys, 2).unwrap(), vec![0, 1]);
        let q = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(retrieve_top_n(&q, &keys, 1).unwrap(), vec![1]);
        let q = Tensor::vector(vec![-0.2, 1.0]);
        assert_eq!(retrieve_top_n(&q, &keys, 3).unwrap(), vec![1, 2, 0]);
        assert!(retrieve_top_n(&q, &keys, 4).is_err());
        assert!(retrieve_top_n(&q, &keys, 0).is_err());
    }

    #[test]
    fn zero_norm_scores_minus_one() {
        let keys = Tensor::from_rows(&[&[0.0, 0.0], &[-1.0, 0.0]]).unwrap();
        let q = Tensor::vector(vec![1.0, 0.0]);
        // both score −1, tie to the lower index
        assert_eq!(retrieve_top_n(&q, &keys, 2).unwrap(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..10_000, m in 1usize..=64, d in 1usize..6, top in 1usize..=64) {
            let top = top.min(m);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values produce ties
            let keys: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| (rand::Rng::random_range(&mut rng, -2i32..=2)) as f64).collect()).collect();
            let q: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut rng, -2i32..=2) as f64).collect();
            let kt = Tensor::new(&[m, d], keys.concat()).unwrap();
            let got = retrieve_top_n(&Tensor::vector(q.clone()), &kt, top).unwrap();
            let expect = brute_force_rank(&q, &keys);
            prop_assert_eq!(got, expect[..top].to_vec());
        }
    }

    #[test]
    fn surrogate_examples() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let k = t.leaf(Tensor::from_rows(&[&[2.0, 4.0]]).unwrap());
        let l = surrogate_key_loss(&mut t, q, k).unwrap();
        assert!(t.value(l).data()[0].abs() < 1e-15);

        let k = t.leaf(Tensor::from_rows(&[&[-2.0, 1.0]]).unwrap());
        let l = surrogate_key_loss(&mut t, q, k).unwrap();
        assert!((t.value(l).data()[0] - 1.0).abs() < 1e-15);

        let k = t.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[-2.0, 1.0]]).unwrap());
        let l = surrogate_key_loss(&mut t, q, k).unwrap();
        assert!((t.value(l).data()[0] - 0.5).abs() < 1e-15);
        t.backward(l).unwrap();
        assert!(t.grad(k).unwrap().iter().any(|&g| g != 0.0));
        assert!(t.grad(q).is_none());
    }

    #[test]
    fn weighted_examples() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![0.3, 0.7]));
        let k = t.leaf(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap());
        let v = t.leaf(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let out = weighted_compose(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0]);

        let k = t.leaf(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap());
        let v = t.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]]).unwrap());
        let out = weighted_compose(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn weighted_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::uniform(&[4], 1.0, &mut rng);
        let keys = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let vals = Tensor::uniform(&[3, 6], 1.0, &mut rng);

        let sims: Vec<f64> = (0..3).map(|j| cosine(q.data(), keys.row(j)).unwrap()).collect();
        let z: f64 = sims.iter().map(|s| s.exp()).sum();
        let alpha: Vec<f64> = sims.iter().map(|s| s.exp() / z).collect();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expect: Vec<f64> = (0..6).map(|c| (0..3).map(|j| alpha[j] * vals.row(j)[c]).sum()).collect();

        let mut t = Tape::new();
        let qv = t.constant(q);
        let kv = t.leaf(keys);
        let vv = t.leaf(vals);
        let out = weighted_compose(&mut t, qv, kv, vv).unwrap();
        for (a, b) in t.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
