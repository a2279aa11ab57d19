//! The order-discrimination task.
//!
//! Each example is `T - 1` prefix tokens followed by a query token; the
//! target is the parity of the first prefix token. Examples come in pairs
//! that share the prefix multiset and the query token but swap the first
//! token with one of opposite parity, so the two targets differ. A model
//! that only sees the prefix as a set cannot get both members right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
    /// Index of the pair this example belongs to.
    pub pair: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTask {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

impl OrderTask {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Example, &Example)> {
        self.examples.chunks_exact(2).map(|c| (&c[0], &c[1]))
    }

    /// Number of distinct target ids.
    pub fn n_classes(&self) -> usize {
        2
    }
}

pub fn target_of(first_token: usize) -> usize {
    first_token % 2
}

fn draw_prefix(rng: &mut SeededRng, vocab: usize, len: usize) -> Vec<usize> {
    loop {
        let prefix: Vec<usize> = if vocab >= len {
            let mut all: Vec<usize> = (0..vocab).collect();
            rng.shuffle(&mut all);
            all.truncate(len);
            all
        } else {
            (0..len).map(|_| rng.below(vocab)).collect()
        };
        let first = target_of(prefix[0]);
        if prefix[1..].iter().any(|&t| target_of(t) != first) {
            return prefix;
        }
    }
}

/// `n_examples` is rounded up to an even count so every example has its
/// partner. Pairs are stored adjacently, members `2k` and `2k + 1`.
pub fn gen_order_task(vocab_size: usize, seq_len: usize, n_examples: usize, seed: u64) -> Result<OrderTask> {
    if vocab_size < 3 || seq_len < 3 {
        return Err(Error::invalid(format!(
            "order task needs vocab >= 3 and T >= 3, got vocab={vocab_size}, T={seq_len}"
        )));
    }
    if n_examples == 0 {
        return Err(Error::invalid("order task needs at least one example"));
    }
    let n_pairs = n_examples.div_ceil(2);
    let mut rng = SeededRng::new(seed);
    let mut examples = Vec::with_capacity(2 * n_pairs);
    for pair in 0..n_pairs {
        let query = rng.below(vocab_size);
        let prefix = draw_prefix(&mut rng, vocab_size, seq_len - 1);
        let first_target = target_of(prefix[0]);
        let partners: Vec<usize> = (1..prefix.len())
            .filter(|&j| target_of(prefix[j]) != first_target)
            .collect();
        let j = partners[rng.below(partners.len())];
        let mut swapped = prefix.clone();
        swapped.swap(0, j);
        for p in [prefix, swapped] {
            let target = target_of(p[0]);
            let mut tokens = p;
            tokens.push(query);
            examples.push(Example { tokens, target, pair });
        }
    }
    Ok(OrderTask {
        vocab_size,
        seq_len,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(v: &[usize]) -> Vec<usize> {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    }

    #[test]
    fn pairing_invariant() {
        let task = gen_order_task(8, 6, 200, 1).unwrap();
        assert_eq!(task.len(), 200);
        for (a, b) in task.pairs() {
            assert_eq!(a.pair, b.pair);
            assert_eq!(a.tokens.len(), 6);
            assert_eq!(sorted(&a.tokens[..5]), sorted(&b.tokens[..5]));
            assert_eq!(a.tokens[5], b.tokens[5]);
            assert_ne!(a.target, b.target);
            assert_ne!(a.tokens, b.tokens);
        }
        let ones = task.examples.iter().filter(|e| e.target == 1).count();
        assert_eq!(ones, 100);
    }

    #[test]
    fn minimal_instance_is_the_swap_pair() {
        let task = gen_order_task(3, 3, 2, 0).unwrap();
        let (a, b) = task.pairs().next().unwrap();
        assert_eq!(a.tokens[..2], [b.tokens[1], b.tokens[0]]);
        assert_eq!(a.target, a.tokens[0] % 2);
        assert_ne!(a.target, b.target);
    }

    #[test]
    fn odd_counts_round_up() {
        assert_eq!(gen_order_task(5, 4, 7, 2).unwrap().len(), 8);
    }

    #[test]
    fn too_small_rejected() {
        assert!(gen_order_task(2, 2, 10, 0).is_err());
        assert!(gen_order_task(3, 2, 10, 0).is_err());
        assert!(gen_order_task(2, 3, 10, 0).is_err());
    }

    #[test]
    fn small_vocab_long_sequences_still_pair() {
        let task = gen_order_task(3, 8, 50, 4).unwrap();
        for (a, b) in task.pairs() {
            assert_eq!(sorted(&a.tokens[..7]), sorted(&b.tokens[..7]));
            assert_ne!(a.target, b.target);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_order_task(8, 6, 40, 9).unwrap(),
            gen_order_task(8, 6, 40, 9).unwrap()
        );
    }
}
