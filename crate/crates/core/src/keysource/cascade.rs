//! Cascade reconciliation: block parities, binary search on mismatched
//! blocks, and back-tracking into earlier passes whenever a correction flips
//! the parity of a block that was already settled.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{KeyError, SiftedKeyPair};
use crate::bits::Bits;
use crate::metrics::QBER_ABORT;

pub const DEFAULT_PASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeParams {
    pub passes: usize,
    /// Block length grows by this factor after every pass; 1 keeps it at l0.
    pub growth: usize,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES,
            growth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationResult {
    pub corrected_alice: Bits,
    pub corrected_bob: Bits,
    /// Modelled error-correction traffic for `output_len` key bits.
    pub leaked_model: f64,
    /// Parity bits actually disclosed.
    pub leaked_bits: usize,
    pub block_length_l0: usize,
    pub passes_run: usize,
    pub corrections: usize,
    /// Binary searches run on full-length first-pass blocks and the parities
    /// they disclosed. A short tail block is excluded.
    pub first_pass_searches: usize,
    pub first_pass_search_bits: usize,
}

impl ReconciliationResult {
    /// Mean bisection parities per first-pass binary search.
    pub fn bits_per_first_pass_search(&self) -> Option<f64> {
        (self.first_pass_searches > 0)
            .then(|| self.first_pass_search_bits as f64 / self.first_pass_searches as f64)
    }
}

struct Pass {
    /// `blocks[b]` lists the key positions of block `b`.
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl Pass {
    fn new(order: &[usize], block_len: usize) -> Self {
        let mut block_of = vec![0; order.len()];
        let blocks: Vec<Vec<usize>> = order.chunks(block_len).map(<[usize]>::to_vec).collect();
        for (b, block) in blocks.iter().enumerate() {
            for &p in block {
                block_of[p] = b;
            }
        }
        Self { blocks, block_of }
    }
}

/// Halves `positions` until the single differing bit is found, returning it
/// and the number of parities disclosed along the way.
fn bisect(alice: &Bits, bob: &Bits, positions: &[usize]) -> (usize, usize) {
    let mut span = positions;
    let mut disclosed = 0;
    while span.len() > 1 {
        let (left, right) = span.split_at(span.len() / 2);
        disclosed += 1;
        span = if alice.parity_of(left) != bob.parity_of(left) {
            left
        } else {
            right
        };
    }
    (span[0], disclosed)
}

/// Modelled error-correction traffic `[n N / (m l0)] log2 l0`.
pub(crate) fn model_leak(output_len: usize, l0: usize, m_over_n: f64) -> f64 {
    (output_len as f64 / (m_over_n * l0 as f64)).round() * (l0 as f64).log2()
}

pub fn reconcile<R: Rng + ?Sized>(
    pair: &SiftedKeyPair,
    output_len: usize,
    m_over_n: f64,
    rng: &mut R,
) -> Result<ReconciliationResult, KeyError> {
    reconcile_with(pair, output_len, m_over_n, CascadeParams::default(), rng)
}

/// Corrects Bob's key toward Alice's. Passes after the first use a shared
/// random permutation; the loop stops early once the keys agree.
pub fn reconcile_with<R: Rng + ?Sized>(
    pair: &SiftedKeyPair,
    output_len: usize,
    m_over_n: f64,
    params: CascadeParams,
    rng: &mut R,
) -> Result<ReconciliationResult, KeyError> {
    let n = pair.len();
    if pair.qber_estimate > QBER_ABORT {
        return Err(KeyError::QberAbort(pair.qber_estimate));
    }
    if output_len > n {
        return Err(KeyError::OutputTooLong {
            requested: output_len,
            available: n,
        });
    }
    if n == 0 {
        return Err(KeyError::EmptyInput);
    }
    let l0 = if pair.qber_estimate > 0.0 {
        ((1.0 / pair.qber_estimate).floor() as usize).min(n)
    } else {
        n
    };

    let alice = &pair.alice_key;
    let mut bob = pair.bob_key.clone();
    let mut passes: Vec<Pass> = Vec::new();
    let mut leaked = 0usize;
    let mut corrections = 0usize;
    let mut first_searches = 0usize;
    let mut first_bits = 0usize;
    let mut block_len = l0;
    let mut order: Vec<usize> = (0..n).collect();

    for pass_idx in 0..params.passes {
        if pass_idx > 0 {
            if bob == *alice {
                break;
            }
            order.shuffle(rng);
            block_len = (block_len * params.growth).min(n);
        }
        passes.push(Pass::new(&order, block_len));
        // Alice discloses every block parity of the new pass.
        leaked += passes[pass_idx].blocks.len();

        let mut queue: VecDeque<(usize, usize)> =
            (0..passes[pass_idx].blocks.len()).map(|b| (pass_idx, b)).collect();
        while let Some((p, b)) = queue.pop_front() {
            let block = &passes[p].blocks[b];
            if alice.parity_of(block) == bob.parity_of(block) {
                continue;
            }
            let (pos, disclosed) = bisect(alice, &bob, block);
            leaked += disclosed;
            if p == 0 && pass_idx == 0 && block.len() == l0 {
                first_searches += 1;
                first_bits += disclosed;
            }
            bob.flip(pos);
            corrections += 1;
            for (q, other) in passes.iter().enumerate() {
                if q != p {
                    queue.push_back((q, other.block_of[pos]));
                }
            }
        }
    }

    let residual = alice.hamming(&bob);
    if residual > 0 {
        return Err(KeyError::ReconciliationFailed {
            residual,
            passes: passes.len(),
        });
    }
    Ok(ReconciliationResult {
        corrected_alice: alice.clone(),
        corrected_bob: bob,
        leaked_model: model_leak(output_len, l0, m_over_n),
        leaked_bits: leaked,
        block_length_l0: l0,
        passes_run: passes.len(),
        corrections,
        first_pass_searches: first_searches,
        first_pass_search_bits: first_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair_with_errors(n: usize, qber: f64, seed: u64) -> SiftedKeyPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alice = Bits::random(n, &mut rng);
        let bob = alice.xor(&Bits::bernoulli(n, qber, &mut rng));
        SiftedKeyPair::with_known_qber(alice, bob, qber)
    }

    #[test]
    fn model_leak_matches_formula() {
        let pair = pair_with_errors(1024, 0.1, 1);
        let r = reconcile(&pair, 8, 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.block_length_l0, 10);
        assert!((r.leaked_model - 4.0 * 10f64.log2()).abs() < 1e-12);
        assert!((r.leaked_model - 13.29).abs() < 0.01);
    }

    #[test]
    fn identical_keys_leak_one_parity_per_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let key = Bits::random(100, &mut rng);
        let pair = SiftedKeyPair::with_known_qber(key.clone(), key.clone(), 0.1);
        let r = reconcile(&pair, 10, 0.2, &mut rng).unwrap();
        assert_eq!(r.corrections, 0);
        assert_eq!(r.leaked_bits, 10);
        assert_eq!(r.passes_run, 1);
        assert_eq!(r.corrected_bob, key);
    }

    #[test]
    fn planted_single_error_found_within_log_bound() {
        // l0 = floor(1/0.01) = 100 covers the whole key in one block.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alice = Bits::random(100, &mut rng);
        for planted in [0usize, 37, 63, 99] {
            let mut bob = alice.clone();
            bob.flip(planted);
            let pair = SiftedKeyPair::with_known_qber(alice.clone(), bob, 0.01);
            let r = reconcile(&pair, 10, 0.2, &mut rng).unwrap();
            assert_eq!(r.block_length_l0, 100);
            assert_eq!(r.corrections, 1);
            assert_eq!(r.first_pass_searches, 1);
            // Hand trace of halving 100 -> 50 -> 25 -> 12|13 -> 6|7 -> 3|4 -> 1|2 -> 1.
            assert!(r.first_pass_search_bits <= 7);
            assert!(r.first_pass_search_bits >= 6);
            // One parity for the block plus the bisection parities.
            assert_eq!(r.leaked_bits, 1 + r.first_pass_search_bits);
            assert_eq!(r.corrected_bob, alice);
        }
    }

    #[test]
    fn bisection_depth_for_ten_bit_blocks() {
        // Averaged over the ten error positions, halving 10 -> 5 -> 2|3 -> ... costs 3.4 parities.
        let alice = Bits::zeros(10);
        let total: usize = (0..10)
            .map(|pos| {
                let mut bob = alice.clone();
                bob.flip(pos);
                let positions: Vec<usize> = (0..10).collect();
                let (found, bits) = bisect(&alice, &bob, &positions);
                assert_eq!(found, pos);
                bits
            })
            .sum();
        assert_eq!(total, 34);
    }

    #[test]
    fn output_longer_than_key_rejected() {
        let pair = pair_with_errors(32, 0.05, 4);
        assert!(matches!(
            reconcile(&pair, 33, 0.2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(KeyError::OutputTooLong { .. })
        ));
    }

    #[test]
    fn typical_keys_reconcile() {
        for seed in 0..20 {
            let pair = pair_with_errors(1024, 0.1, 100 + seed);
            let r = reconcile(&pair, 64, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
            if let Ok(r) = r {
                assert_eq!(r.corrected_alice, r.corrected_bob);
            }
        }
    }
}
