//! Privacy amplification by a seeded random binary Toeplitz matrix over GF(2).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::KeyError;
use crate::bits::Bits;

/// An `m x n` Toeplitz matrix, stored as its `n + m - 1` diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzHash {
    input_len: usize,
    output_len: usize,
    diagonals: Bits,
}

impl ToeplitzHash {
    pub fn new(input_len: usize, output_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag_len = (input_len + output_len).saturating_sub(1);
        Self {
            input_len,
            output_len,
            diagonals: Bits::random(diag_len, &mut rng),
        }
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    /// Entry `(row, col)`; constant along each diagonal.
    pub fn entry(&self, row: usize, col: usize) -> bool {
        self.diagonals.get(row + self.input_len - 1 - col)
    }

    /// Row `r` is the parity of the key, reversed, ANDed with diagonals
    /// `r..r + n`; both are packed into 64-bit words.
    pub fn apply(&self, key: &Bits) -> Bits {
        assert_eq!(key.len(), self.input_len, "hash input length mismatch");
        let n = self.input_len;
        let diag = pack(self.diagonals.iter());
        let reversed = pack((0..n).rev().map(|j| key.get(j)));
        let word_at = |bit: usize| {
            let (a, b) = (bit / 64, bit % 64);
            let lo = diag.get(a).copied().unwrap_or(0) >> b;
            let hi = if b == 0 { 0 } else { diag.get(a + 1).copied().unwrap_or(0) << (64 - b) };
            lo | hi
        };
        (0..self.output_len)
            .map(|row| {
                let acc = reversed
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (q, &k)| acc ^ (word_at(row + 64 * q) & k));
                acc.count_ones() % 2 == 1
            })
            .collect()
    }
}

/// Little-endian bit packing; trailing bits of the last word are zero.
fn pack(bits: impl Iterator<Item = bool>) -> Vec<u64> {
    let mut words = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 64 == 0 {
            words.push(0u64);
        }
        if b {
            *words.last_mut().expect("pushed above") |= 1 << (i % 64);
        }
    }
    words
}

/// Compresses `key` (length `n`) to `n - leaked_t - security_s` bits.
pub fn privacy_amplify(key: &Bits, leaked_t: usize, security_s: usize, seed: u64) -> Result<Bits, KeyError> {
    let n = key.len();
    let out = n
        .checked_sub(leaked_t + security_s)
        .filter(|&m| m >= 1)
        .ok_or(KeyError::InsufficientMaterial {
            n,
            t: leaked_t,
            s: security_s,
        })?;
    Ok(ToeplitzHash::new(n, out, seed).apply(key))
}
