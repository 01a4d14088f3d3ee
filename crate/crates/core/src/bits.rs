//! Bit strings used for key material and sifted keys.

use rand::Rng;
use std::fmt;

/// An owned sequence of bits, one `bool` per position.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Bits(Vec<bool>);

impl Bits {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self((0..len).map(|_| rng.random::<bool>()).collect())
    }

    /// Each position is set independently with probability `p`.
    pub fn bernoulli<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Self {
        Self((0..len).map(|_| rng.random::<f64>() < p).collect())
    }

    /// Lowest `len` bits of `value`, most significant first.
    pub fn from_u64(value: u64, len: usize) -> Self {
        assert!(len <= 64);
        Self((0..len).rev().map(|i| (value >> i) & 1 == 1).collect())
    }

    /// Packs up to 64 bits, most significant first.
    pub fn to_u64(&self) -> u64 {
        assert!(self.0.len() <= 64, "bit string too long for u64");
        self.0.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(
            bytes
                .iter()
                .flat_map(|&byte| (0..8).rev().map(move |i| (byte >> i) & 1 == 1))
                .collect(),
        )
    }

    /// Packs into bytes, most significant bit first; the last byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, idx: usize) -> bool {
        self.0[idx]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.0[idx] = value;
    }

    pub fn flip(&mut self, idx: usize) {
        self.0[idx] = !self.0[idx];
    }

    pub fn push(&mut self, value: bool) {
        self.0.push(value);
    }

    pub fn extend_from(&mut self, other: &Bits) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn slice(&self, start: usize, end: usize) -> Bits {
        Bits(self.0[start..end].to_vec())
    }

    /// Splits off the first `n` bits, leaving the remainder in `self`.
    pub fn take_front(&mut self, n: usize) -> Bits {
        let rest = self.0.split_off(n);
        Bits(std::mem::replace(&mut self.0, rest))
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Parity of the bits at `positions`.
    pub fn parity_of(&self, positions: &[usize]) -> bool {
        positions.iter().fold(false, |acc, &p| acc ^ self.0[p])
    }

    pub fn xor(&self, other: &Bits) -> Bits {
        assert_eq!(self.len(), other.len(), "xor of unequal-length bit strings");
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect())
    }

    pub fn hamming(&self, other: &Bits) -> usize {
        assert_eq!(self.len(), other.len(), "hamming of unequal-length bit strings");
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl From<Vec<bool>> for Bits {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

impl FromIterator<bool> for Bits {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits(")?;
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        write!(f, ")")
    }
}
