//! Simulated BB84 post-detection pipeline and the key pools it feeds.
//!
//! The photon layer is abstracted to bit strings: Alice's bits and bases,
//! Bob's bases, and a mask of channel-induced flips. From there the pipeline
//! runs sifting, QBER estimation on sacrificed check bits, Cascade
//! reconciliation, and Toeplitz-hash privacy amplification.

mod cascade;
mod pool;
mod toeplitz;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::bits::Bits;
use crate::metrics::QBER_ABORT;

pub use self::cascade::{reconcile, reconcile_with, CascadeParams, ReconciliationResult, DEFAULT_PASSES};
pub use self::pool::{KeyGrade, KeyPool, KeySource, KeySourceConfig, KeySourceStats, PoolKey, PooledLink};
pub use self::toeplitz::{privacy_amplify, ToeplitzHash};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyError {
    #[error("empty photon batch")]
    EmptyInput,
    #[error("photon batch sequences have unequal lengths")]
    LengthMismatch,
    #[error("estimated QBER {0:.4} exceeds the abort threshold")]
    QberAbort(f64),
    #[error("reconciliation left {residual} mismatched bits after {passes} passes")]
    ReconciliationFailed { residual: usize, passes: usize },
    #[error("requested {requested} output bits from a {available}-bit key")]
    OutputTooLong { requested: usize, available: usize },
    #[error("privacy amplification leaves no key: n = {n}, t = {t}, s = {s}")]
    InsufficientMaterial { n: usize, t: usize, s: usize },
}

/// One batch of transmitted photons, reduced to classical bits.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonBatch {
    pub alice_bits: Bits,
    pub alice_bases: Bits,
    pub bob_bases: Bits,
    /// Positions where the channel flipped Bob's outcome.
    pub flip_mask: Bits,
}

impl PhotonBatch {
    /// Uniform bits and bases with independent flips at rate `qber`.
    pub fn generate<R: Rng + ?Sized>(len: usize, qber: f64, rng: &mut R) -> Self {
        Self {
            alice_bits: Bits::random(len, rng),
            alice_bases: Bits::random(len, rng),
            bob_bases: Bits::random(len, rng),
            flip_mask: Bits::bernoulli(len, qber, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.alice_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice_bits.is_empty()
    }

    fn validate(&self) -> Result<(), KeyError> {
        let n = self.alice_bits.len();
        if [&self.alice_bases, &self.bob_bases, &self.flip_mask]
            .iter()
            .any(|b| b.len() != n)
        {
            return Err(KeyError::LengthMismatch);
        }
        if n == 0 {
            return Err(KeyError::EmptyInput);
        }
        Ok(())
    }

    /// Alice's and Bob's bits at the positions where the bases agree.
    pub fn matched(&self) -> Result<(Bits, Bits), KeyError> {
        self.validate()?;
        let mut alice = Bits::new();
        let mut bob = Bits::new();
        for i in 0..self.len() {
            if self.alice_bases.get(i) == self.bob_bases.get(i) {
                let a = self.alice_bits.get(i);
                alice.push(a);
                bob.push(a ^ self.flip_mask.get(i));
            }
        }
        Ok((alice, bob))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftedKeyPair {
    pub alice_key: Bits,
    pub bob_key: Bits,
    pub qber_estimate: f64,
    pub check_bits_spent: usize,
}

impl SiftedKeyPair {
    /// A pair with a known error rate, bypassing estimation.
    pub fn with_known_qber(alice_key: Bits, bob_key: Bits, qber: f64) -> Self {
        assert_eq!(alice_key.len(), bob_key.len());
        Self {
            alice_key,
            bob_key,
            qber_estimate: qber,
            check_bits_spent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.alice_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice_key.is_empty()
    }
}

/// Keeps basis-matched positions, then sacrifices `check_fraction` of them
/// (chosen at random, removed from both keys) to estimate the QBER.
pub fn sift<R: Rng + ?Sized>(
    batch: &PhotonBatch,
    check_fraction: f64,
    rng: &mut R,
) -> Result<SiftedKeyPair, KeyError> {
    let (alice, bob) = batch.matched()?;
    estimate_and_trim(alice, bob, check_fraction, rng)
}

pub(crate) fn estimate_and_trim<R: Rng + ?Sized>(
    alice: Bits,
    bob: Bits,
    check_fraction: f64,
    rng: &mut R,
) -> Result<SiftedKeyPair, KeyError> {
    let n = alice.len();
    let n_check = ((n as f64) * check_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut is_check = vec![false; n];
    for i in index::sample(rng, n, n_check.min(n)) {
        is_check[i] = true;
    }
    let mut errors = 0usize;
    let mut alice_key = Bits::new();
    let mut bob_key = Bits::new();
    for i in 0..n {
        let (a, b) = (alice.get(i), bob.get(i));
        if is_check[i] {
            errors += (a != b) as usize;
        } else {
            alice_key.push(a);
            bob_key.push(b);
        }
    }
    let qber_estimate = if n_check == 0 {
        0.0
    } else {
        errors as f64 / n_check as f64
    };
    if qber_estimate > QBER_ABORT {
        return Err(KeyError::QberAbort(qber_estimate));
    }
    Ok(SiftedKeyPair {
        alice_key,
        bob_key,
        qber_estimate,
        check_bits_spent: n_check,
    })
}
