//! Key pools on both ends of a QKD link and the source that refills them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cascade::{reconcile_with, CascadeParams};
use super::{estimate_and_trim, privacy_amplify, KeyError, PhotonBatch};
use crate::bits::Bits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyGrade {
    /// Sifted bits used as-is; Alice's and Bob's copies differ at the QBER.
    Raw,
    /// Reconciled and privacy-amplified.
    #[default]
    Final,
}

impl FromStr for KeyGrade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "raw" => Ok(Self::Raw),
            "final" => Ok(Self::Final),
            other => Err(format!("unknown key grade `{other}` (expected raw|final)")),
        }
    }
}

impl fmt::Display for KeyGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Final => "final",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolKey {
    pub id: u64,
    pub bits: Bits,
    pub grade: KeyGrade,
    pub use_count: u32,
}

/// Ordered key store on one side of the link.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPool {
    key_len: usize,
    keys: Vec<PoolKey>,
    next_id: u64,
}

impl KeyPool {
    pub fn new(key_len: usize) -> Self {
        assert!(key_len > 0);
        Self {
            key_len,
            keys: Vec::new(),
            next_id: 0,
        }
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[PoolKey] {
        &self.keys
    }

    /// Keys are stored densely, so ids double as indices.
    pub fn get(&self, id: u64) -> Option<&PoolKey> {
        self.keys.get(id as usize)
    }

    pub fn mark_used(&mut self, id: u64) {
        if let Some(k) = self.keys.get_mut(id as usize) {
            k.use_count += 1;
        }
    }

    fn push(&mut self, bits: Bits, grade: KeyGrade) {
        debug_assert_eq!(bits.len(), self.key_len);
        self.keys.push(PoolKey {
            id: self.next_id,
            bits,
            grade,
            use_count: 0,
        });
        self.next_id += 1;
    }

    /// Keys used at least once, and the total number of uses.
    pub fn usage(&self) -> (usize, u64) {
        self.keys
            .iter()
            .filter(|k| k.use_count > 0)
            .fold((0, 0), |(n, u), k| (n + 1, u + k.use_count as u64))
    }

    pub fn max_use_count(&self) -> u32 {
        self.keys.iter().map(|k| k.use_count).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySourceConfig {
    pub qber: f64,
    /// Sifted bits per second.
    pub generation_rate_bps: f64,
    pub check_fraction: f64,
    pub pa_security_s: usize,
    /// Privacy-amplification compression ratio m/n.
    pub m_over_n: f64,
    /// Sifted bits accumulate until at least this many are available.
    pub min_chunk: usize,
    pub max_chunk: usize,
    pub cascade: CascadeParams,
}

impl Default for KeySourceConfig {
    fn default() -> Self {
        Self {
            qber: 0.1,
            generation_rate_bps: 250_000.0,
            check_fraction: 0.1,
            pa_security_s: 20,
            m_over_n: 0.2,
            min_chunk: 256,
            max_chunk: 4096,
            cascade: CascadeParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeySourceStats {
    pub sifted_bits: u64,
    pub check_bits_spent: u64,
    pub chunks: u64,
    pub qber_aborts: u64,
    pub reconcile_failures: u64,
    pub leaked_bits: u64,
    /// Chunks whose configured compression left less than the requested security margin.
    pub pa_margin_shortfalls: u64,
    pub output_bits: u64,
    pub qber_estimate_sum: f64,
}

impl KeySourceStats {
    pub fn mean_qber_estimate(&self) -> f64 {
        if self.chunks == 0 {
            0.0
        } else {
            self.qber_estimate_sum / self.chunks as f64
        }
    }
}

/// Simulated QKD device producing synchronized bit streams for Alice and Bob.
#[derive(Debug, Clone)]
pub struct KeySource {
    cfg: KeySourceConfig,
    grade: KeyGrade,
    rng: ChaCha8Rng,
    pending: f64,
    stats: KeySourceStats,
}

impl KeySource {
    pub fn new(cfg: KeySourceConfig, grade: KeyGrade, seed: u64) -> Self {
        Self {
            cfg,
            grade,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: 0.0,
            stats: KeySourceStats::default(),
        }
    }

    pub fn config(&self) -> &KeySourceConfig {
        &self.cfg
    }

    pub fn grade(&self) -> KeyGrade {
        self.grade
    }

    pub fn stats(&self) -> &KeySourceStats {
        &self.stats
    }

    /// Exactly `n` basis-matched bit pairs.
    fn sifted_pairs(&mut self, n: usize) -> (Bits, Bits) {
        let mut alice = Bits::new();
        let mut bob = Bits::new();
        while alice.len() < n {
            let want = n - alice.len();
            let batch = PhotonBatch::generate(2 * want + 16, self.cfg.qber, &mut self.rng);
            let (a, b) = batch.matched().expect("nonempty batch");
            alice.extend_from(&a);
            bob.extend_from(&b);
        }
        (alice.slice(0, n), bob.slice(0, n))
    }

    fn process_chunk(&mut self, n: usize) -> Result<(Bits, Bits), KeyError> {
        let (alice, bob) = self.sifted_pairs(n);
        self.stats.sifted_bits += n as u64;
        if self.grade == KeyGrade::Raw {
            return Ok((alice, bob));
        }
        let check = self.cfg.check_fraction;
        let mut pair = estimate_and_trim(alice, bob, check, &mut self.rng)?;
        if pair.check_bits_spent == 0 {
            pair.qber_estimate = self.cfg.qber;
        }
        self.stats.check_bits_spent += pair.check_bits_spent as u64;
        self.stats.qber_estimate_sum += pair.qber_estimate;
        let n_kept = pair.len();
        let m = (n_kept as f64 * self.cfg.m_over_n).floor() as usize;
        if m == 0 {
            return Ok((Bits::new(), Bits::new()));
        }
        let result = reconcile_with(&pair, m, self.cfg.m_over_n, self.cfg.cascade, &mut self.rng)?;
        let t = result.leaked_bits;
        self.stats.leaked_bits += t as u64;
        // Compress to m bits; whatever remains of n - t - m is the security margin.
        let s = n_kept.saturating_sub(t + m);
        if s < self.cfg.pa_security_s {
            self.stats.pa_margin_shortfalls += 1;
        }
        let t_eff = n_kept - m - s;
        let seed = self.rng.random::<u64>();
        let alice = privacy_amplify(&result.corrected_alice, t_eff, s, seed)?;
        let bob = privacy_amplify(&result.corrected_bob, t_eff, s, seed)?;
        Ok((alice, bob))
    }

    /// Advances the source by `elapsed` seconds and returns the key bits
    /// produced for Alice and Bob.
    pub fn generate(&mut self, elapsed: f64) -> (Bits, Bits) {
        assert!(elapsed >= 0.0, "elapsed time must be nonnegative");
        self.pending += self.cfg.generation_rate_bps * elapsed;
        let mut alice = Bits::new();
        let mut bob = Bits::new();
        let min_chunk = self.cfg.min_chunk.max(1) as f64;
        while self.pending >= min_chunk {
            let available = self.pending.floor() as usize;
            let n = available.min(self.cfg.max_chunk.max(1));
            self.pending -= n as f64;
            self.stats.chunks += 1;
            match self.process_chunk(n) {
                Ok((a, b)) => {
                    self.stats.output_bits += a.len() as u64;
                    alice.extend_from(&a);
                    bob.extend_from(&b);
                }
                Err(KeyError::QberAbort(_)) => self.stats.qber_aborts += 1,
                Err(_) => self.stats.reconcile_failures += 1,
            }
        }
        (alice, bob)
    }
}

/// Alice's and Bob's pools, kept in lockstep by key id, plus their source.
#[derive(Debug, Clone)]
pub struct PooledLink {
    pub alice: KeyPool,
    pub bob: KeyPool,
    source: KeySource,
    alice_buf: Bits,
    bob_buf: Bits,
}

impl PooledLink {
    pub fn new(source: KeySource, key_len: usize) -> Self {
        Self {
            alice: KeyPool::new(key_len),
            bob: KeyPool::new(key_len),
            source,
            alice_buf: Bits::new(),
            bob_buf: Bits::new(),
        }
    }

    pub fn grade(&self) -> KeyGrade {
        self.source.grade()
    }

    pub fn source(&self) -> &KeySource {
        &self.source
    }

    /// Appends the keys generated over `elapsed` seconds to both pools.
    pub fn refill(&mut self, elapsed: f64) {
        let (a, b) = self.source.generate(elapsed);
        self.alice_buf.extend_from(&a);
        self.bob_buf.extend_from(&b);
        let key_len = self.alice.key_len();
        let grade = self.grade();
        while self.alice_buf.len() >= key_len {
            self.alice.push(self.alice_buf.take_front(key_len), grade);
            self.bob.push(self.bob_buf.take_front(key_len), grade);
        }
    }

    /// One CSV-ready row per key: id, grade, use count, Alice/Bob Hamming distance.
    pub fn dump_rows(&self) -> Vec<(u64, KeyGrade, u32, usize)> {
        self.alice
            .keys()
            .iter()
            .zip(self.bob.keys())
            .map(|(a, b)| (a.id, a.grade, a.use_count.max(b.use_count), a.bits.hamming(&b.bits)))
            .collect()
    }
}
