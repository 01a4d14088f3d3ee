//! Closed-form security and delay models.
//!
//! * algorithm strength `S_A = eta * R * log2(N)`, normalised by AES-256
//! * overall security `S = 1 - eps * r * (1 - S_A)`
//! * per-message load `l = N + [n N / (m l0)] log2(l0)` with `l0 = floor(1/e)`
//! * round-trip delay `tau = T0 + 2 l / C + dtau`

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::cipherset::{CipherKind, CipherSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("QBER {0} outside (0, 0.11]")]
    QberOutOfRange(f64),
    #[error("m/n ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("reuse count {r} invalid for {bits}-bit keys (need 1 <= r < 2^{bits})")]
    InvalidReuse { bits: u32, r: u64 },
    #[error("no security margin: n = {n} <= t + m = {}", t + m)]
    NoSecurity { n: u64, t: u64, m: u64 },
    #[error("key length must be at least 2 bits, got {0}")]
    KeyTooShort(usize),
}

/// Strength of AES-256 (eta 1, 14 rounds, log2 256 = 8), the normalising constant.
pub const AES256_STRENGTH: f64 = 112.0;

/// Highest QBER at which key distribution proceeds.
pub const QBER_ABORT: f64 = 0.11;

/// Operation counts of one round function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCounts {
    pub byte_sub: f64,
    pub shift_row: f64,
    pub mix_column: f64,
    pub round_key_add: f64,
}

impl OpCounts {
    pub const fn new(byte_sub: f64, shift_row: f64, mix_column: f64, round_key_add: f64) -> Self {
        Self {
            byte_sub,
            shift_row,
            mix_column,
            round_key_add,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.byte_sub, self.shift_row, self.mix_column, self.round_key_add]
    }
}

pub const XOR_OPS: OpCounts = OpCounts::new(0.0, 0.0, 0.0, 32.0);
pub const FEISTEL_OPS: OpCounts = OpCounts::new(64.0, 1.0, 0.0, 32.0);
pub const SPN_OPS: OpCounts = OpCounts::new(256.0, 3.0, 1.0, 128.0);

/// Per-operation security contributions; the four SPN weights are 0.25 each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaBreakdown {
    pub s_bytesub: f64,
    pub s_shiftrow: f64,
    pub s_mixcolumn: f64,
    pub s_roundkeyadd: f64,
}

impl EtaBreakdown {
    pub fn eta(&self) -> f64 {
        self.s_bytesub + self.s_shiftrow + self.s_mixcolumn + self.s_roundkeyadd
    }
}

pub fn eta_breakdown(ops: &OpCounts, spn: &OpCounts) -> EtaBreakdown {
    let c = ops.as_array();
    let s = spn.as_array();
    assert!(s.iter().all(|&v| v > 0.0), "SPN operation counts must be positive");
    let w = |i: usize| c[i] / s[i] * 0.25;
    EtaBreakdown {
        s_bytesub: w(0),
        s_shiftrow: w(1),
        s_mixcolumn: w(2),
        s_roundkeyadd: w(3),
    }
}

pub fn eta_of(ops: &OpCounts, spn: &OpCounts) -> f64 {
    eta_breakdown(ops, spn).eta()
}

/// `log2(n)` to two decimals, the precision the strength table is built
/// from (192-bit keys enter as 7.58).
pub fn tabulated_log2(n: usize) -> f64 {
    ((n as f64).log2() * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityParams {
    pub eta: f64,
    pub rounds: u32,
    pub key_len: usize,
    /// Insecurity of the distributed keys.
    pub epsilon: f64,
    /// Average number of times a key is used.
    pub reuse_r: f64,
}

impl SecurityParams {
    pub fn for_cipher(spec: &CipherSpec, epsilon: f64, reuse_r: f64) -> Self {
        Self {
            eta: spec.eta,
            rounds: spec.rounds,
            key_len: spec.key_len,
            epsilon,
            reuse_r,
        }
    }
}

/// Normalised algorithm strength, 1 for AES-256.
pub fn security_algorithm(p: &SecurityParams) -> Result<f64, MetricsError> {
    if p.key_len < 2 {
        return Err(MetricsError::KeyTooShort(p.key_len));
    }
    Ok(p.eta * p.rounds as f64 * tabulated_log2(p.key_len) / AES256_STRENGTH)
}

pub fn security_overall(p: &SecurityParams) -> Result<f64, MetricsError> {
    let s_a = security_algorithm(p)?;
    Ok(1.0 - p.epsilon * p.reuse_r * (1.0 - s_a))
}

/// Cascade block length `floor(1/e)`.
pub fn block_length(qber: f64) -> Result<usize, MetricsError> {
    if !(qber > 0.0 && qber <= QBER_ABORT) {
        return Err(MetricsError::QberOutOfRange(qber));
    }
    Ok((1.0 / qber).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommLoad {
    /// Total bits exchanged per message, `N + l_EC`.
    pub total_bits: f64,
    /// Error-correction traffic `l_EC`.
    pub ec_bits: f64,
    pub l0: usize,
    /// Exact value of `n N / (m l0)` before rounding.
    pub blocks_exact: f64,
    /// Set when the block count was not an integer and had to be rounded.
    pub rounded: bool,
}

pub fn comm_load_detail(key_len: usize, qber: f64, m_over_n: f64) -> Result<CommLoad, MetricsError> {
    comm_load_for_block(key_len, block_length(qber)?, m_over_n)
}

/// Load for an explicit Cascade block length `l0`.
pub fn comm_load_for_block(key_len: usize, l0: usize, m_over_n: f64) -> Result<CommLoad, MetricsError> {
    assert!(l0 >= 1, "block length must be positive");
    if !(m_over_n > 0.0 && m_over_n <= 1.0) {
        return Err(MetricsError::RatioOutOfRange(m_over_n));
    }
    let blocks_exact = key_len as f64 / (m_over_n * l0 as f64);
    let blocks = blocks_exact.round();
    let rounded = (blocks - blocks_exact).abs() > 1e-9 * blocks_exact.max(1.0);
    let ec_bits = blocks * (l0 as f64).log2();
    Ok(CommLoad {
        total_bits: key_len as f64 + ec_bits,
        ec_bits,
        l0,
        blocks_exact,
        rounded,
    })
}

pub fn comm_load(key_len: usize, qber: f64, m_over_n: f64) -> Result<f64, MetricsError> {
    comm_load_detail(key_len, qber, m_over_n).map(|c| c.total_bits)
}

/// Round-trip delay model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayParams {
    /// Delay without encryption traffic, seconds.
    pub t0: f64,
    /// Channel capacity, bits per second.
    pub bandwidth: f64,
    pub qber: f64,
    pub m_over_n: f64,
    /// Mean and standard deviation of the hardware jitter `dtau`, seconds.
    pub jitter_mean: f64,
    pub jitter_std: f64,
}

impl Default for DelayParams {
    fn default() -> Self {
        Self {
            t0: 0.055,
            bandwidth: 18000.0,
            qber: 0.1,
            m_over_n: 0.2,
            jitter_mean: 0.004,
            jitter_std: 0.002,
        }
    }
}

impl DelayParams {
    /// `T0 + 2 l / C` for a message load of `load_bits`.
    pub fn deterministic(&self, load_bits: f64) -> f64 {
        self.t0 + 2.0 * load_bits / self.bandwidth
    }

    /// Hardware jitter drawn from a normal distribution truncated at zero.
    pub fn sample_jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.jitter_std <= 0.0 {
            return self.jitter_mean.max(0.0);
        }
        let normal = Normal::new(self.jitter_mean, self.jitter_std).expect("finite jitter std");
        for _ in 0..64 {
            let v = normal.sample(rng);
            if v >= 0.0 {
                return v;
            }
        }
        0.0
    }
}

/// Round-trip delay for a cipher with key length `key_len`.
pub fn round_trip_delay<R: Rng + ?Sized>(
    params: &DelayParams,
    key_len: usize,
    sample_noise: bool,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    let load = comm_load(key_len, params.qber, params.m_over_n)?;
    let jitter = if sample_noise {
        params.sample_jitter(rng)
    } else {
        0.0
    };
    Ok(params.deterministic(load) + jitter)
}

/// Posterior probability of guessing a plaintext of `l_bits` bits when its
/// key has been used `r` times.
pub fn reuse_leakage(l_bits: u32, r: u64) -> Result<f64, MetricsError> {
    let space = 2f64.powi(l_bits as i32);
    if r < 1 || (r as f64) >= space {
        return Err(MetricsError::InvalidReuse { bits: l_bits, r });
    }
    Ok(r as f64 / space)
}

/// Bound on the eavesdropper's information after hashing an `n`-bit key to
/// `m` bits when `t` bits have leaked.
pub fn pa_bound(n: u64, t: u64, m: u64) -> Result<f64, MetricsError> {
    if n <= t + m {
        return Err(MetricsError::NoSecurity { n, t, m });
    }
    Ok(2f64.powi(-((n - t - m) as i32)) / std::f64::consts::LN_2)
}

/// One row of the algorithm strength table.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthRow {
    pub algorithm: String,
    pub eta: f64,
    /// `None` for the parametric n-round Feistel row.
    pub rounds: Option<u32>,
    pub log2_key_len: f64,
    /// For the parametric row this is the per-round coefficient.
    pub s_a: f64,
}

pub fn strength_table() -> Vec<StrengthRow> {
    let row = |spec: CipherSpec, algorithm: &str| StrengthRow {
        algorithm: algorithm.to_string(),
        eta: spec.eta,
        rounds: Some(spec.rounds),
        log2_key_len: tabulated_log2(spec.key_len),
        s_a: security_algorithm(&SecurityParams::for_cipher(&spec, 0.0, 1.0)).unwrap(),
    };
    let one_round = CipherSpec::feistel(1);
    vec![
        row(CipherSpec::xor(), "XOR"),
        StrengthRow {
            rounds: None,
            ..row(one_round, "n-Feistel")
        },
        row(CipherSpec::des(), "DES"),
        row(CipherSpec::new(CipherKind::Aes128), "AES(128)"),
        row(CipherSpec::new(CipherKind::Aes192), "AES(192)"),
        row(CipherSpec::new(CipherKind::Aes256), "AES(256)"),
    ]
}

/// Per-round strength of an n-round Feistel network at the four decimals the
/// strength table prints; the n-round rows scale this rounded value.
pub fn feistel_round_coefficient() -> f64 {
    let one = security_algorithm(&SecurityParams::for_cipher(&CipherSpec::feistel(1), 0.0, 1.0)).unwrap();
    (one * 1e4).round() / 1e4
}

/// The strength table with the parametric Feistel row expanded to
/// `max_rounds` concrete rows.
pub fn strength_table_expanded(max_rounds: u32) -> Vec<StrengthRow> {
    let base = strength_table();
    let coef = feistel_round_coefficient();
    let mut rows = vec![base[0].clone()];
    rows.extend((1..=max_rounds).map(|n| StrengthRow {
        algorithm: format!("{n}-Feistel"),
        rounds: Some(n),
        s_a: coef * n as f64,
        ..base[1].clone()
    }));
    rows.extend(base[2..].iter().cloned());
    rows
}

/// Rows of the round-function complexity table: (operation, XOR, Feistel, SPN).
pub fn round_complexity_table() -> Vec<(String, f64, f64, f64)> {
    let x = eta_breakdown(&XOR_OPS, &SPN_OPS);
    let f = eta_breakdown(&FEISTEL_OPS, &SPN_OPS);
    let s = eta_breakdown(&SPN_OPS, &SPN_OPS);
    let mut rows: Vec<(String, f64, f64, f64)> = [
        ("ByteSub", XOR_OPS.byte_sub, FEISTEL_OPS.byte_sub, SPN_OPS.byte_sub),
        ("ShiftRow", XOR_OPS.shift_row, FEISTEL_OPS.shift_row, SPN_OPS.shift_row),
        ("MixColumn", XOR_OPS.mix_column, FEISTEL_OPS.mix_column, SPN_OPS.mix_column),
        (
            "RoundKeyAddition",
            XOR_OPS.round_key_add,
            FEISTEL_OPS.round_key_add,
            SPN_OPS.round_key_add,
        ),
    ]
    .into_iter()
    .map(|(n, a, b, c)| (n.to_string(), a, b, c))
    .collect();
    rows.push(("S_B".into(), x.s_bytesub, f.s_bytesub, s.s_bytesub));
    rows.push(("S_S".into(), x.s_shiftrow, f.s_shiftrow, s.s_shiftrow));
    rows.push(("S_M".into(), x.s_mixcolumn, f.s_mixcolumn, s.s_mixcolumn));
    rows.push(("S_R".into(), x.s_roundkeyadd, f.s_roundkeyadd, s.s_roundkeyadd));
    rows.push(("eta".into(), x.eta(), f.eta(), s.eta()));
    rows
}

/// Security and modelled delay of one algorithm in the tradeoff comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub cipher: CipherSpec,
    pub s_a: f64,
    pub s: f64,
    /// Round-trip delay with zero jitter, seconds.
    pub model_delay: f64,
}

pub fn tradeoff_table(epsilon: f64, reuse_r: f64, delay: &DelayParams) -> Result<Vec<TradeoffRow>, MetricsError> {
    CipherSpec::tradeoff_lineup()
        .into_iter()
        .map(|cipher| {
            let p = SecurityParams::for_cipher(&cipher, epsilon, reuse_r);
            let load = comm_load(cipher.key_len, delay.qber, delay.m_over_n)?;
            Ok(TradeoffRow {
                s_a: security_algorithm(&p)?,
                s: security_overall(&p)?,
                model_delay: delay.deterministic(load),
                cipher,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(spec: &CipherSpec, eps: f64, r: f64) -> SecurityParams {
        SecurityParams::for_cipher(spec, eps, r)
    }

    #[test]
    fn eta_from_operation_counts() {
        assert!((eta_of(&XOR_OPS, &SPN_OPS) - 0.0625).abs() < 1e-12);
        assert!((eta_of(&FEISTEL_OPS, &SPN_OPS) - 0.2083).abs() < 1e-4);
        assert_eq!(eta_of(&SPN_OPS, &SPN_OPS), 1.0);
        let f = eta_breakdown(&FEISTEL_OPS, &SPN_OPS);
        assert!((f.s_shiftrow - 0.0833).abs() < 1e-4);
    }

    #[test]
    fn expanded_table_scales_rounded_coefficient() {
        let rows = strength_table_expanded(16);
        assert_eq!(rows.len(), 1 + 16 + 4);
        assert_eq!(feistel_round_coefficient(), 0.0112);
        assert!((rows[8].s_a - 0.0896).abs() < 1e-12);
        assert!((rows[16].s_a - 0.1792).abs() < 1e-12);
        assert!((rows[17].s_a - 0.1785).abs() < 1e-4);
        assert_eq!(rows[17].algorithm, "DES");
    }

    #[test]
    fn strength_examples() {
        let xor = security_algorithm(&params(&CipherSpec::xor(), 0.0, 1.0)).unwrap();
        assert!((xor - 0.0017).abs() < 5e-5);
        let f8 = security_algorithm(&params(&CipherSpec::feistel(8), 0.0, 1.0)).unwrap();
        assert!((f8 - 0.0893).abs() < 1e-4);
        let aes = security_algorithm(&params(&CipherSpec::aes(256).unwrap(), 0.0, 1.0)).unwrap();
        assert_eq!(aes, 1.0);
    }

    #[test]
    fn overall_security_examples() {
        let s = security_overall(&params(&CipherSpec::xor(), 0.1, 1.0)).unwrap();
        assert!((s - 0.9002).abs() < 1e-4);
        let s = security_overall(&params(&CipherSpec::aes(192).unwrap(), 0.1, 1.0)).unwrap();
        assert!((s - 0.9812).abs() < 1e-4);
        for (eps, r) in [(0.0, 1.0), (0.5, 3.0), (1.0, 1.0)] {
            let s = security_overall(&params(&CipherSpec::aes(256).unwrap(), eps, r)).unwrap();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn comm_load_examples() {
        assert!((comm_load(8, 0.1, 0.2).unwrap() - 21.29).abs() < 0.01);
        assert!((comm_load(256, 0.1, 0.2).unwrap() - 681.21).abs() < 0.01);
        assert_eq!(block_length(0.11).unwrap(), 9);
        // A unit block carries no reconciliation traffic.
        assert_eq!(comm_load_for_block(8, 1, 0.2).unwrap().total_bits, 8.0);
        assert!(comm_load(8, 0.0, 0.2).is_err());
        assert!(comm_load(8, 0.2, 0.2).is_err());
        assert!(comm_load(8, 0.1, 0.0).is_err());
    }

    #[test]
    fn rounding_flag() {
        assert!(!comm_load_detail(8, 0.1, 0.2).unwrap().rounded);
        assert!(comm_load_detail(7, 0.1, 0.2).unwrap().rounded);
    }

    #[test]
    fn delay_examples() {
        let d = DelayParams::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut tau = |n| round_trip_delay(&d, n, false, &mut rng).unwrap();
        assert!((tau(256) - 0.1307).abs() < 1e-4);
        assert!((tau(192) - 0.1118).abs() < 1e-4);
        assert!((tau(8) - 0.0574).abs() < 1e-4);
    }

    #[test]
    fn jitter_is_nonnegative() {
        use rand::SeedableRng;
        let d = DelayParams {
            jitter_mean: 0.0,
            ..DelayParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert!((0..10_000).all(|_| d.sample_jitter(&mut rng) >= 0.0));
    }

    #[test]
    fn reuse_leakage_examples() {
        assert_eq!(reuse_leakage(8, 1).unwrap(), 1.0 / 256.0);
        assert_eq!(reuse_leakage(8, 4).unwrap(), 4.0 / 256.0);
        assert!(reuse_leakage(8, 256).is_err());
        assert!(reuse_leakage(8, 0).is_err());
    }

    #[test]
    fn pa_bound_examples() {
        assert!((pa_bound(100, 20, 60).unwrap() - 1.376e-6).abs() < 1e-9);
        assert!((pa_bound(10, 4, 5).unwrap() - 0.7213).abs() < 1e-4);
        assert!(pa_bound(10, 5, 5).is_err());
        let a = pa_bound(100, 20, 50).unwrap();
        let b = pa_bound(100, 20, 49).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_complexity_rows() {
        let rows = round_complexity_table();
        let eta = rows.last().unwrap();
        assert_eq!(eta.0, "eta");
        assert!((eta.1 - 0.0625).abs() < 1e-12);
        assert!((eta.2 - 0.2083).abs() < 1e-4);
        assert_eq!(eta.3, 1.0);
    }
}
