//! Closed-loop simulation: Bob samples and encrypts y, the channel delays and
//! possibly attacks it, Alice decrypts, detects and computes u, which travels
//! back the same way before the plant steps.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::adversary::{apply_attack, AttackKind, AttackScenario, DetectionRecord, DetectorConfig, Receiver, Verdict, WireMessage};
use crate::bits::Bits;
use crate::cipherset::frame::{from_fixed, to_fixed, PAYLOAD_FRAC_BITS, PAYLOAD_SCALE};
use crate::cipherset::{encode_frame_with, CipherError, CipherKind, CipherSpec, FrameCheck, KeyedTransform};
use crate::controlplant::{
    kalman_predict, kalman_update, ControlError, KalmanState, PIController, PlantModel, DEFAULT_CLAMP, DEFAULT_KI,
    DEFAULT_KP, SERVO_DAMPING, SERVO_GAIN, SERVO_TS,
};
use crate::keysource::{KeyGrade, KeySource, KeySourceConfig, PooledLink};
use crate::metrics::{comm_load, security_overall, DelayParams, MetricsError, SecurityParams};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("key pool underrun on the {path} path at period {period}: slot {slot} requested, {available} {grade} keys generated")]
    KeyUnderrun {
        path: &'static str,
        period: u64,
        grade: KeyGrade,
        slot: u64,
        available: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

impl LoopError {
    /// Process exit status: 2 for a key underrun, 65 for anything rooted in the configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::KeyUnderrun { .. } => 2,
            _ => 65,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSpec {
    pub amplitude: f64,
    /// Step time in seconds.
    pub time: f64,
}

impl ReferenceSpec {
    pub fn at(&self, t: f64) -> f64 {
        if t >= self.time {
            self.amplitude
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub damping: f64,
    pub gain: f64,
    pub ts: f64,
    /// Standard deviation of a physical input disturbance.
    pub noise_std: f64,
    /// Explicit single-input single-output model replacing the servo; its `ts` is ignored in favour of `ts` above.
    pub matrices: Option<PlantModel>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            damping: SERVO_DAMPING,
            gain: SERVO_GAIN,
            ts: SERVO_TS,
            noise_std: 0.0,
            matrices: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub kp: f64,
    pub ki: f64,
    pub clamp: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kp: DEFAULT_KP,
            ki: DEFAULT_KI,
            clamp: DEFAULT_CLAMP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyConfig {
    /// Total sifted-bit rate per path; split between final and raw pools in raw mode.
    pub source: KeySourceConfig,
    /// Seconds of key generation banked before the first period.
    pub prefill_s: f64,
    /// Abort on underrun instead of reusing keys.
    pub strict_otp: bool,
    /// Tile one 8-bit XOR key over the whole frame.
    pub xor_tiling: bool,
}

impl Default for KeyConfig {
    fn default() -> Self {
        Self {
            source: KeySourceConfig::default(),
            prefill_s: 1.0,
            strict_otp: true,
            xor_tiling: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawKeyConfig {
    /// Smoothing threshold on y, in output units.
    pub threshold_delta: f64,
    /// Fixed-point bit index (16 fractional bits) from which y digits are taken from the last good value.
    pub high_digit_split_h: u32,
    pub u_threshold_delta: f64,
    pub u_split_h: u32,
    /// Low payload bits of y keyed with raw key material; higher bits use final keys.
    pub y_raw_bits: u32,
    pub u_raw_bits: u32,
    pub warmup_final_periods: u64,
    /// Share of the sifted-bit rate routed to final-key processing.
    pub final_share: f64,
    /// Accept an outlier when the previous raw reading agrees with it.
    pub persistence_guard: bool,
}

impl Default for RawKeyConfig {
    fn default() -> Self {
        Self {
            threshold_delta: 0.05,
            high_digit_split_h: 13,
            u_threshold_delta: 0.5,
            u_split_h: 16,
            y_raw_bits: 16,
            u_raw_bits: 8,
            warmup_final_periods: 10,
            final_share: 0.85,
            persistence_guard: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    /// Consecutive invalid frames before a verdict; `None` picks 1 for final keys and 3 for raw keys.
    pub window: Option<usize>,
    pub history_depth: usize,
    pub silence_limit: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            window: None,
            history_depth: 1024,
            silence_limit: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub cipher: CipherSpec,
    pub key_grade: KeyGrade,
    pub horizon_periods: u64,
    pub reference: ReferenceSpec,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub delay: DelayParams,
    /// Fraction in [-1, 1] moving round-trip delay toward the y path (positive) or the u path.
    pub delay_asymmetry: f64,
    pub keys: KeyConfig,
    pub attack: AttackScenario,
    pub detection: DetectionConfig,
    pub rawkey: RawKeyConfig,
    pub kalman_enabled: bool,
    /// Multiplier on the analytic process-noise covariance given to the filter.
    pub kalman_q_scale: f64,
    /// Explicit filter covariances, row-major; override the analytic raw-key values.
    pub kalman_q: Option<Vec<f64>>,
    pub kalman_r: Option<f64>,
    /// Probability of successful attack used in the overall security score.
    pub epsilon: f64,
    pub rng_seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            cipher: CipherSpec::xor(),
            key_grade: KeyGrade::Final,
            horizon_periods: 500,
            reference: ReferenceSpec {
                amplitude: 1.0,
                time: 0.0,
            },
            plant: PlantConfig::default(),
            controller: ControllerConfig::default(),
            delay: DelayParams::default(),
            delay_asymmetry: 0.0,
            keys: KeyConfig::default(),
            attack: AttackScenario::default(),
            detection: DetectionConfig::default(),
            rawkey: RawKeyConfig::default(),
            kalman_enabled: false,
            kalman_q_scale: 1.0,
            kalman_q: None,
            kalman_r: None,
            epsilon: 0.1,
            rng_seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::InvalidConfig(m));
        if !(self.plant.ts > 0.0) {
            return bad(format!("sampling period {} must be positive", self.plant.ts));
        }
        if !(-1.0..=1.0).contains(&self.delay_asymmetry) {
            return bad(format!("delay asymmetry {} outside [-1, 1]", self.delay_asymmetry));
        }
        if self.delay.t0 < 0.0 || !(self.delay.bandwidth > 0.0) {
            return bad("delay needs t0 >= 0 and bandwidth > 0".into());
        }
        if self.key_grade == KeyGrade::Raw {
            if self.cipher.kind != CipherKind::Xor {
                return bad(format!(
                    "raw keys need a cipher without avalanche (xor), got {}",
                    self.cipher
                ));
            }
            if self.keys.xor_tiling {
                return bad("raw keys cannot be combined with xor tiling".into());
            }
            if !(self.rawkey.threshold_delta > 0.0) || !(self.rawkey.u_threshold_delta > 0.0) {
                return bad("raw-key thresholds must be positive".into());
            }
            if self.rawkey.high_digit_split_h > 32 || self.rawkey.u_split_h > 32 {
                return bad("high-digit split must lie within the 32-bit payload".into());
            }
            if self.rawkey.y_raw_bits > 32 || self.rawkey.u_raw_bits > 32 {
                return bad("raw-keyed bit count must lie within the 32-bit payload".into());
            }
            if !(0.0..1.0).contains(&self.rawkey.final_share) || self.rawkey.final_share <= 0.0 {
                return bad(format!("final share {} outside (0, 1)", self.rawkey.final_share));
            }
        }
        if let Some(m) = &self.plant.matrices {
            if m.inputs() != 1 || m.outputs() != 1 {
                return bad(format!(
                    "the loop carries one measurement and one command; plant has {} inputs and {} outputs",
                    m.inputs(),
                    m.outputs()
                ));
            }
        }
        if let Some(q) = &self.kalman_q {
            let n = self.plant_model().states();
            if q.len() != n * n {
                return bad(format!("kalman.Q needs {} entries for {n} states, got {}", n * n, q.len()));
            }
        }
        if self.kalman_r.is_some_and(|r| !(r >= 0.0)) {
            return bad("kalman.R must be nonnegative".into());
        }
        if self.kalman_enabled && self.key_grade != KeyGrade::Raw {
            return bad("the Kalman filter is part of the raw-key protocol; set key_grade = raw".into());
        }
        if self.horizon_periods > u32::MAX as u64 {
            return bad("horizon exceeds the sequence space".into());
        }
        self.attack
            .validate(self.horizon_periods)
            .map_err(LoopError::InvalidConfig)
    }

    pub fn plant_model(&self) -> PlantModel {
        match &self.plant.matrices {
            Some(m) => PlantModel {
                ts: self.plant.ts,
                ..m.clone()
            },
            None => PlantModel::servo(self.plant.damping, self.plant.gain, self.plant.ts),
        }
    }

    /// Bits exchanged per period that drive the delay model.
    pub fn load_bits(&self) -> Result<f64, LoopError> {
        Ok(match (self.cipher.kind, self.key_grade) {
            (CipherKind::Plain, _) => 0.0,
            (_, KeyGrade::Raw) => self.cipher.key_len as f64,
            _ => comm_load(self.cipher.key_len, self.delay.qber, self.delay.m_over_n)?,
        })
    }

    /// Round-trip delay without jitter.
    pub fn model_delay(&self) -> Result<f64, LoopError> {
        Ok(self.delay.deterministic(self.load_bits()?))
    }

    fn detector(&self) -> DetectorConfig {
        let raw = self.key_grade == KeyGrade::Raw;
        DetectorConfig {
            window: self.detection.window.unwrap_or(if raw { 3 } else { 1 }),
            history_depth: self.detection.history_depth,
            silence_limit: self.detection.silence_limit,
            check: if raw { FrameCheck::Header } else { FrameCheck::Full },
        }
    }
}

/// Delivery period of a message sent in `send_period` with one-way delay
/// `tau` seconds: the first period boundary at or after send time plus `tau`.
pub fn apply_delay(send_period: u64, tau: f64, ts: f64) -> u64 {
    assert!(tau >= 0.0 && ts > 0.0);
    send_period + (tau / ts - 1e-9).ceil().max(0.0) as u64
}

fn fixed_of(value: f64) -> i64 {
    (value * PAYLOAD_SCALE).round() as i64
}

fn splice(prev: i64, new: i64, h: u32) -> i64 {
    if h >= 32 {
        return new;
    }
    let low = (1i64 << h) - 1;
    let p = prev as i32 as u32 as i64;
    let n = new as i32 as u32 as i64;
    ((p & !low) | (n & low)) as u32 as i32 as i64
}

/// Keeps the fixed-point bits at and above `h` from `y_prev_good` whenever
/// `y_new` moved by more than `delta`.
pub fn smooth_high_digits(y_new: f64, y_prev_good: f64, delta: f64, h: u32) -> f64 {
    if (y_new - y_prev_good).abs() <= delta {
        return y_new;
    }
    splice(fixed_of(y_prev_good), fixed_of(y_new), h) as f64 / PAYLOAD_SCALE
}

/// Variance of the payload error from independent flips with probability
/// `e` of each fixed-point bit below `h`, for uniformly distributed bits.
pub fn raw_noise_variance(e: f64, h: u32) -> f64 {
    (0..h.min(32))
        .map(|k| e * 4f64.powi(k as i32 - PAYLOAD_FRAC_BITS as i32))
        .sum()
}

/// Stateful high-digit smoothing. Unlike the plain splice it picks, among
/// the spliced value and its neighbours one high-digit unit away, the one
/// closest to the last good value, so slow drifts across a digit boundary
/// survive.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoother {
    pub delta: f64,
    pub h: u32,
    pub persistence_guard: bool,
    prev_good: Option<f64>,
    last_raw: Option<f64>,
}

impl Smoother {
    pub fn new(delta: f64, h: u32, persistence_guard: bool) -> Self {
        Self {
            delta,
            h,
            persistence_guard,
            prev_good: None,
            last_raw: None,
        }
    }

    /// Records a trusted reading.
    pub fn accept(&mut self, value: f64) {
        self.prev_good = Some(value);
        self.last_raw = Some(value);
    }

    /// Smooths against the previous output.
    pub fn apply(&mut self, y_new: f64) -> f64 {
        let reference = self.prev_good;
        self.apply_against(y_new, reference)
    }

    /// Smooths against `reference`, e.g. a model prediction of the reading.
    pub fn apply_against(&mut self, y_new: f64, reference: Option<f64>) -> f64 {
        let out = match reference {
            None => y_new,
            Some(prev) if (y_new - prev).abs() <= self.delta => y_new,
            Some(_) if self.persistence_guard && self.last_raw.is_some_and(|r| (y_new - r).abs() <= self.delta) => {
                y_new
            }
            Some(prev) if self.h < 32 => {
                let p = fixed_of(prev);
                let base = splice(p, fixed_of(y_new), self.h);
                let unit = 1i64 << self.h;
                let best = [base - unit, base, base + unit]
                    .into_iter()
                    .filter(|c| (i32::MIN as i64..=i32::MAX as i64).contains(c))
                    .min_by_key(|c| (c - p).abs())
                    .unwrap_or(base);
                best as f64 / PAYLOAD_SCALE
            }
            Some(_) => y_new,
        };
        self.last_raw = Some(y_new);
        self.prev_good = Some(out);
        out
    }
}

/// `sum (r - y)^2 Ts` over the trace.
pub fn performance_score(trace: &[TraceRow], ts: f64) -> Result<f64, LoopError> {
    if trace.is_empty() {
        return Err(LoopError::EmptyTrace);
    }
    Ok(trace.iter().map(|row| (row.r - row.y_true).powi(2) * ts).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub period: u64,
    pub t: f64,
    pub r: f64,
    pub y_true: f64,
    /// Latest measurement Alice decrypted, before smoothing.
    pub y_received: f64,
    /// Measurement fed to the controller after smoothing and, when enabled, filtering.
    pub y_used: f64,
    pub u_sent: f64,
    pub u_applied: f64,
    /// False when any frame delivered this period failed the admissibility check.
    pub frame_valid: bool,
    /// Most severe verdict raised on either path this period.
    pub verdict: Verdict,
    pub tau_roundtrip: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathKeyStats {
    pub final_keys_generated: usize,
    pub raw_keys_generated: usize,
    pub keys_used: usize,
    pub key_uses: u64,
    pub max_use_count: u32,
    pub sifted_bits: u64,
    pub reconcile_failures: u64,
    pub qber_aborts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trace: Vec<TraceRow>,
    pub p_score: f64,
    pub s_score: f64,
    pub keys_consumed: usize,
    pub keys_reused_r: f64,
    pub detection_u: Vec<DetectionRecord>,
    pub detection_y: Vec<DetectionRecord>,
    pub model_delay: f64,
    pub mean_tau: f64,
    pub key_stats_u: PathKeyStats,
    pub key_stats_y: PathKeyStats,
    pub unrecovered_attack: bool,
    /// Key pool rows per path: id, grade, use count, Alice/Bob Hamming distance.
    pub pool_rows: Vec<(&'static str, u64, KeyGrade, u32, usize)>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.unrecovered_attack {
            3
        } else {
            0
        }
    }
}

/// Key slots and pools of one channel direction.
struct PathKeys {
    name: &'static str,
    final_link: Option<PooledLink>,
    raw_link: Option<PooledLink>,
    /// Key material used for each sequence number, in frame order.
    assigned: Vec<Vec<KeySlot>>,
    next_final: u64,
    next_raw: u64,
}

impl PathKeys {
    fn link(&self, grade: KeyGrade) -> &PooledLink {
        match grade {
            KeyGrade::Final => self.final_link.as_ref(),
            KeyGrade::Raw => self.raw_link.as_ref(),
        }
        .expect("link exists for every assigned grade")
    }

    fn refill(&mut self, dt: f64) {
        for link in [self.final_link.as_mut(), self.raw_link.as_mut()].into_iter().flatten() {
            link.refill(dt);
        }
    }

    fn allocate(&mut self, grade: KeyGrade, count: usize, uses: u32, strict: bool, period: u64) -> Result<Vec<u64>, LoopError> {
        let (link, next) = match grade {
            KeyGrade::Final => (self.final_link.as_mut(), &mut self.next_final),
            KeyGrade::Raw => (self.raw_link.as_mut(), &mut self.next_raw),
        };
        let link = link.expect("link exists for requested grade");
        let available = link.alice.len();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let slot = *next;
            let id = if (slot as usize) < available {
                slot
            } else if !strict && available > 0 {
                slot % available as u64
            } else {
                return Err(LoopError::KeyUnderrun {
                    path: self.name,
                    period,
                    grade,
                    slot,
                    available,
                });
            };
            *next += 1;
            for _ in 0..uses {
                link.alice.mark_used(id);
                link.bob.mark_used(id);
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Key bits on the chosen side for sequence `seq`.
    fn key_for(&self, seq: u32, alice_side: bool) -> Option<Bits> {
        let slots = self.assigned.get(seq as usize)?;
        let bits_of = |grade: KeyGrade, id: u64| {
            let link = self.link(grade);
            let pool = if alice_side { &link.alice } else { &link.bob };
            pool.get(id).map(|k| &k.bits)
        };
        let mut key = Bits::new();
        for slot in slots {
            match *slot {
                KeySlot::Whole(grade, id) => key.extend_from(bits_of(grade, id)?),
                KeySlot::Split { final_id, raw_id, raw_low } => {
                    let f = bits_of(KeyGrade::Final, final_id)?;
                    let r = bits_of(KeyGrade::Raw, raw_id)?;
                    let cut = f.len() - raw_low as usize;
                    key.extend_from(&f.slice(0, cut));
                    key.extend_from(&r.slice(cut, r.len()));
                }
            }
        }
        Some(key)
    }

    fn stats(&self) -> PathKeyStats {
        let mut s = PathKeyStats::default();
        for (link, grade) in [(&self.final_link, KeyGrade::Final), (&self.raw_link, KeyGrade::Raw)] {
            let Some(link) = link else { continue };
            match grade {
                KeyGrade::Final => s.final_keys_generated = link.alice.len(),
                KeyGrade::Raw => s.raw_keys_generated = link.alice.len(),
            }
            let (used, uses) = link.alice.usage();
            s.keys_used += used;
            s.key_uses += uses;
            s.max_use_count = s.max_use_count.max(link.alice.max_use_count());
            let st = link.source().stats();
            s.sifted_bits += st.sifted_bits;
            s.reconcile_failures += st.reconcile_failures;
            s.qber_aborts += st.qber_aborts;
        }
        s
    }
}

struct InFlight {
    deliver_at: u64,
    msg: WireMessage,
}

/// One channel direction: keys, channel queue, attack history and receiver.
struct Channel {
    keys: PathKeys,
    /// True when Alice sends on this path.
    alice_sends: bool,
    queue: VecDeque<InFlight>,
    last_delivery: u64,
    history: Vec<WireMessage>,
    rx: Receiver,
    log: Vec<DetectionRecord>,
}

struct Arrival {
    record: DetectionRecord,
}

impl Channel {
    /// Encrypts `frame` for sequence `seq` with the sender's keys.
    fn seal(&self, spec: &CipherSpec, seq: u32, frame: u64) -> Result<Vec<u8>, LoopError> {
        if spec.kind == CipherKind::Plain {
            return Ok(KeyedTransform::new(spec, Bits::new())?.encrypt_frame(frame));
        }
        let key = self
            .keys
            .key_for(seq, self.alice_sends)
            .expect("keys assigned before sealing");
        Ok(KeyedTransform::new(spec, key)?.encrypt_frame(frame))
    }

    fn deliver(&mut self, spec: &CipherSpec, period: u64) -> Vec<Arrival> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|m| m.deliver_at <= period) {
            let m = self.queue.pop_front().expect("front checked");
            let keys = &self.keys;
            let receiver_alice = !self.alice_sends;
            let record = self.rx.receive(period, &m.msg, |k, ct| {
                let key = if spec.kind == CipherKind::Plain {
                    Bits::new()
                } else {
                    keys.key_for(k, receiver_alice)?
                };
                KeyedTransform::new(spec, key).ok()?.decrypt_frame(ct)
            });
            self.log.push(record.clone());
            out.push(Arrival { record });
        }
        out
    }

    fn send(&mut self, msg: WireMessage, deliver_at: u64) {
        let at = deliver_at.max(self.last_delivery);
        self.last_delivery = at;
        self.queue.push_back(InFlight { deliver_at: at, msg });
    }
}

/// Key material for one 8-bit slice of the frame, or a whole block key.
#[derive(Debug, Clone, Copy, PartialEq)]
enum KeySlot {
    Whole(KeyGrade, u64),
    /// High bits from a final key, the lowest `raw_low` bits from a raw key.
    Split { final_id: u64, raw_id: u64, raw_low: u32 },
}

/// Grade of each 8-bit key across the frame in raw mode: header and
/// checksum bytes always use final keys; payload bits below `raw_bits` use raw keys.
fn raw_byte_plan(raw_bits: u32) -> [(u32, u32); 8] {
    // (final bits, raw bits) per byte, most significant byte first.
    let mut plan = [(8, 0); 8];
    for (j, entry) in plan.iter_mut().enumerate().take(7).skip(3) {
        let lo = 8 * (6 - j as u32);
        let raw = raw_bits.saturating_sub(lo).min(8);
        *entry = (8 - raw, raw);
    }
    plan
}

fn assign_keys(ch: &mut Channel, cfg: &LoopConfig, seq: u64, raw_bits: u32) -> Result<(), LoopError> {
    let strict = cfg.keys.strict_otp;
    let keys = &mut ch.keys;
    let mut slots = Vec::new();
    match cfg.cipher.kind {
        CipherKind::Plain => {}
        CipherKind::Xor if cfg.keys.xor_tiling => {
            let id = keys.allocate(KeyGrade::Final, 1, 8, strict, seq)?[0];
            slots.push(KeySlot::Whole(KeyGrade::Final, id));
        }
        CipherKind::Xor if cfg.key_grade == KeyGrade::Raw && seq >= cfg.rawkey.warmup_final_periods => {
            for (final_bits, raw) in raw_byte_plan(raw_bits) {
                let slot = match (final_bits, raw) {
                    (_, 0) => KeySlot::Whole(KeyGrade::Final, keys.allocate(KeyGrade::Final, 1, 1, strict, seq)?[0]),
                    (0, _) => KeySlot::Whole(KeyGrade::Raw, keys.allocate(KeyGrade::Raw, 1, 1, strict, seq)?[0]),
                    _ => KeySlot::Split {
                        final_id: keys.allocate(KeyGrade::Final, 1, 1, strict, seq)?[0],
                        raw_id: keys.allocate(KeyGrade::Raw, 1, 1, strict, seq)?[0],
                        raw_low: raw,
                    },
                };
                slots.push(slot);
            }
        }
        _ => {
            let n = cfg.cipher.keys_per_frame(false);
            for id in keys.allocate(KeyGrade::Final, n, 1, strict, seq)? {
                slots.push(KeySlot::Whole(KeyGrade::Final, id));
            }
        }
    }
    debug_assert_eq!(keys.assigned.len() as u64, seq);
    keys.assigned.push(slots);
    Ok(())
}

fn build_path(cfg: &LoopConfig, name: &'static str, alice_sends: bool, seed: u64) -> Channel {
    let plain = cfg.cipher.kind == CipherKind::Plain;
    let raw = cfg.key_grade == KeyGrade::Raw;
    let final_len = if cfg.cipher.kind == CipherKind::Xor { 8 } else { cfg.cipher.key_len };
    let rate = cfg.keys.source.generation_rate_bps;
    let share = if raw { cfg.rawkey.final_share } else { 1.0 };
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let final_link = (!plain).then(|| {
        let src = KeySourceConfig {
            generation_rate_bps: rate * share,
            ..cfg.keys.source.clone()
        };
        PooledLink::new(KeySource::new(src, KeyGrade::Final, seeder.random()), final_len)
    });
    let raw_link = (!plain && raw).then(|| {
        let src = KeySourceConfig {
            generation_rate_bps: rate * (1.0 - share),
            ..cfg.keys.source.clone()
        };
        PooledLink::new(KeySource::new(src, KeyGrade::Raw, seeder.random()), 8)
    });
    let mut keys = PathKeys {
        name,
        final_link,
        raw_link,
        assigned: Vec::new(),
        next_final: 0,
        next_raw: 0,
    };
    keys.refill(cfg.keys.prefill_s.max(0.0));
    Channel {
        keys,
        alice_sends,
        queue: VecDeque::new(),
        last_delivery: 0,
        history: Vec::new(),
        rx: Receiver::new(cfg.detector()),
        log: Vec::new(),
    }
}

/// Filter running on Alice's side in sample time: each measurement with
/// sequence `s` advances the estimate to sample `s` using the commands she
/// expects the plant to have applied.
struct SampleTimeFilter {
    ks: KalmanState,
    last_seq: u64,
    u_lag: u64,
}

impl SampleTimeFilter {
    fn step_to(&mut self, model: &PlantModel, seq: u64, u_history: &[f64]) {
        while self.last_seq < seq {
            let k = self.last_seq;
            let u = k
                .checked_sub(self.u_lag)
                .and_then(|i| u_history.get(i as usize))
                .copied()
                .unwrap_or(0.0);
            self.ks = kalman_predict(&self.ks, model, &DVector::from_element(1, u));
            self.last_seq += 1;
        }
    }

    /// Predicted reading for sample `seq`.
    fn predict(&mut self, model: &PlantModel, seq: u64, u_history: &[f64]) -> f64 {
        self.step_to(model, seq, u_history);
        (&model.c * &self.ks.x_hat)[0]
    }

    fn correct(&mut self, model: &PlantModel, y: f64) -> Result<f64, LoopError> {
        self.ks = kalman_update(&self.ks, model, &DVector::from_element(1, y))?;
        Ok((&model.c * &self.ks.x_hat)[0])
    }
}

fn worst(a: Verdict, b: Verdict) -> Verdict {
    a.max(b)
}

/// Runs the closed loop for `cfg.horizon_periods` periods.
pub fn run(cfg: &LoopConfig) -> Result<RunReport, LoopError> {
    cfg.validate()?;
    let model = cfg.plant_model();
    let ts = cfg.plant.ts;
    let raw = cfg.key_grade == KeyGrade::Raw;
    let check = cfg.detector().check;

    let mut master = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut y_path = build_path(cfg, "y", false, master.random());
    let mut u_path = build_path(cfg, "u", true, master.random());
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut attack_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(master.random());
    let disturbance = (cfg.plant.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.plant.noise_std).map_err(|e| LoopError::InvalidConfig(e.to_string())))
        .transpose()?;

    let model_delay = cfg.model_delay()?;
    let y_share = 0.5 * (1.0 + cfg.delay_asymmetry);
    let u_share = 1.0 - y_share;
    let nominal_tau = model_delay + cfg.delay.jitter_mean.max(0.0);
    let u_lag = apply_delay(0, nominal_tau * u_share, ts);

    let qber = cfg.keys.source.qber;
    let mut filter = cfg.kalman_enabled.then(|| {
        let mut ks = KalmanState::for_plant(
            &model,
            raw_noise_variance(qber, cfg.rawkey.u_split_h.min(cfg.rawkey.u_raw_bits)) * cfg.kalman_q_scale,
            raw_noise_variance(qber, cfg.rawkey.high_digit_split_h.min(cfg.rawkey.y_raw_bits)),
        );
        if let Some(q) = &cfg.kalman_q {
            ks.q_cov = DMatrix::from_row_slice(model.states(), model.states(), q);
        }
        if let Some(r) = cfg.kalman_r {
            ks.r_cov = DMatrix::from_element(1, 1, r);
        }
        ks.x_hat = DVector::zeros(model.states());
        SampleTimeFilter { ks, last_seq: 0, u_lag }
    });

    let mut pi = PIController::new(cfg.controller.kp, cfg.controller.ki, ts, cfg.controller.clamp);
    let mut smooth_y = Smoother::new(cfg.rawkey.threshold_delta, cfg.rawkey.high_digit_split_h, cfg.rawkey.persistence_guard);
    let mut smooth_u = Smoother::new(cfg.rawkey.u_threshold_delta, cfg.rawkey.u_split_h, cfg.rawkey.persistence_guard);

    let mut x = DVector::zeros(model.states());
    let mut y_received = 0.0;
    let mut y_used = 0.0;
    let mut u_applied = 0.0;
    let mut u_history: Vec<f64> = Vec::with_capacity(cfg.horizon_periods as usize);
    let mut trace = Vec::with_capacity(cfg.horizon_periods as usize);
    let mut tau_sum = 0.0;

    for period in 0..cfg.horizon_periods {
        if period > 0 {
            y_path.keys.refill(ts);
            u_path.keys.refill(ts);
        }
        let t = period as f64 * ts;
        let r = cfg.reference.at(t);
        let jitter = if cfg.delay.jitter_mean > 0.0 || cfg.delay.jitter_std > 0.0 {
            cfg.delay.sample_jitter(&mut jitter_rng)
        } else {
            0.0
        };
        let tau = model_delay + jitter;
        tau_sum += tau;
        let seq = period as u32;
        let wire_seq = seq & 0xFFFF;
        let mut frame_valid = true;
        let mut verdict = Verdict::Clean;

        // Bob samples and sends y.
        let y_true = (&model.c * &x)[0];
        assign_keys(&mut y_path, cfg, period, cfg.rawkey.y_raw_bits)?;
        let ct = y_path.seal(&cfg.cipher, seq, encode_frame_with(y_true, wire_seq, check)?)?;
        transmit(&mut y_path, cfg, period, seq, ct, apply_delay(period, tau * y_share, ts), true, &mut attack_rng);

        // Alice receives, filters and computes u.
        for arrival in y_path.deliver(&cfg.cipher, period) {
            let rec = arrival.record;
            frame_valid &= rec.frame_valid;
            verdict = worst(verdict, rec.verdict);
            let (Some(value), Some(s)) = (rec.value, rec.seq_observed) else { continue };
            let s = s as u64;
            let stale = filter.as_ref().is_some_and(|f| s < f.last_seq);
            if stale {
                continue;
            }
            let prediction = filter.as_mut().map(|f| f.predict(&model, s, &u_history));
            let measured = if raw && s >= cfg.rawkey.warmup_final_periods {
                match prediction {
                    Some(p) => smooth_y.apply_against(value, Some(p)),
                    None => smooth_y.apply(value),
                }
            } else {
                smooth_y.accept(value);
                value
            };
            y_received = value;
            y_used = match filter.as_mut() {
                Some(f) => f.correct(&model, measured)?,
                None => measured,
            };
        }
        if let Some(rec) = y_path.rx.tick(period) {
            verdict = worst(verdict, rec.verdict);
            y_path.log.push(rec);
        }
        let u_sent = pi.control(r, y_used);
        let u_frame = from_fixed(to_fixed(u_sent)?);
        u_history.push(u_frame);

        // Alice sends u; Bob applies what arrives.
        assign_keys(&mut u_path, cfg, period, cfg.rawkey.u_raw_bits)?;
        let ct = u_path.seal(&cfg.cipher, seq, encode_frame_with(u_sent, wire_seq, check)?)?;
        transmit(&mut u_path, cfg, period, seq, ct, apply_delay(period, tau * u_share, ts), false, &mut attack_rng);
        for arrival in u_path.deliver(&cfg.cipher, period) {
            let rec = arrival.record;
            frame_valid &= rec.frame_valid;
            verdict = worst(verdict, rec.verdict);
            let (Some(value), Some(s)) = (rec.value, rec.seq_observed) else { continue };
            u_applied = if raw && s as u64 >= cfg.rawkey.warmup_final_periods {
                smooth_u.apply(value)
            } else {
                smooth_u.accept(value);
                value
            };
        }
        if let Some(rec) = u_path.rx.tick(period) {
            verdict = worst(verdict, rec.verdict);
            u_path.log.push(rec);
        }

        let w = disturbance.map_or(0.0, |d| d.sample(&mut noise_rng));
        let (next, _) = model.step(&x, &DVector::from_element(1, u_applied), &DVector::from_element(1, w))?;
        x = next;
        trace.push(TraceRow {
            period,
            t,
            r,
            y_true,
            y_received,
            y_used,
            u_sent,
            u_applied,
            frame_valid,
            verdict,
            tau_roundtrip: tau,
        });
    }

    let p_score = if trace.is_empty() { 0.0 } else { performance_score(&trace, ts)? };
    let key_stats_y = y_path.keys.stats();
    let key_stats_u = u_path.keys.stats();
    let keys_consumed = key_stats_y.keys_used + key_stats_u.keys_used;
    let uses = key_stats_y.key_uses + key_stats_u.key_uses;
    let keys_reused_r = if keys_consumed == 0 { 1.0 } else { uses as f64 / keys_consumed as f64 };
    let s_score = if cfg.cipher.kind == CipherKind::Plain {
        0.0
    } else {
        security_overall(&SecurityParams::for_cipher(&cfg.cipher, cfg.epsilon, keys_reused_r))?
    };
    let unresolved = |ch: &Channel| ch.rx.in_silence() || ch.log.last().is_some_and(|r| r.verdict != Verdict::Clean);
    let unrecovered_attack = unresolved(&y_path) || unresolved(&u_path);
    let mut pool_rows = Vec::new();
    for ch in [&y_path, &u_path] {
        for link in [&ch.keys.final_link, &ch.keys.raw_link].into_iter().flatten() {
            pool_rows.extend(link.dump_rows().into_iter().map(|(id, g, n, gap)| (ch.keys.name, id, g, n, gap)));
        }
    }
    let mean_tau = if trace.is_empty() { model_delay } else { tau_sum / trace.len() as f64 };
    Ok(RunReport {
        trace,
        p_score,
        s_score,
        keys_consumed,
        keys_reused_r,
        detection_u: u_path.log,
        detection_y: y_path.log,
        model_delay,
        mean_tau,
        key_stats_u,
        key_stats_y,
        unrecovered_attack,
        pool_rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn transmit(
    ch: &mut Channel,
    cfg: &LoopConfig,
    period: u64,
    seq: u32,
    ciphertext: Vec<u8>,
    deliver_at: u64,
    measurement_path: bool,
    rng: &mut ChaCha8Rng,
) {
    let msg = WireMessage { seq, ciphertext };
    let attacked = cfg.attack.kind != AttackKind::None && cfg.attack.targets(!measurement_path);
    let outcome = if attacked {
        apply_attack(&cfg.attack, period, msg.clone(), &ch.history, rng).message
    } else {
        Some(msg.clone())
    };
    ch.history.push(msg);
    if let Some(m) = outcome {
        ch.send(m, deliver_at);
    }
}
