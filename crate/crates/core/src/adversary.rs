//! Attacks on the ciphertext channel and their detection.
//!
//! The receiver decrypts each message with the key it expects next. Under
//! one-time-pad keying any replayed, injected or mis-sequenced ciphertext
//! decrypts to a word outside the admissible frame set. A replay is told
//! apart from a deception by an exact match against earlier ciphertexts.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::Bits;
use crate::cipherset::{decode_frame_with, encode_frame_with, CipherSpec, FrameCheck, KeyedTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackKind {
    #[default]
    None,
    Dos,
    Replay,
    Deception,
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" => Ok(Self::None),
            "dos" => Ok(Self::Dos),
            "replay" => Ok(Self::Replay),
            "deception" => Ok(Self::Deception),
            other => Err(format!("unknown attack kind `{other}`")),
        }
    }
}

/// Which direction of the loop the attacker sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackPath {
    /// Controller to plant (commands).
    #[default]
    Command,
    /// Plant to controller (measurements).
    Measurement,
    Both,
}

impl FromStr for AttackPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "u" => Ok(Self::Command),
            "y" => Ok(Self::Measurement),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown attack path `{other}` (expected u|y|both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackScenario {
    pub kind: AttackKind,
    /// First and last attacked period, inclusive.
    pub start: u64,
    pub end: u64,
    pub drop_p: f64,
    /// Replay the message sent this many periods earlier.
    pub replay_offset: u64,
    /// Ciphertext bits flipped by a deception; 0 flips a uniformly random nonzero mask.
    pub flip_bits: usize,
    pub path: AttackPath,
    /// Attack only every `every`-th period of the window, counted from `start`.
    pub every: u64,
}

impl Default for AttackScenario {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            start: 0,
            end: u64::MAX,
            drop_p: 1.0,
            replay_offset: 1,
            flip_bits: 1,
            path: AttackPath::Command,
            every: 1,
        }
    }
}

impl AttackScenario {
    pub fn active(&self, period: u64) -> bool {
        self.kind != AttackKind::None
            && (self.start..=self.end).contains(&period)
            && (period - self.start).is_multiple_of(self.every.max(1))
    }

    pub fn targets(&self, command_path: bool) -> bool {
        match self.path {
            AttackPath::Both => true,
            AttackPath::Command => command_path,
            AttackPath::Measurement => !command_path,
        }
    }

    pub fn validate(&self, horizon: u64) -> Result<(), String> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        if self.start > self.end {
            return Err(format!("attack window {}..{} is empty", self.start, self.end));
        }
        if horizon > 0 && self.start >= horizon {
            return Err(format!("attack starts at {} beyond horizon {horizon}", self.start));
        }
        if self.every == 0 {
            return Err("attack stride must be at least 1".into());
        }
        if self.replay_offset == 0 {
            return Err("replay offset must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.drop_p) {
            return Err(format!("drop probability {} outside [0, 1]", self.drop_p));
        }
        Ok(())
    }
}

/// A ciphertext on the wire with its cleartext transport sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WireMessage {
    pub seq: u32,
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    /// `None` when the message was dropped.
    pub message: Option<WireMessage>,
    pub note: Option<&'static str>,
}

/// Applies `scenario` to the message sent in `period`. `history[k]` is the
/// message sent in period `k` on this path.
pub fn apply_attack<R: Rng + ?Sized>(
    scenario: &AttackScenario,
    period: u64,
    message: WireMessage,
    history: &[WireMessage],
    rng: &mut R,
) -> AttackOutcome {
    let pass = |message, note| AttackOutcome {
        message: Some(message),
        note,
    };
    if !scenario.active(period) {
        return pass(message, None);
    }
    match scenario.kind {
        AttackKind::None => pass(message, None),
        AttackKind::Dos => {
            if rng.random::<f64>() < scenario.drop_p {
                AttackOutcome {
                    message: None,
                    note: Some("dropped"),
                }
            } else {
                pass(message, None)
            }
        }
        AttackKind::Replay => {
            let idx = period.checked_sub(scenario.replay_offset);
            match idx.and_then(|i| history.get(i as usize)) {
                Some(old) => pass(old.clone(), Some("replayed")),
                None => pass(message, Some("replay skipped: no history")),
            }
        }
        AttackKind::Deception => {
            let mut bits = Bits::from_bytes(&message.ciphertext);
            flip_mask(&mut bits, scenario.flip_bits, rng);
            pass(
                WireMessage {
                    seq: message.seq,
                    ciphertext: bits.to_bytes(),
                },
                Some("modified"),
            )
        }
    }
}

fn flip_mask<R: Rng + ?Sized>(bits: &mut Bits, flips: usize, rng: &mut R) {
    let n = bits.len();
    if flips == 0 {
        loop {
            let mask = Bits::random(n, rng);
            if mask.count_ones() > 0 {
                *bits = bits.xor(&mask);
                return;
            }
        }
    }
    for i in index::sample(rng, n, flips.min(n)) {
        bits.flip(i);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Verdict {
    #[default]
    Clean,
    DosSuspected,
    ReplaySuspected,
    DeceptionSuspected,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "clean",
            Self::DosSuspected => "dos_suspected",
            Self::ReplaySuspected => "replay_suspected",
            Self::DeceptionSuspected => "deception_suspected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub period: u64,
    pub frame_valid: bool,
    pub seq_observed: Option<u32>,
    pub ciphertext_digest: u64,
    pub verdict: Verdict,
    /// Decoded payload when the frame was valid.
    pub value: Option<f64>,
    /// Set when the frame decrypted under the stale key fell outside the admissible set.
    pub stale_key_invalid: bool,
}

/// 64-bit FNV-1a.
pub fn digest(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Consecutive invalid frames required before raising a verdict.
    pub window: usize,
    pub history_depth: usize,
    /// Periods without any arrival before a missing-message verdict; 0 disables.
    pub silence_limit: u64,
    pub check: FrameCheck,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: 1,
            history_depth: 1024,
            silence_limit: 0,
            check: FrameCheck::Full,
        }
    }
}

/// Receiving end of one channel direction.
#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: DetectorConfig,
    next_seq: u32,
    /// Invalid frames since the last valid one; each may have consumed a key slot.
    pending_invalid: u32,
    invalid_run: usize,
    ring: VecDeque<u64>,
    seen: HashSet<u64>,
    last_arrival: Option<u64>,
    silence_flagged: bool,
}

impl Receiver {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            next_seq: 0,
            pending_invalid: 0,
            invalid_run: 0,
            ring: VecDeque::new(),
            seen: HashSet::new(),
            last_arrival: None,
            silence_flagged: false,
        }
    }

    pub fn expected_seq(&self) -> u32 {
        self.next_seq
    }

    fn remember(&mut self, d: u64) {
        if self.cfg.history_depth == 0 {
            return;
        }
        if self.ring.len() == self.cfg.history_depth {
            if let Some(old) = self.ring.pop_front() {
                if !self.ring.contains(&old) {
                    self.seen.remove(&old);
                }
            }
        }
        self.ring.push_back(d);
        self.seen.insert(d);
    }

    fn try_key(&self, key_seq: u32, ct: &[u8], decrypt: &mut impl FnMut(u32, &[u8]) -> Option<u64>) -> Option<f64> {
        let word = decrypt(key_seq, ct)?;
        let frame = decode_frame_with(word, self.cfg.check);
        (frame.in_admissible_set && frame.seq == key_seq as u16).then_some(frame.value)
    }

    /// Classifies one delivered message. `decrypt(k, ct)` decrypts with the
    /// key reserved for sequence number `k`.
    pub fn receive(
        &mut self,
        period: u64,
        msg: &WireMessage,
        mut decrypt: impl FnMut(u32, &[u8]) -> Option<u64>,
    ) -> DetectionRecord {
        self.last_arrival = Some(period);
        self.silence_flagged = false;
        let d = digest(&msg.ciphertext);
        let expected = self.next_seq;
        let mut record = DetectionRecord {
            period,
            frame_valid: false,
            seq_observed: None,
            ciphertext_digest: d,
            verdict: Verdict::Clean,
            value: None,
            stale_key_invalid: false,
        };

        if let Some(v) = self.try_key(expected, &msg.ciphertext, &mut decrypt) {
            record.frame_valid = true;
            record.seq_observed = Some(expected);
            record.value = Some(v);
            self.next_seq = expected.wrapping_add(1);
            self.pending_invalid = 0;
            self.invalid_run = 0;
        } else if msg.seq > expected {
            record.stale_key_invalid = true;
            if let Some(v) = self.try_key(msg.seq, &msg.ciphertext, &mut decrypt) {
                let gap = msg.seq - expected;
                record.frame_valid = true;
                record.seq_observed = Some(msg.seq);
                record.value = Some(v);
                if gap > self.pending_invalid {
                    record.verdict = Verdict::DosSuspected;
                }
                self.next_seq = msg.seq.wrapping_add(1);
                self.pending_invalid = 0;
                self.invalid_run = 0;
            }
        }

        if !record.frame_valid {
            self.pending_invalid += 1;
            self.invalid_run += 1;
            if self.invalid_run >= self.cfg.window.max(1) {
                record.verdict = if self.seen.contains(&d) {
                    Verdict::ReplaySuspected
                } else {
                    Verdict::DeceptionSuspected
                };
            }
        }
        self.remember(d);
        record
    }

    /// Raises a missing-message verdict once per silent stretch longer than the limit.
    pub fn tick(&mut self, period: u64) -> Option<DetectionRecord> {
        let last = self.last_arrival?;
        if self.cfg.silence_limit == 0 || self.silence_flagged || period - last <= self.cfg.silence_limit {
            return None;
        }
        self.silence_flagged = true;
        Some(DetectionRecord {
            period,
            frame_valid: false,
            seq_observed: None,
            ciphertext_digest: 0,
            verdict: Verdict::DosSuspected,
            value: None,
            stale_key_invalid: false,
        })
    }

    pub fn in_silence(&self) -> bool {
        self.silence_flagged
    }
}

/// Deterministic one-time key for sequence number `seq`.
pub fn otp_key(seed: u64, seq: u32, key_bits: usize) -> Bits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (seq as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Bits::random(key_bits, &mut rng)
}

/// Frame-level key material for one message under `spec` (XOR takes one
/// fresh key per frame byte, concatenated).
pub fn frame_key(spec: &CipherSpec, seed: u64, seq: u32) -> Bits {
    match spec.kind {
        crate::cipherset::CipherKind::Xor => otp_key(seed, seq, 64),
        _ => otp_key(seed, seq, spec.key_len),
    }
}

/// Summary of a standalone channel run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelReport {
    pub records: Vec<DetectionRecord>,
    pub attacked_periods: Vec<u64>,
    pub dropped_periods: Vec<u64>,
}

/// Sender, attacker and receiver on one channel with synchronized one-time
/// keys and in-order delivery, without the control loop.
pub fn simulate_channel(
    spec: &CipherSpec,
    periods: u64,
    scenario: &AttackScenario,
    detector: DetectorConfig,
    seed: u64,
) -> ChannelReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key_seed = rng.random::<u64>();
    let mut receiver = Receiver::new(detector);
    let mut history: Vec<WireMessage> = Vec::with_capacity(periods as usize);
    let mut report = ChannelReport::default();
    for period in 0..periods {
        let seq = period as u32;
        let value = rng.random_range(-100.0..100.0);
        let frame = encode_frame_with(value, seq & 0xFFFF, detector.check).expect("value in range");
        let key = frame_key(spec, key_seed, seq);
        let ct = KeyedTransform::new(spec, key).expect("key sized for cipher").encrypt_frame(frame);
        let sent = WireMessage { seq, ciphertext: ct };
        let outcome = apply_attack(scenario, period, sent.clone(), &history, &mut rng);
        history.push(sent);
        if scenario.active(period) && outcome.note.is_some_and(|n| !n.starts_with("replay skipped")) {
            report.attacked_periods.push(period);
        }
        match outcome.message {
            Some(msg) => {
                let record = receiver.receive(period, &msg, |k, ct| {
                    KeyedTransform::new(spec, frame_key(spec, key_seed, k))
                        .ok()?
                        .decrypt_frame(ct)
                });
                report.records.push(record);
            }
            None => report.dropped_periods.push(period),
        }
    }
    report
}
