//! Browser bindings: a closed-loop run, the security tradeoff table and a
//! single Cascade reconciliation, each returned as JSON.

use qkdncs::bits::Bits;
use qkdncs::cipherset::CipherSpec;
use qkdncs::keysource::{reconcile, KeyGrade, SiftedKeyPair};
use qkdncs::loopsim::{run, LoopConfig};
use qkdncs::metrics::{tradeoff_table, DelayParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct StepResponse {
    pub cipher: String,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub y_true: Vec<f64>,
    pub y_used: Vec<f64>,
    pub p_score: f64,
    pub s_score: f64,
    pub mean_tau: f64,
    pub alarms: usize,
}

#[derive(Debug, Serialize)]
pub struct SecurityRow {
    pub cipher: String,
    pub s_a: f64,
    pub s: f64,
    pub delay: f64,
}

#[derive(Debug, Serialize)]
pub struct CascadeOutcome {
    pub key_bits: usize,
    pub errors_before: usize,
    pub block_length: usize,
    pub passes: usize,
    pub corrections: usize,
    pub leaked_bits: usize,
    pub modelled_leak: f64,
    pub exact: bool,
    /// Positions Bob's key differed at, capped for display.
    pub error_positions: Vec<usize>,
}

pub fn step_response_native(cipher: &str, raw_keys: bool, kalman: bool, seed: u64, horizon: u64) -> Result<StepResponse, String> {
    let spec: CipherSpec = cipher.parse().map_err(|e| format!("{e}"))?;
    let cfg = LoopConfig {
        cipher: spec,
        key_grade: if raw_keys { KeyGrade::Raw } else { KeyGrade::Final },
        kalman_enabled: kalman,
        rng_seed: seed,
        horizon_periods: horizon,
        ..LoopConfig::default()
    };
    let rep = run(&cfg).map_err(|e| e.to_string())?;
    let alarms = rep
        .detection_u
        .iter()
        .chain(&rep.detection_y)
        .filter(|d| d.verdict != Default::default())
        .count();
    Ok(StepResponse {
        cipher: cfg.cipher.to_string(),
        t: rep.trace.iter().map(|x| x.t).collect(),
        r: rep.trace.iter().map(|x| x.r).collect(),
        y_true: rep.trace.iter().map(|x| x.y_true).collect(),
        y_used: rep.trace.iter().map(|x| x.y_used).collect(),
        p_score: rep.p_score,
        s_score: rep.s_score,
        mean_tau: rep.mean_tau,
        alarms,
    })
}

pub fn security_table_native(epsilon: f64, reuse_r: f64) -> Result<Vec<SecurityRow>, String> {
    let rows = tradeoff_table(epsilon, reuse_r, &DelayParams::default()).map_err(|e| e.to_string())?;
    Ok(rows
        .into_iter()
        .map(|r| SecurityRow {
            cipher: r.cipher.to_string(),
            s_a: r.s_a,
            s: r.s,
            delay: r.model_delay,
        })
        .collect())
}

pub fn cascade_native(qber: f64, key_bits: usize, seed: u64) -> Result<CascadeOutcome, String> {
    if !(qber > 0.0 && qber < 0.5) {
        return Err(format!("QBER {qber} outside (0, 0.5)"));
    }
    if !(16..=1 << 16).contains(&key_bits) {
        return Err(format!("key length {key_bits} outside [16, 65536]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alice = Bits::random(key_bits, &mut rng);
    let bob = alice.xor(&Bits::bernoulli(key_bits, qber, &mut rng));
    let error_positions: Vec<usize> = (0..key_bits).filter(|&i| alice.get(i) != bob.get(i)).take(256).collect();
    let errors_before = alice.hamming(&bob);
    let pair = SiftedKeyPair::with_known_qber(alice.clone(), bob, qber);
    let r = reconcile(&pair, key_bits / 5, 0.2, &mut rng).map_err(|e| e.to_string())?;
    Ok(CascadeOutcome {
        key_bits,
        errors_before,
        block_length: r.block_length_l0,
        passes: r.passes_run,
        corrections: r.corrections,
        leaked_bits: r.leaked_bits,
        modelled_leak: r.leaked_model,
        exact: r.corrected_bob == alice,
        error_positions,
    })
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// Closed-loop step response under `cipher` (xor, feistel:N, des, aes128, aes192, aes256).
#[wasm_bindgen]
pub fn step_response(cipher: &str, raw_keys: bool, kalman: bool, seed: u32, horizon: u32) -> Result<String, JsValue> {
    to_json(step_response_native(cipher, raw_keys, kalman, seed as u64, horizon as u64))
}

/// Algorithm strength, overall security and modelled delay per cipher.
#[wasm_bindgen]
pub fn security_table(epsilon: f64, reuse_r: f64) -> Result<String, JsValue> {
    to_json(security_table_native(epsilon, reuse_r))
}

/// One Cascade reconciliation of a random key pair at the given QBER.
#[wasm_bindgen]
pub fn cascade_demo(qber: f64, key_bits: u32, seed: u32) -> Result<String, JsValue> {
    to_json(cascade_native(qber, key_bits as usize, seed as u64))
}
