//! Flat `dotted.key = value` scenario files.
//!
//! Blank lines and `#` comments are ignored. Keys under `sweep.<name>.` are
//! per-scenario overrides applied on top of the shared keys.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::adversary::{AttackKind, AttackPath};
use crate::cipherset::CipherSpec;
use crate::controlplant::PlantModel;
use crate::keysource::KeyGrade;
use crate::loopsim::LoopConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}, column {column}: unknown key `{key}`")]
    UnknownKey { line: usize, column: usize, key: String },
    #[error("line {line}, column {column}: bad value for `{key}`: {message}")]
    BadValue {
        line: usize,
        column: usize,
        key: String,
        message: String,
    },
    #[error("line {line}, column {column}: duplicate key `{key}`")]
    Duplicate { line: usize, column: usize, key: String },
}

impl ConfigError {
    /// 1-based position of the offending text.
    pub fn position(&self) -> (usize, usize) {
        match self {
            Self::Syntax { line, column, .. }
            | Self::UnknownKey { line, column, .. }
            | Self::BadValue { line, column, .. }
            | Self::Duplicate { line, column, .. } => (*line, *column),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
    /// Columns of the key and the value.
    pub key_column: usize,
    pub value_column: usize,
}

impl Entry {
    fn bad(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            column: self.value_column,
            key: self.key.clone(),
            message: message.into(),
        }
    }
}

/// Splits `text` into entries, checking syntax and duplicate keys only.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw_line);
        if body.trim().is_empty() {
            continue;
        }
        let Some(eq) = body.find('=') else {
            let column = first_non_space(body);
            return Err(ConfigError::Syntax {
                line,
                column,
                message: "expected `key = value`".into(),
            });
        };
        let key_part = &body[..eq];
        let key = key_part.trim();
        let key_column = first_non_space(key_part);
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                column: eq + 1,
                message: "missing key before `=`".into(),
            });
        }
        if let Some(off) = key.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')) {
            return Err(ConfigError::Syntax {
                line,
                column: key_column + key[..off].chars().count(),
                message: format!("invalid character in key `{key}`"),
            });
        }
        if key.starts_with('.') || key.ends_with('.') || key.contains("..") {
            return Err(ConfigError::Syntax {
                line,
                column: key_column,
                message: format!("empty segment in key `{key}`"),
            });
        }
        let value_part = &body[eq + 1..];
        let value = unquote(value_part.trim());
        let value_column = eq + 1 + first_non_space(value_part);
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                column: eq + 2,
                message: format!("missing value for `{key}`"),
            });
        }
        if seen.insert(key.to_string(), ()).is_some() {
            return Err(ConfigError::Duplicate {
                line,
                column: key_column,
                key: key.to_string(),
            });
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
            key_column,
            value_column,
        });
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

/// 1-based column of the first non-blank character, or one past the end.
fn first_non_space(s: &str) -> usize {
    s.chars().take_while(|c| c.is_whitespace()).count() + 1
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn parse_f64(e: &Entry) -> Result<f64, ConfigError> {
    let v = e.value.to_ascii_lowercase();
    match v.as_str() {
        "inf" | "+inf" | "infinity" => return Ok(f64::INFINITY),
        "-inf" | "-infinity" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let x: f64 = v.parse().map_err(|_| e.bad(format!("`{}` is not a number", e.value)))?;
    if x.is_nan() {
        return Err(e.bad("NaN is not allowed"));
    }
    Ok(x)
}

fn parse_u64(e: &Entry) -> Result<u64, ConfigError> {
    e.value
        .parse()
        .map_err(|_| e.bad(format!("`{}` is not a nonnegative integer", e.value)))
}

fn parse_usize(e: &Entry) -> Result<usize, ConfigError> {
    parse_u64(e).and_then(|v| usize::try_from(v).map_err(|_| e.bad("too large")))
}

fn parse_u32(e: &Entry) -> Result<u32, ConfigError> {
    parse_u64(e).and_then(|v| u32::try_from(v).map_err(|_| e.bad("too large")))
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(e.bad(format!("`{}` is not a boolean", e.value))),
    }
}

/// Number list separated by commas, semicolons or blanks; brackets ignored.
fn parse_list(e: &Entry) -> Result<Vec<f64>, ConfigError> {
    let cleaned: String = e
        .value
        .chars()
        .map(|c| if matches!(c, '[' | ']' | ',' | ';') { ' ' } else { c })
        .collect();
    let items: Result<Vec<f64>, _> = cleaned
        .split_whitespace()
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(e.bad(format!("`{t}` is not a finite number"))),
        })
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(e.bad("empty list"));
    }
    Ok(items)
}

fn parse_with<T, E: std::fmt::Display>(e: &Entry, f: impl FnOnce(&str) -> Result<T, E>) -> Result<T, ConfigError> {
    f(&e.value).map_err(|err| e.bad(err.to_string()))
}

/// Explicit plant matrices waiting for all three keys.
#[derive(Default)]
struct PendingPlant<'a> {
    a: Option<(&'a Entry, Vec<f64>)>,
    b: Option<(&'a Entry, Vec<f64>)>,
    c: Option<(&'a Entry, Vec<f64>)>,
}

/// Applies one entry to `cfg`. Plant matrices are collected in `plant` and
/// resolved by [`finish_plant`].
fn apply<'a>(cfg: &mut LoopConfig, e: &'a Entry, key: &str, plant: &mut PendingPlant<'a>) -> Result<(), ConfigError> {
    match key {
        "cipher" => cfg.cipher = parse_with(e, str::parse::<CipherSpec>)?,
        "key_grade" => cfg.key_grade = parse_with(e, str::parse::<KeyGrade>)?,
        "horizon_periods" => cfg.horizon_periods = parse_u64(e)?,
        "rng_seed" => cfg.rng_seed = parse_u64(e)?,
        "epsilon" => cfg.epsilon = parse_f64(e)?,
        "qber" => {
            let q = parse_f64(e)?;
            cfg.keys.source.qber = q;
            cfg.delay.qber = q;
        }
        "m_over_n" => {
            let m = parse_f64(e)?;
            cfg.keys.source.m_over_n = m;
            cfg.delay.m_over_n = m;
        }
        "generation_rate_bps" => cfg.keys.source.generation_rate_bps = parse_f64(e)?,
        "check_fraction" => cfg.keys.source.check_fraction = parse_f64(e)?,
        "pa_security_s" => cfg.keys.source.pa_security_s = parse_usize(e)?,
        "min_chunk" => cfg.keys.source.min_chunk = parse_usize(e)?,
        "max_chunk" => cfg.keys.source.max_chunk = parse_usize(e)?,
        "cascade.passes" => cfg.keys.source.cascade.passes = parse_usize(e)?,
        "cascade.growth" => cfg.keys.source.cascade.growth = parse_usize(e)?,
        "keys.prefill_s" => cfg.keys.prefill_s = parse_f64(e)?,
        "keys.strict_otp" => cfg.keys.strict_otp = parse_bool(e)?,
        "keys.xor_tiling" => cfg.keys.xor_tiling = parse_bool(e)?,
        "reference.amplitude" => cfg.reference.amplitude = parse_f64(e)?,
        "reference.time" => cfg.reference.time = parse_f64(e)?,
        "plant.damping" => cfg.plant.damping = parse_f64(e)?,
        "plant.gain" => cfg.plant.gain = parse_f64(e)?,
        "plant.Ts" | "plant.ts" => cfg.plant.ts = parse_f64(e)?,
        "plant.noise_std" => cfg.plant.noise_std = parse_f64(e)?,
        "plant.A" => plant.a = Some((e, parse_list(e)?)),
        "plant.B" => plant.b = Some((e, parse_list(e)?)),
        "plant.C" => plant.c = Some((e, parse_list(e)?)),
        "controller.kp" => cfg.controller.kp = parse_f64(e)?,
        "controller.ki" => cfg.controller.ki = parse_f64(e)?,
        "controller.clamp" => cfg.controller.clamp = parse_f64(e)?,
        "delay.t0" => cfg.delay.t0 = parse_f64(e)?,
        "delay.bandwidth" => cfg.delay.bandwidth = parse_f64(e)?,
        "delay.jitter_mean" => cfg.delay.jitter_mean = parse_f64(e)?,
        "delay.jitter_std" => cfg.delay.jitter_std = parse_f64(e)?,
        "delay.asymmetry" => cfg.delay_asymmetry = parse_f64(e)?,
        "attack.kind" => cfg.attack.kind = parse_with(e, str::parse::<AttackKind>)?,
        "attack.path" => cfg.attack.path = parse_with(e, str::parse::<AttackPath>)?,
        "attack.start" => cfg.attack.start = parse_u64(e)?,
        "attack.end" => {
            cfg.attack.end = match e.value.to_ascii_lowercase().as_str() {
                "inf" | "end" => u64::MAX,
                _ => parse_u64(e)?,
            }
        }
        "attack.drop_p" => cfg.attack.drop_p = parse_f64(e)?,
        "attack.replay_offset" => cfg.attack.replay_offset = parse_u64(e)?,
        "attack.flip_bits" => cfg.attack.flip_bits = parse_usize(e)?,
        "attack.every" => cfg.attack.every = parse_u64(e)?,
        "detection.window" => {
            cfg.detection.window = match e.value.to_ascii_lowercase().as_str() {
                "auto" => None,
                _ => Some(parse_usize(e)?),
            }
        }
        "detection.history_depth" => cfg.detection.history_depth = parse_usize(e)?,
        "detection.silence_limit" => cfg.detection.silence_limit = parse_u64(e)?,
        "rawkey.threshold_delta" => cfg.rawkey.threshold_delta = parse_f64(e)?,
        "rawkey.high_digit_split_h" => cfg.rawkey.high_digit_split_h = parse_u32(e)?,
        "rawkey.u_threshold_delta" => cfg.rawkey.u_threshold_delta = parse_f64(e)?,
        "rawkey.u_split_h" => cfg.rawkey.u_split_h = parse_u32(e)?,
        "rawkey.y_raw_bits" => cfg.rawkey.y_raw_bits = parse_u32(e)?,
        "rawkey.u_raw_bits" => cfg.rawkey.u_raw_bits = parse_u32(e)?,
        "rawkey.warmup_final_periods" => cfg.rawkey.warmup_final_periods = parse_u64(e)?,
        "rawkey.final_share" => cfg.rawkey.final_share = parse_f64(e)?,
        "rawkey.persistence_guard" => cfg.rawkey.persistence_guard = parse_bool(e)?,
        "kalman.enabled" => cfg.kalman_enabled = parse_bool(e)?,
        "kalman.q_scale" => cfg.kalman_q_scale = parse_f64(e)?,
        "kalman.Q" => cfg.kalman_q = Some(parse_list(e)?),
        "kalman.R" => {
            let r = parse_list(e)?;
            if r.len() != 1 {
                return Err(e.bad("the loop has one measurement; kalman.R takes one entry"));
            }
            cfg.kalman_r = Some(r[0]);
        }
        _ => {
            return Err(ConfigError::UnknownKey {
                line: e.line,
                column: e.key_column,
                key: e.key.clone(),
            })
        }
    }
    Ok(())
}

fn finish_plant(cfg: &mut LoopConfig, plant: PendingPlant<'_>) -> Result<(), ConfigError> {
    let (a, b, c) = match (plant.a, plant.b, plant.c) {
        (None, None, None) => return Ok(()),
        (Some(a), Some(b), Some(c)) => (a, b, c),
        (a, b, c) => {
            let e = a.or(b).or(c).unwrap().0;
            return Err(e.bad("plant.A, plant.B and plant.C must be given together"));
        }
    };
    let n = (a.1.len() as f64).sqrt().round() as usize;
    if n * n != a.1.len() {
        return Err(a.0.bad(format!("{} entries do not form a square matrix", a.1.len())));
    }
    if b.1.len() != n {
        return Err(b.0.bad(format!("expected {n} entries for one input")));
    }
    if c.1.len() != n {
        return Err(c.0.bad(format!("expected {n} entries for one output")));
    }
    let model = PlantModel::new(
        DMatrix::from_row_slice(n, n, &a.1),
        DMatrix::from_row_slice(n, 1, &b.1),
        DMatrix::from_row_slice(1, n, &c.1),
        cfg.plant.ts,
    )
    .map_err(|err| a.0.bad(err.to_string()))?;
    cfg.plant.matrices = Some(model);
    Ok(())
}

fn build(base: &LoopConfig, entries: &[&Entry], strip: usize) -> Result<LoopConfig, ConfigError> {
    let mut cfg = base.clone();
    let mut plant = PendingPlant::default();
    for e in entries {
        apply(&mut cfg, e, &e.key[strip..], &mut plant)?;
    }
    finish_plant(&mut cfg, plant)?;
    Ok(cfg)
}

/// Parses a single-scenario file on top of the defaults.
pub fn parse_loop_config(text: &str) -> Result<LoopConfig, ConfigError> {
    let entries = parse_entries(text)?;
    if let Some(e) = entries.iter().find(|e| e.key.starts_with("sweep.")) {
        return Err(ConfigError::UnknownKey {
            line: e.line,
            column: e.key_column,
            key: e.key.clone(),
        });
    }
    build(&LoopConfig::default(), &entries.iter().collect::<Vec<_>>(), 0)
}

/// Parses a sweep file into named scenarios in order of first appearance.
/// A file without `sweep.` keys yields one scenario named `base`.
pub fn parse_sweep(text: &str) -> Result<Vec<(String, LoopConfig)>, ConfigError> {
    let entries = parse_entries(text)?;
    let shared: Vec<&Entry> = entries.iter().filter(|e| !e.key.starts_with("sweep.")).collect();
    let mut names: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&Entry>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.key.starts_with("sweep.")) {
        let rest = &e.key["sweep.".len()..];
        let Some(dot) = rest.find('.') else {
            return Err(ConfigError::Syntax {
                line: e.line,
                column: e.key_column,
                message: format!("sweep key `{}` needs the form sweep.<name>.<key>", e.key),
            });
        };
        let name = &rest[..dot];
        if !groups.contains_key(name) {
            names.push(name.to_string());
        }
        groups.entry(name.to_string()).or_default().push(e);
    }
    // Shared plant matrices and per-scenario overrides resolve together.
    if names.is_empty() {
        return Ok(vec![("base".into(), build(&LoopConfig::default(), &shared, 0)?)]);
    }
    names
        .into_iter()
        .map(|name| {
            let prefix = "sweep.".len() + name.len() + 1;
            let mut cfg = LoopConfig::default();
            let mut plant = PendingPlant::default();
            for e in &shared {
                apply(&mut cfg, e, &e.key, &mut plant)?;
            }
            for e in &groups[&name] {
                apply(&mut cfg, e, &e.key[prefix..], &mut plant)?;
            }
            finish_plant(&mut cfg, plant)?;
            Ok((name, cfg))
        })
        .collect()
}
