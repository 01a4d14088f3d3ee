//! The 64-bit wire frame whose decodable instances form the admissible
//! plaintext set.
//!
//! Layout, most significant bits first:
//!
//! | bits  | field   |
//! |-------|---------|
//! | 63-56 | magic `0xA5` |
//! | 55-40 | sequence number |
//! | 39-8  | payload, signed fixed point, 16 fractional bits |
//! | 7-0   | CRC-8 (poly `0x07`, init 0) |
//!
//! A uniformly random 64-bit word passes both the magic and the CRC check
//! with probability 2^-16.

use super::CipherError;

pub const FRAME_MAGIC: u8 = 0xA5;
pub const FRAME_BITS: usize = 64;
/// Fractional bits of the payload.
pub const PAYLOAD_FRAC_BITS: u32 = 16;
pub const PAYLOAD_SCALE: f64 = (1u64 << PAYLOAD_FRAC_BITS) as f64;
/// Exclusive bound on payload magnitude.
pub const PAYLOAD_LIMIT: f64 = 32768.0;
/// Bit offset of the payload's least significant bit inside the frame.
pub const PAYLOAD_SHIFT: u32 = 8;
pub const HEADER_MASK: u64 = 0xFFFF_FF00_0000_00FF;
pub const PAYLOAD_MASK: u64 = !HEADER_MASK;

/// Which fields the checksum covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameCheck {
    /// Magic, sequence and payload.
    #[default]
    Full,
    /// Magic and sequence only; used when the payload is keyed with raw,
    /// uncorrected key bits and is expected to carry bit errors.
    Header,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedFrame {
    pub value: f64,
    pub seq: u16,
    pub in_admissible_set: bool,
}

pub fn crc8(bytes: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &byte in bytes {
        crc ^= byte;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 {
                (crc << 1) ^ 0x07
            } else {
                crc << 1
            };
        }
    }
    crc
}

pub fn to_fixed(value: f64) -> Result<i32, CipherError> {
    if !value.is_finite() || value.abs() >= PAYLOAD_LIMIT {
        return Err(CipherError::ValueOutOfRange(value));
    }
    Ok((value * PAYLOAD_SCALE).round() as i32)
}

pub fn from_fixed(raw: i32) -> f64 {
    raw as f64 / PAYLOAD_SCALE
}

fn checksum(word_without_crc: u64, check: FrameCheck) -> u8 {
    let bytes = word_without_crc.to_be_bytes();
    match check {
        FrameCheck::Full => crc8(&bytes[..7]),
        FrameCheck::Header => crc8(&bytes[..3]),
    }
}

pub fn encode_frame(value: f64, seq: u32) -> Result<u64, CipherError> {
    encode_frame_with(value, seq, FrameCheck::Full)
}

pub fn encode_frame_with(value: f64, seq: u32, check: FrameCheck) -> Result<u64, CipherError> {
    let seq = u16::try_from(seq).map_err(|_| CipherError::SeqOutOfRange(seq))?;
    let payload = to_fixed(value)? as u32;
    let word = ((FRAME_MAGIC as u64) << 56) | ((seq as u64) << 40) | ((payload as u64) << 8);
    Ok(word | checksum(word, check) as u64)
}

pub fn decode_frame(bits: u64) -> DecodedFrame {
    decode_frame_with(bits, FrameCheck::Full)
}

pub fn decode_frame_with(bits: u64, check: FrameCheck) -> DecodedFrame {
    let magic_ok = (bits >> 56) as u8 == FRAME_MAGIC;
    let crc_ok = checksum(bits & !0xFF, check) == bits as u8;
    DecodedFrame {
        value: from_fixed(payload_raw(bits)),
        seq: (bits >> 40) as u16,
        in_admissible_set: magic_ok && crc_ok,
    }
}

pub fn payload_raw(bits: u64) -> i32 {
    (bits >> PAYLOAD_SHIFT) as u32 as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frame_layout() {
        let f = encode_frame(0.0, 0).unwrap();
        assert_eq!(f >> 8, 0xA5_0000_0000_0000);
        assert_eq!(f as u8, crc8(&[0xA5, 0, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn round_trip_within_quantum() {
        for (v, s) in [(1.234567, 7u32), (-3.5, 65535), (32767.99, 1), (-32767.5, 2)] {
            let d = decode_frame(encode_frame(v, s).unwrap());
            assert!(d.in_admissible_set);
            assert_eq!(d.seq as u32, s);
            assert!((d.value - v).abs() <= 1.0 / PAYLOAD_SCALE);
        }
    }

    #[test]
    fn out_of_range_value_rejected() {
        assert!(matches!(
            encode_frame(32768.0, 0),
            Err(CipherError::ValueOutOfRange(_))
        ));
        assert!(encode_frame(f64::NAN, 0).is_err());
        assert!(matches!(
            encode_frame(0.0, 70000),
            Err(CipherError::SeqOutOfRange(70000))
        ));
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let f = encode_frame(12.75, 321).unwrap();
        for bit in 0..64 {
            assert!(!decode_frame(f ^ (1 << bit)).in_admissible_set, "bit {bit}");
        }
    }

    #[test]
    fn header_check_ignores_payload_errors() {
        let f = encode_frame_with(1.5, 9, FrameCheck::Header).unwrap();
        let d = decode_frame_with(f ^ (1 << 20), FrameCheck::Header);
        assert!(d.in_admissible_set);
        assert!(!decode_frame_with(f ^ (1 << 60), FrameCheck::Header).in_admissible_set);
    }

    #[test]
    fn crc_known_value() {
        // CRC-8/SMBUS check value.
        assert_eq!(crc8(b"123456789"), 0xF4);
    }
}
