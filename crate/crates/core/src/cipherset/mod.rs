//! Symmetric ciphers and the frame codec.
//!
//! Every cipher here transforms one 64-bit [`frame`] per message. XOR works
//! bitwise, the Feistel network on the frame as a single block, and AES on a
//! 128-bit block holding the frame in its first eight bytes followed by zeros.

mod aes;
mod feistel;
pub mod frame;
mod xor;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::bits::Bits;

pub use self::aes::{aes_decrypt, aes_encrypt, aes_rounds};
pub use self::feistel::{
    feistel_decrypt, feistel_decrypt_with, feistel_encrypt, feistel_encrypt_with, round_key,
    DES_ROUNDS, SBOX,
};
pub use self::frame::{decode_frame, decode_frame_with, encode_frame, encode_frame_with, DecodedFrame, FrameCheck};
pub use self::xor::{xor_decrypt, xor_encrypt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CipherError {
    #[error("invalid key length for {cipher}: {bits} bits")]
    InvalidKeyLength { cipher: &'static str, bits: usize },
    #[error("value {0} outside the frame payload range")]
    ValueOutOfRange(f64),
    #[error("sequence number {0} does not fit in 16 bits")]
    SeqOutOfRange(u32),
    #[error("unknown cipher `{0}`")]
    UnknownCipher(String),
}

/// Round-function complexity of XOR relative to an SPN round.
pub const ETA_XOR: f64 = 0.0625;
/// Round-function complexity of a Feistel round relative to an SPN round.
pub const ETA_FEISTEL: f64 = 0.2083;
pub const ETA_SPN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherKind {
    /// No encryption; frames travel in the clear.
    Plain,
    Xor,
    Feistel { rounds: u32 },
    Aes128,
    Aes192,
    Aes256,
}

/// Parameters of an encryption algorithm together with the numbers its
/// security measure is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherSpec {
    pub kind: CipherKind,
    pub name: String,
    /// Key length in bits.
    pub key_len: usize,
    pub rounds: u32,
    pub eta: f64,
    /// Block length in bits.
    pub block_len: usize,
}

impl CipherSpec {
    pub fn new(kind: CipherKind) -> Self {
        let (name, key_len, rounds, eta, block_len) = match kind {
            CipherKind::Plain => ("plain".to_string(), 0, 0, 0.0, 64),
            CipherKind::Xor => ("xor".to_string(), 8, 1, ETA_XOR, 8),
            CipherKind::Feistel { rounds } if rounds == DES_ROUNDS => {
                ("des".to_string(), 64, rounds, ETA_FEISTEL, 64)
            }
            CipherKind::Feistel { rounds } => {
                (format!("feistel:{rounds}"), 64, rounds, ETA_FEISTEL, 64)
            }
            CipherKind::Aes128 => ("aes128".to_string(), 128, 10, ETA_SPN, 128),
            CipherKind::Aes192 => ("aes192".to_string(), 192, 12, ETA_SPN, 128),
            CipherKind::Aes256 => ("aes256".to_string(), 256, 14, ETA_SPN, 128),
        };
        Self {
            kind,
            name,
            key_len,
            rounds,
            eta,
            block_len,
        }
    }

    pub fn xor() -> Self {
        Self::new(CipherKind::Xor)
    }

    pub fn feistel(rounds: u32) -> Self {
        Self::new(CipherKind::Feistel { rounds })
    }

    pub fn des() -> Self {
        Self::feistel(DES_ROUNDS)
    }

    pub fn aes(key_bits: usize) -> Result<Self, CipherError> {
        match key_bits {
            128 => Ok(Self::new(CipherKind::Aes128)),
            192 => Ok(Self::new(CipherKind::Aes192)),
            256 => Ok(Self::new(CipherKind::Aes256)),
            bits => Err(CipherError::InvalidKeyLength { cipher: "aes", bits }),
        }
    }

    /// Pool keys consumed to encrypt one frame. XOR draws a fresh 8-bit key
    /// per frame byte unless `xor_tiling` reuses a single key across the frame.
    pub fn keys_per_frame(&self, xor_tiling: bool) -> usize {
        match self.kind {
            CipherKind::Plain => 0,
            CipherKind::Xor if xor_tiling => 1,
            CipherKind::Xor => frame::FRAME_BITS.div_ceil(self.key_len),
            _ => 1,
        }
    }

    /// Ciphertext length in bytes.
    pub fn ciphertext_len(&self) -> usize {
        match self.kind {
            CipherKind::Aes128 | CipherKind::Aes192 | CipherKind::Aes256 => 16,
            _ => 8,
        }
    }

    pub fn has_avalanche(&self) -> bool {
        !matches!(self.kind, CipherKind::Plain | CipherKind::Xor)
    }

    /// The seven algorithms compared in the security/performance tradeoff.
    pub fn tradeoff_lineup() -> Vec<CipherSpec> {
        vec![
            Self::xor(),
            Self::feistel(1),
            Self::feistel(8),
            Self::des(),
            Self::new(CipherKind::Aes128),
            Self::new(CipherKind::Aes192),
            Self::new(CipherKind::Aes256),
        ]
    }
}

impl FromStr for CipherSpec {
    type Err = CipherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "plain" | "none" => Ok(Self::new(CipherKind::Plain)),
            "xor" => Ok(Self::xor()),
            "des" => Ok(Self::des()),
            "aes128" => Ok(Self::new(CipherKind::Aes128)),
            "aes192" => Ok(Self::new(CipherKind::Aes192)),
            "aes256" => Ok(Self::new(CipherKind::Aes256)),
            _ => s
                .strip_prefix("feistel:")
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&n| n >= 1)
                .map(Self::feistel)
                .ok_or_else(|| CipherError::UnknownCipher(s.to_string())),
        }
    }
}

impl fmt::Display for CipherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// A cipher bound to one key: `T_K` and its inverse.
#[derive(Debug, Clone)]
pub struct KeyedTransform<'a> {
    spec: &'a CipherSpec,
    key: Bits,
}

impl<'a> KeyedTransform<'a> {
    pub fn new(spec: &'a CipherSpec, key: Bits) -> Result<Self, CipherError> {
        let ok = match spec.kind {
            CipherKind::Plain => true,
            CipherKind::Xor => !key.is_empty(),
            CipherKind::Feistel { .. } => key.len() == 64,
            _ => key.len() == spec.key_len,
        };
        if !ok {
            return Err(CipherError::InvalidKeyLength {
                cipher: match spec.kind {
                    CipherKind::Xor => "xor",
                    CipherKind::Feistel { .. } => "feistel",
                    _ => "aes",
                },
                bits: key.len(),
            });
        }
        Ok(Self { spec, key })
    }

    pub fn encrypt_frame(&self, frame: u64) -> Vec<u8> {
        match self.spec.kind {
            CipherKind::Plain => frame.to_be_bytes().to_vec(),
            CipherKind::Xor => xor_encrypt(&Bits::from_u64(frame, 64), &self.key).to_bytes(),
            CipherKind::Feistel { rounds } => {
                feistel_encrypt(frame, self.key.to_u64(), rounds).to_be_bytes().to_vec()
            }
            _ => {
                let mut block = [0u8; 16];
                block[..8].copy_from_slice(&frame.to_be_bytes());
                aes_encrypt(&block, &self.key.to_bytes())
                    .expect("key length validated at construction")
                    .to_vec()
            }
        }
    }

    /// Inverse of [`encrypt_frame`](Self::encrypt_frame); `None` when the
    /// ciphertext has the wrong length for this cipher.
    pub fn decrypt_frame(&self, ciphertext: &[u8]) -> Option<u64> {
        if ciphertext.len() != self.spec.ciphertext_len() {
            return None;
        }
        let word = |b: &[u8]| u64::from_be_bytes(b[..8].try_into().unwrap());
        match self.spec.kind {
            CipherKind::Plain => Some(word(ciphertext)),
            CipherKind::Xor => {
                Some(xor_decrypt(&Bits::from_bytes(ciphertext), &self.key).to_u64())
            }
            CipherKind::Feistel { rounds } => {
                Some(feistel_decrypt(word(ciphertext), self.key.to_u64(), rounds))
            }
            _ => {
                let block: [u8; 16] = ciphertext.try_into().ok()?;
                let plain = aes_decrypt(&block, &self.key.to_bytes()).ok()?;
                Some(word(&plain))
            }
        }
    }
}
