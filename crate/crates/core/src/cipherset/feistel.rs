//! Parametric balanced Feistel network on 64-bit blocks.
//!
//! Round `i` (1-based) maps `(L, R)` to `(R, L ^ F(R, K_i))` with
//! `F(R, K) = S(R ^ K)`, where `S` substitutes each nibble through a 4-bit
//! S-box and `K_i` folds the master key rotated left by `i` to 32 bits by
//! XOR of its halves, so every key bit enters every round.
//! No swap follows the last round.

/// The PRESENT block cipher S-box.
pub const SBOX: [u8; 16] = [
    0xC, 0x5, 0x6, 0xB, 0x9, 0x0, 0xA, 0xD, 0x3, 0xE, 0xF, 0x8, 0x4, 0x7, 0x1, 0x2,
];

/// Round count of the DES-shaped configuration.
pub const DES_ROUNDS: u32 = 16;

pub fn round_key(key: u64, round: u32) -> u32 {
    let k = key.rotate_left(round);
    (k >> 32) as u32 ^ k as u32
}

fn substitute(word: u32, sbox: &[u8; 16]) -> u32 {
    (0..8).fold(0u32, |acc, nibble| {
        let shift = nibble * 4;
        let v = (word >> shift) & 0xF;
        acc | ((sbox[v as usize] as u32) << shift)
    })
}

fn round_fn(right: u32, subkey: u32, sbox: &[u8; 16]) -> u32 {
    substitute(right ^ subkey, sbox)
}

pub fn feistel_encrypt_with(block: u64, key: u64, rounds: u32, sbox: &[u8; 16]) -> u64 {
    let mut left = (block >> 32) as u32;
    let mut right = block as u32;
    for i in 1..=rounds {
        let next = left ^ round_fn(right, round_key(key, i), sbox);
        left = right;
        right = next;
    }
    ((left as u64) << 32) | right as u64
}

pub fn feistel_decrypt_with(block: u64, key: u64, rounds: u32, sbox: &[u8; 16]) -> u64 {
    let mut left = (block >> 32) as u32;
    let mut right = block as u32;
    for i in (1..=rounds).rev() {
        let prev_left = right ^ round_fn(left, round_key(key, i), sbox);
        right = left;
        left = prev_left;
    }
    ((left as u64) << 32) | right as u64
}

pub fn feistel_encrypt(block: u64, key: u64, rounds: u32) -> u64 {
    feistel_encrypt_with(block, key, rounds, &SBOX)
}

pub fn feistel_decrypt(block: u64, key: u64, rounds: u32) -> u64 {
    feistel_decrypt_with(block, key, rounds, &SBOX)
}
