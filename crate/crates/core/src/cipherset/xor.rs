use crate::bits::Bits;

/// Bitwise XOR of `block` with `key`, tiling the key when it is shorter than the block.
///
/// Self-inverse: applying it twice with the same key returns the block.
pub fn xor_encrypt(block: &Bits, key: &Bits) -> Bits {
    assert!(!key.is_empty(), "xor key must be nonempty");
    block
        .iter()
        .enumerate()
        .map(|(i, b)| b ^ key.get(i % key.len()))
        .collect()
}

pub fn xor_decrypt(block: &Bits, key: &Bits) -> Bits {
    xor_encrypt(block, key)
}
