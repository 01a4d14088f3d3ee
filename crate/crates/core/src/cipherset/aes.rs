use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes192, Aes256};

use super::CipherError;

fn check_key(key: &[u8]) -> Result<(), CipherError> {
    match key.len() {
        16 | 24 | 32 => Ok(()),
        n => Err(CipherError::InvalidKeyLength {
            cipher: "aes",
            bits: n * 8,
        }),
    }
}

/// AES block encryption; the key length (16, 24 or 32 bytes) selects the variant.
pub fn aes_encrypt(block: &[u8; 16], key: &[u8]) -> Result<[u8; 16], CipherError> {
    check_key(key)?;
    let mut buf = GenericArray::clone_from_slice(block);
    match key.len() {
        16 => Aes128::new(GenericArray::from_slice(key)).encrypt_block(&mut buf),
        24 => Aes192::new(GenericArray::from_slice(key)).encrypt_block(&mut buf),
        _ => Aes256::new(GenericArray::from_slice(key)).encrypt_block(&mut buf),
    }
    Ok(buf.into())
}

pub fn aes_decrypt(block: &[u8; 16], key: &[u8]) -> Result<[u8; 16], CipherError> {
    check_key(key)?;
    let mut buf = GenericArray::clone_from_slice(block);
    match key.len() {
        16 => Aes128::new(GenericArray::from_slice(key)).decrypt_block(&mut buf),
        24 => Aes192::new(GenericArray::from_slice(key)).decrypt_block(&mut buf),
        _ => Aes256::new(GenericArray::from_slice(key)).decrypt_block(&mut buf),
    }
    Ok(buf.into())
}

/// Rounds per key size.
pub fn aes_rounds(key_bits: usize) -> Option<u32> {
    match key_bits {
        128 => Some(10),
        192 => Some(12),
        256 => Some(14),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_key_length() {
        assert!(matches!(
            aes_encrypt(&[0; 16], &[0; 20]),
            Err(CipherError::InvalidKeyLength { bits: 160, .. })
        ));
    }

    #[test]
    fn rounds_table() {
        assert_eq!(aes_rounds(256), Some(14));
        assert_eq!(aes_rounds(64), None);
    }
}
