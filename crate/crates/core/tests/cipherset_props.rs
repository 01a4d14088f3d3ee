use proptest::prelude::*;
use qkdncs::bits::Bits;
use qkdncs::cipherset::{decode_frame, feistel_decrypt, feistel_encrypt, CipherSpec, KeyedTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_ciphers() -> Vec<CipherSpec> {
    ["xor", "feistel:1", "feistel:8", "des", "aes128", "aes192", "aes256"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

/// Straight-line 16-round network written out from the round definition,
/// independent of the loop in the library.
fn feistel16_oracle(block: u64, key: u64) -> u64 {
    const S: [u32; 16] = [12, 5, 6, 11, 9, 0, 10, 13, 3, 14, 15, 8, 4, 7, 1, 2];
    let f = |r: u32, i: u32| {
        let rotated = key.rotate_left(i);
        let x = r ^ (rotated >> 32) as u32 ^ rotated as u32;
        let mut out = 0u32;
        for n in 0..8 {
            out |= S[((x >> (4 * n)) & 15) as usize] << (4 * n);
        }
        out
    };
    let l0 = (block >> 32) as u32;
    let r0 = block as u32;
    let r1 = l0 ^ f(r0, 1);
    let r2 = r0 ^ f(r1, 2);
    let r3 = r1 ^ f(r2, 3);
    let r4 = r2 ^ f(r3, 4);
    let r5 = r3 ^ f(r4, 5);
    let r6 = r4 ^ f(r5, 6);
    let r7 = r5 ^ f(r6, 7);
    let r8 = r6 ^ f(r7, 8);
    let r9 = r7 ^ f(r8, 9);
    let r10 = r8 ^ f(r9, 10);
    let r11 = r9 ^ f(r10, 11);
    let r12 = r10 ^ f(r11, 12);
    let r13 = r11 ^ f(r12, 13);
    let r14 = r12 ^ f(r13, 14);
    let r15 = r13 ^ f(r14, 15);
    let r16 = r14 ^ f(r15, 16);
    ((r15 as u64) << 32) | r16 as u64
}

#[test]
fn des_shaped_network_matches_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let (b, k) = (rng.random::<u64>(), rng.random::<u64>());
        assert_eq!(feistel_encrypt(b, k, 16), feistel16_oracle(b, k));
    }
}

proptest! {
    #[test]
    fn every_cipher_round_trips(frame in any::<u64>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in all_ciphers() {
            let key = Bits::random(spec.key_len, &mut rng);
            let t = KeyedTransform::new(&spec, key).unwrap();
            prop_assert_eq!(t.decrypt_frame(&t.encrypt_frame(frame)), Some(frame));
        }
    }

    #[test]
    fn feistel_round_trips_any_round_count(block in any::<u64>(), key in any::<u64>(), rounds in 0u32..40) {
        prop_assert_eq!(feistel_decrypt(feistel_encrypt(block, key, rounds), key, rounds), block);
    }

    #[test]
    fn xor_error_locality(frame in any::<u64>(), key in any::<u64>(), mask in any::<u64>()) {
        let spec = CipherSpec::xor();
        let enc = KeyedTransform::new(&spec, Bits::from_u64(key, 64)).unwrap().encrypt_frame(frame);
        let dec = KeyedTransform::new(&spec, Bits::from_u64(key ^ mask, 64)).unwrap().decrypt_frame(&enc).unwrap();
        prop_assert_eq!((dec ^ frame).count_ones(), mask.count_ones());
    }
}

fn mean_avalanche(spec: &CipherSpec, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out_bits = spec.ciphertext_len() * 8;
    let mut changed = 0usize;
    for _ in 0..trials {
        let frame = rng.random::<u64>();
        let key = Bits::random(spec.key_len, &mut rng);
        let mut flipped = key.clone();
        flipped.flip(rng.random_range(0..spec.key_len));
        let a = KeyedTransform::new(spec, key).unwrap().encrypt_frame(frame);
        let b = KeyedTransform::new(spec, flipped).unwrap().encrypt_frame(frame);
        changed += Bits::from_bytes(&a).hamming(&Bits::from_bytes(&b));
    }
    changed as f64 / (trials * out_bits) as f64
}

#[test]
fn key_bit_flip_avalanche() {
    for name in ["des", "aes128", "aes192", "aes256"] {
        let spec: CipherSpec = name.parse().unwrap();
        let rate = mean_avalanche(&spec, 1000);
        assert!(rate >= 0.25, "{name}: {rate}");
    }
    // XOR has none: an 8-bit key tiled over the frame reaches one output bit per tile.
    let rate = mean_avalanche(&CipherSpec::xor(), 1000);
    assert!((rate - 8.0 / 64.0).abs() < 1e-12);
}

#[test]
fn random_words_land_in_admissible_set_at_two_to_minus_sixteen() {
    let n = 10_000_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let hits = (0..n).filter(|_| decode_frame(rng.random()).in_admissible_set).count() as f64;
    let p = 2f64.powi(-16);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - n as f64 * p).abs() <= 3.0 * sigma, "hits {hits}, expected {}", n as f64 * p);
}

#[test]
fn key_bits_consumed_per_frame() {
    let xor = CipherSpec::xor();
    assert_eq!(xor.keys_per_frame(false) * xor.key_len, 64);
    assert_eq!(xor.keys_per_frame(true), 1);
    for name in ["des", "aes128", "aes192", "aes256"] {
        let spec: CipherSpec = name.parse().unwrap();
        assert_eq!(spec.keys_per_frame(false), 1, "{name}");
    }
}
