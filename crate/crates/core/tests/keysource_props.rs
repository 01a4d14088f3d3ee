use proptest::prelude::*;
use qkdncs::bits::Bits;
use qkdncs::cipherset::CipherSpec;
use qkdncs::keysource::{privacy_amplify, reconcile, sift, KeyGrade, KeySource, KeySourceConfig, PhotonBatch, SiftedKeyPair};
use qkdncs::loopsim::{run, LoopConfig};
use qkdncs::metrics::comm_load;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sifting_keeps_half_and_concentrates() {
    let mut last_dev = f64::INFINITY;
    for (i, len) in [1_000usize, 100_000, 1_000_000].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let batch = PhotonBatch::generate(len, 0.05, &mut rng);
        let kept = batch.matched().unwrap().0.len() as f64 / len as f64;
        let sigma = (0.25 / len as f64).sqrt();
        assert!((kept - 0.5).abs() <= 4.0 * sigma, "len {len}: {kept}");
        let dev = (kept - 0.5).abs();
        assert!(dev <= last_dev.max(4.0 * sigma));
        last_dev = dev;
    }
}

#[test]
fn qber_estimate_is_unbiased() {
    let q = 0.06;
    let runs = 100;
    let mut sum = 0.0;
    let mut checks = 0usize;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let batch = PhotonBatch::generate(20_000, q, &mut rng);
        let pair = sift(&batch, 0.1, &mut rng).unwrap();
        sum += pair.qber_estimate;
        checks += pair.check_bits_spent;
    }
    let mean = sum / runs as f64;
    let per_run = checks as f64 / runs as f64;
    let sigma = (q * (1.0 - q) / per_run).sqrt() / (runs as f64).sqrt();
    assert!((mean - q).abs() <= 2.0 * sigma, "mean {mean}, sigma {sigma}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn successful_reconciliation_is_exact(n in 64usize..2048, q in 0.005f64..0.1, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alice = Bits::random(n, &mut rng);
        let bob = alice.xor(&Bits::bernoulli(n, q, &mut rng));
        let pair = SiftedKeyPair::with_known_qber(alice, bob, q);
        if let Ok(r) = reconcile(&pair, n / 5, 0.2, &mut rng) {
            prop_assert_eq!(&r.corrected_alice, &r.corrected_bob);
            prop_assert_eq!(&r.corrected_alice, &pair.alice_key);
        }
    }

    #[test]
    fn equal_inputs_hash_equal(n in 64usize..1024, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Bits::random(n, &mut rng);
        let b = a.clone();
        let t = n / 4;
        prop_assert_eq!(privacy_amplify(&a, t, 20, seed).unwrap(), privacy_amplify(&b, t, 20, seed).unwrap());
    }
}

#[test]
fn modelled_leak_matches_formula_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for q in [0.01, 0.02, 0.05, 0.08, 0.1] {
        let l0 = (1.0f64 / q).floor();
        let n = 4096;
        let alice = Bits::random(n, &mut rng);
        let pair = SiftedKeyPair::with_known_qber(alice.clone(), alice, q);
        for m_over_n in [0.1, 0.2, 0.5] {
            for key_len in [8usize, 64, 128, 192, 256] {
                let r = reconcile(&pair, key_len, m_over_n, &mut rng).unwrap();
                let expected = (key_len as f64 / (m_over_n * l0)).round() * l0.log2();
                assert_eq!(r.leaked_model, expected);
                let load = comm_load(key_len, q, m_over_n).unwrap();
                assert!((load - key_len as f64 - expected).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn final_keys_agree_between_parties() {
    let cfg = KeySourceConfig {
        generation_rate_bps: 100_000.0,
        ..KeySourceConfig::default()
    };
    let mut src = KeySource::new(cfg, KeyGrade::Final, 17);
    let (a, b) = src.generate(1.0);
    assert!(a.len() > 10_000);
    assert_eq!(a, b);
    // Roughly m/n of the kept bits survive the pipeline.
    let st = src.stats();
    let kept = st.sifted_bits - st.check_bits_spent;
    assert!(st.output_bits as f64 <= 0.2 * kept as f64 + 1.0);
}

#[test]
fn raw_keys_carry_channel_errors() {
    let cfg = KeySourceConfig {
        generation_rate_bps: 200_000.0,
        ..KeySourceConfig::default()
    };
    let mut src = KeySource::new(cfg, KeyGrade::Raw, 5);
    let (a, b) = src.generate(1.0);
    let rate = a.hamming(&b) as f64 / a.len() as f64;
    assert!((rate - 0.1).abs() < 0.005, "{rate}");
}

#[test]
fn no_key_used_twice_when_rate_suffices() {
    for name in ["xor", "des", "aes128", "aes256"] {
        let cfg = LoopConfig {
            cipher: name.parse::<CipherSpec>().unwrap(),
            horizon_periods: 200,
            rng_seed: 4,
            ..LoopConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert_eq!(report.key_stats_u.max_use_count, 1, "{name}");
        assert_eq!(report.key_stats_y.max_use_count, 1, "{name}");
        assert!(report.pool_rows.iter().all(|row| row.3 <= 1), "{name}");
        assert_eq!(report.keys_reused_r, 1.0, "{name}");
    }
}
