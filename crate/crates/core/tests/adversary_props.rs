use std::collections::HashSet;

use qkdncs::adversary::{
    apply_attack, digest, frame_key, simulate_channel, AttackKind, AttackScenario, DetectorConfig, Receiver, Verdict,
    WireMessage,
};
use qkdncs::cipherset::{encode_frame, CipherSpec, KeyedTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ciphers() -> Vec<CipherSpec> {
    ["xor", "des", "aes128", "aes256"].iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn clean_channels_stay_clean() {
    for spec in ciphers() {
        for seed in 0..5 {
            let r = simulate_channel(&spec, 2000, &AttackScenario::default(), DetectorConfig::default(), seed);
            assert_eq!(r.records.len(), 2000);
            assert!(r.records.iter().all(|x| x.frame_valid && x.verdict == Verdict::Clean), "{spec} seed {seed}");
        }
    }
}

/// Alternating replay and deception windows on one channel; verdicts are
/// checked against the digests of everything actually sent.
#[test]
fn replay_verdicts_coincide_with_digest_matches() {
    let spec = CipherSpec::xor();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let key_seed = 77;
    let mut receiver = Receiver::new(DetectorConfig::default());
    let mut history: Vec<WireMessage> = Vec::new();
    let mut sent: HashSet<u64> = HashSet::new();
    let (mut replays, mut deceptions) = (0, 0);
    for period in 0..4000u64 {
        let seq = period as u32;
        let frame = encode_frame(rng.random_range(-50.0..50.0), seq & 0xFFFF).unwrap();
        let ct = KeyedTransform::new(&spec, frame_key(&spec, key_seed, seq)).unwrap().encrypt_frame(frame);
        let msg = WireMessage { seq, ciphertext: ct };
        let kind = match period % 40 {
            10 => AttackKind::Replay,
            30 => AttackKind::Deception,
            _ => AttackKind::None,
        };
        let scenario = AttackScenario {
            kind,
            replay_offset: 1 + period % 7,
            flip_bits: 0,
            ..AttackScenario::default()
        };
        let out = apply_attack(&scenario, period, msg.clone(), &history, &mut rng).message.unwrap();
        sent.insert(digest(&msg.ciphertext));
        history.push(msg);
        let rec = receiver.receive(period, &out, |k, c| {
            KeyedTransform::new(&spec, frame_key(&spec, key_seed, k)).ok()?.decrypt_frame(c)
        });
        match rec.verdict {
            Verdict::ReplaySuspected => {
                replays += 1;
                assert!(sent.contains(&rec.ciphertext_digest));
            }
            Verdict::DeceptionSuspected => {
                deceptions += 1;
                assert!(!sent.contains(&rec.ciphertext_digest));
            }
            Verdict::Clean => assert_eq!(kind, AttackKind::None, "period {period}"),
            Verdict::DosSuspected => panic!("no drops were injected"),
        }
    }
    assert_eq!(replays, 100);
    assert_eq!(deceptions, 100);
}

#[test]
fn stale_key_fails_after_every_drop() {
    for spec in ciphers() {
        let scenario = AttackScenario {
            kind: AttackKind::Dos,
            drop_p: 0.5,
            ..AttackScenario::default()
        };
        let r = simulate_channel(&spec, 20_000, &scenario, DetectorConfig::default(), 3);
        let dropped: HashSet<u64> = r.dropped_periods.iter().copied().collect();
        let mut gaps = 0;
        for rec in &r.records {
            if rec.period > 0 && dropped.contains(&(rec.period - 1)) {
                gaps += 1;
                assert!(rec.stale_key_invalid, "{spec} period {}", rec.period);
                assert_eq!(rec.verdict, Verdict::DosSuspected);
                assert!(rec.frame_valid);
            } else {
                assert_eq!(rec.verdict, Verdict::Clean);
            }
        }
        assert!(gaps > 4000, "{spec}: {gaps}");
    }
}

#[test]
fn raw_mode_run_length_rule_bounds_false_alarms() {
    use qkdncs::keysource::KeyGrade;
    use qkdncs::loopsim::{run, LoopConfig};
    let mut alarms = 0usize;
    let mut periods = 0usize;
    for seed in 0..5 {
        let cfg = LoopConfig {
            key_grade: KeyGrade::Raw,
            rng_seed: seed,
            ..LoopConfig::default()
        };
        let r = run(&cfg).unwrap();
        for rec in r.detection_u.iter().chain(&r.detection_y) {
            periods += 1;
            alarms += (rec.verdict != Verdict::Clean) as usize;
        }
    }
    assert!((alarms as f64) / (periods as f64) < 0.01, "{alarms} of {periods}");
}
