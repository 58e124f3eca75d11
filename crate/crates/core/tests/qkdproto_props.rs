//! Statistical and property checks of the post-processing stack.

use proptest::prelude::*;
use qkdnet::bits::{self, binary_entropy, Bits};
use qkdnet::ids::NodeId;
use qkdnet::physlink::*;
use qkdnet::qkdproto::wire::{decode, decode_all, encode, encode_all, Message, Record};
use qkdnet::qkdproto::*;
use qkdnet::rng;
use rand::Rng;

fn random_bits(n: usize, seed: u64) -> Bits {
    let mut r = rng::rng(seed);
    (0..n).map(|_| r.random_range(0..2)).collect()
}

fn flip(a: &[u8], q: f64, seed: u64) -> Bits {
    let mut r = rng::rng(seed);
    a.iter().map(|&x| x ^ r.random_bool(q) as u8).collect()
}

/// Every slot detected, receiver bases uniform, values per the noiseless
/// channel (random on basis mismatch).
fn all_detected(n: usize, seed: u64) -> (PulseFrame, DetectionRecord) {
    let mut r = rng::rng(seed);
    let f = PulseFrame::random(seed, n, false, &mut r);
    let events = (0..n)
        .map(|i| {
            let (b, v) = f.slot(i);
            let rb: u8 = r.random_range(0..2);
            let rv = if rb == b { v } else { r.random_range(0..2) };
            Detection::new(i as u64, rb, rv)
        })
        .collect();
    (f.clone(), DetectionRecord::new(f.frame_id, n as u64, events))
}

#[test]
fn bb84_keeps_half() {
    // 2 of the 4 (tx basis, rx basis) pairs match
    let matching = (0..2)
        .flat_map(|a| (0..2).map(move |b| (a, b)))
        .filter(|(a, b)| a == b)
        .count();
    let oracle = matching as f64 / 4.0;
    let (f, r) = all_detected(100_000, 1);
    let s = sift_bb84(&f, &r).unwrap();
    let frac = s.len() as f64 / 1e5;
    assert!((frac - oracle).abs() < 0.005, "{frac}");
}

/// Conclusive fraction of SARG on a noiseless channel by enumerating
/// (state basis, state value, decoy value, rx basis) with the outcome
/// distribution of an ideal measurement.
fn sarg_oracle() -> f64 {
    let mut conclusive = 0.0;
    for basis in 0..2u8 {
        for value in 0..2u8 {
            for decoy in 0..2u8 {
                for rx in 0..2u8 {
                    for outcome in 0..2u8 {
                        let p_outcome = if rx == basis { f64::from(outcome == value) } else { 0.5 };
                        // announced state lying in Bob's basis
                        let in_rx_basis = if rx == basis { value } else { decoy };
                        if outcome != in_rx_basis {
                            conclusive += p_outcome / 16.0;
                        }
                    }
                }
            }
        }
    }
    conclusive
}

#[test]
fn sarg_keeps_quarter_without_errors() {
    let oracle = sarg_oracle();
    assert_eq!(oracle, 0.25);
    let (f, r) = all_detected(100_000, 2);
    let s = sift_sarg(&f, &r, 3).unwrap();
    let frac = s.len() as f64 / 1e5;
    assert!((frac - oracle).abs() < 0.005, "{frac}");
    assert_eq!(s.alice, s.bob);
}

#[test]
fn qber_sample_tracks_flip_rate() {
    let a = random_bits(100_000, 5);
    let b = flip(&a, 0.05, 6);
    // binomial 99.99% band for a 10^4-bit sample is about +-0.0087; the
    // pinned tolerance is 0.007 (~3.2 sigma)
    let s = estimate_qber(&a, &b, 0.1, 7).unwrap();
    assert!((s.qber - 0.05).abs() < 0.007, "{}", s.qber);
    assert_eq!(s.alice.len(), 90_000);
    assert_eq!(s.disclosed, 10_000);
}

#[test]
fn cascade_identical_inputs() {
    let a = random_bits(10_000, 1);
    let rec = reconcile_cascade(&a, &a, 0.01, 1).unwrap();
    assert_eq!(rec.corrected, a);
    assert_eq!(rec.flips, 0);
    let top_level: usize = rec.block_sizes.iter().map(|k| a.len().div_ceil(*k)).sum();
    assert_eq!(rec.bits_leaked as usize, top_level);
}

#[test]
fn cascade_one_percent_reliability() {
    let mut ok = 0;
    for t in 0..1000u64 {
        let a = random_bits(10_000, t);
        let b = flip(&a, 0.01, t + 10_000);
        if let Ok(rec) = reconcile_cascade(&a, &b, 0.01, t) {
            if rec.corrected == a {
                ok += 1;
            }
        }
    }
    assert!(ok >= 999, "{ok}/1000");
}

#[test]
fn cascade_leakage_near_shannon_limit() {
    let n = 10_000;
    let bound = 1.25 * n as f64 * binary_entropy(0.03);
    assert!((bound - 2429.9).abs() < 0.1);
    let a = random_bits(n, 42);
    let b = flip(&a, 0.03, 43);
    assert!(reconcile_cascade(&a, &b, 0.03, 44).unwrap().bits_leaked as f64 <= bound);

    let trials = 300;
    let mut leaks: Vec<u64> = (0..trials)
        .map(|t| {
            let a = random_bits(n, 500 + t);
            let b = flip(&a, 0.03, 900 + t);
            reconcile_cascade(&a, &b, 0.03, t).unwrap().bits_leaked
        })
        .collect();
    leaks.sort_unstable();
    let mean = leaks.iter().sum::<u64>() as f64 / trials as f64;
    assert!(mean <= bound, "mean leak {mean}");
    assert!(
        leaks[(trials as usize * 99) / 100 - 1] as f64 <= bound,
        "99th percentile {}",
        leaks[296]
    );
}

#[test]
fn reconciliation_soundness() {
    for q in [0.01, 0.03, 0.05] {
        let mut failures = 0;
        for t in 0..1000u64 {
            let a = random_bits(10_000, t * 3);
            let b = flip(&a, q, t * 3 + 1);
            match reconcile_cascade(&a, &b, q, t) {
                Ok(rec) => assert_eq!(rec.corrected, a, "hash passed on a wrong string"),
                Err(ProtocolError::ReconciliationFailed { .. }) => failures += 1,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(failures < 1, "q={q}: {failures} failures in 1000");
    }
}

#[test]
fn privacy_amplification_avalanche() {
    let key = random_bits(64, 1);
    let mut flipped = key.clone();
    flipped[0] ^= 1;
    let m = 32;
    let mut counts = vec![0u32; m];
    for s in 0..10_000u64 {
        let seed = random_bits(toeplitz_seed_len(64, m), s);
        let x = privacy_amplify(&key, m, &seed).unwrap();
        let y = privacy_amplify(&flipped, m, &seed).unwrap();
        for (c, (a, b)) in counts.iter_mut().zip(x.iter().zip(&y)) {
            *c += u32::from(a != b);
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let f = f64::from(*c) / 1e4;
        assert!((f - 0.5).abs() < 0.02, "output bit {i}: {f}");
    }
}

#[test]
fn privacy_amplification_is_linear() {
    let seed = random_bits(toeplitz_seed_len(8, 5), 3);
    let keys: Vec<Bits> = (0..256u32).map(|k| (0..8).map(|i| ((k >> i) & 1) as u8).collect()).collect();
    let out: Vec<Bits> = keys.iter().map(|k| privacy_amplify(k, 5, &seed).unwrap()).collect();
    for (i, a) in keys.iter().enumerate() {
        for (j, b) in keys.iter().enumerate() {
            let x = bits::xor(a, b);
            let k = keys.iter().position(|c| *c == x).unwrap();
            assert_eq!(out[k], bits::xor(&out[i], &out[j]), "keys {i} {j}");
        }
    }
}

#[test]
fn tags_separate_messages() {
    let mut r = rng::rng(11);
    let mut differ = 0;
    for _ in 0..10_000 {
        let key = AuthKey::new(r.random(), r.random());
        let len = r.random_range(1..200);
        let m1: Vec<u8> = (0..len).map(|_| r.random()).collect();
        let mut m2 = m1.clone();
        let at = r.random_range(0..len);
        m2[at] ^= r.random_range(1..=255u8);
        differ += u32::from(auth_tag(&key, &m1) != auth_tag(&key, &m2));
    }
    assert!(differ >= 9_900, "{differ}");
}

fn noiseless_link() -> LinkParams {
    LinkParams {
        detector_efficiency: 1.0,
        dark_count_prob: 0.0,
        dead_time_s: 0.0,
        intrinsic_error: 0.0,
        ..LinkParams::default()
    }
}

#[test]
fn pipeline_end_to_end_noiseless() {
    let link = noiseless_link();
    let phase = PhaseState::new(0.0, 0.0, 0.5).unwrap();
    let cfg = PipelineConfig::default();
    for seed in 0..1000u64 {
        let f = PulseFrame::random(seed, 1 << 14, false, &mut rng::rng(seed));
        let r = transmit_frame(&link, &phase, &EveModel::None, &f, seed).unwrap();
        let s = sift(Sifting::Bb84, &f, &r, seed).unwrap();
        let d = distill_block(&cfg, &link, seed, (NodeId::from("A"), NodeId::from("B")), &s, seed, |_, _| {
            Ok(0)
        })
        .unwrap();
        assert!(d.secret_len() > 0);
        assert_eq!(d.alice.bits(), d.bob.bits(), "seed {seed}");
        assert!(d.secret_len() as u64 <= d.reconciled_len as u64 - d.bits_leaked);
        let replay = decode_all(&encode_all(&d.transcript)).unwrap();
        assert_eq!(replay, d.transcript);
    }
}

#[test]
fn sarg_outlasts_bb84_under_splitting_attack() {
    let phase = PhaseState::new(0.0, 0.0, 0.5).unwrap();
    let est = EntropyEstimator::new(EstimatorKind::MultiphotonAware);
    let mut sarg_ahead = 0;
    for step in 0..20 {
        let link = LinkParams {
            mean_photon_number: 0.5,
            channel_loss_db: 0.5 * step as f64,
            detector_efficiency: 0.1,
            dark_count_prob: 1e-6,
            dead_time_s: 0.0,
            intrinsic_error: 0.01,
            ..LinkParams::default()
        };
        let f = PulseFrame::random(step, 1 << 21, false, &mut rng::rng(step));
        let r = transmit_frame(&link, &phase, &EveModel::PhotonNumberSplit, &f, step).unwrap();
        let yield_of = |sifting| {
            let s = sift(sifting, &f, &r, step).unwrap();
            let cfg = PipelineConfig {
                sifting,
                estimator: est,
                ..PipelineConfig::default()
            };
            match distill_block(&cfg, &link, step, ("A".into(), "B".into()), &s, step, |_, _| Ok(0)) {
                Ok(d) => d.secret_len(),
                Err(ProtocolError::InsufficientSample { .. }) => 0,
                Err(e) => panic!("{e}"),
            }
        };
        let (bb84, sarg) = (yield_of(Sifting::Bb84), yield_of(Sifting::Sarg));
        assert!(sarg >= bb84, "loss {} dB: SARG {sarg} < BB84 {bb84}", link.channel_loss_db);
        sarg_ahead += usize::from(sarg > bb84);
    }
    assert!(sarg_ahead > 0, "sweep never separates the two protocols");
}

fn arb_bits(max: usize) -> impl Strategy<Value = Bits> {
    proptest::collection::vec(0u8..2, 0..max)
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (proptest::collection::vec(any::<u64>(), 0..20)).prop_flat_map(|slots| {
            let n = slots.len();
            (Just(slots), proptest::collection::vec(0u8..2, n))
                .prop_map(|(slots, bases)| Message::DetectionReport { slots, bases })
        }),
        proptest::collection::vec(any::<u64>(), 0..20).prop_map(|kept| Message::SiftAccept { kept }),
        proptest::collection::vec((any::<u64>(), 0u8..2, 0u8..2), 0..20).prop_map(|v| {
            Message::SargAnnounce {
                slots: v.iter().map(|x| x.0).collect(),
                pairs: v.iter().map(|x| (x.1, x.2)).collect(),
            }
        }),
        (proptest::collection::vec(any::<u32>(), 0..20), arb_bits(40))
            .prop_map(|(indices, bits)| Message::QberSample { indices, bits }),
        proptest::collection::vec((any::<u8>(), any::<u32>(), any::<u32>(), 0u8..2), 0..20).prop_map(|v| {
            Message::CascadeParities {
                parities: v
                    .into_iter()
                    .map(|(pass, start, end, parity)| ParityDisclosure {
                        pass,
                        start,
                        end,
                        parity,
                    })
                    .collect(),
            }
        }),
        any::<u64>().prop_map(|hash| Message::VerifyHash { hash }),
        (any::<u32>(), arb_bits(200)).prop_map(|(target_len, seed)| Message::PrivacySeed { target_len, seed }),
        (any::<u8>(), any::<u64>()).prop_map(|(round, tag)| Message::AuthTag { round, tag }),
        (any::<u64>(), any::<u32>(), arb_bits(100)).prop_map(|(session, hop, ciphertext)| {
            Message::RelayCiphertext {
                session,
                hop,
                ciphertext,
            }
        }),
        any::<u64>().prop_map(|session| Message::SessionAbort { session }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wire_round_trip(frame_id in any::<u64>(), m in arb_message()) {
        let rec = Record::new(frame_id, m);
        let bytes = encode(&rec);
        let (back, used) = decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn wire_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn sarg_noiseless_is_error_free(seed in any::<u64>()) {
        let (f, r) = all_detected(2_000, seed);
        let s = sift_sarg(&f, &r, seed.wrapping_add(1)).unwrap();
        prop_assert_eq!(s.alice, s.bob);
    }

    #[test]
    fn sift_uses_public_information_only(seed in any::<u64>()) {
        // Alice's answer is a function of Bob's announcement and her bases
        let (f, r) = all_detected(500, seed);
        let announced: Vec<(u64, u8)> = r.events.iter().map(|e| (e.slot, e.rx_basis)).collect();
        let alice_view: Vec<u64> = announced.iter().filter(|(s, b)| f.basis(*s as usize) == *b).map(|(s, _)| *s).collect();
        prop_assert_eq!(sift_bb84(&f, &r).unwrap().kept, alice_view);
    }

    #[test]
    fn secret_never_exceeds_room(n in 1u64..100_000, q in 0.0f64..0.5, leaked in 0u64..200_000, margin in 0u64..1000, aware in any::<bool>()) {
        let kind = if aware { EstimatorKind::MultiphotonAware } else { EstimatorKind::SimpleShannon };
        let est = EntropyEstimator::new(kind).with_margin(margin);
        let link = LinkParams { detector_efficiency: 0.5, ..LinkParams::default() };
        let s = estimate_secret_length(&est, n, q, leaked, &link, Sifting::Bb84);
        prop_assert!(s <= n.saturating_sub(leaked));
    }
}
