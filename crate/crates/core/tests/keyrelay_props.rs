use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use qkdnet::bits::{self, Bits};
use qkdnet::ids::{LinkId, NodeId};
use qkdnet::keyrelay::{
    find_path, HealthConfig, HopOutcome, LinkHealth, LinkHealthView, RelayError, RelaySession, SessionStatus, Telemetry,
    RELAY_AUTH_BITS,
};
use qkdnet::keystore::{audit, AuditRecord, KeyNetwork, Origin, Pool, Purpose};
use qkdnet::netgraph::{load_topology, preset, Topology};
use qkdnet::qkdproto::wire::Message;
use qkdnet::rng;
use qkdnet::time::SimTime;
use rand::Rng;

fn n(s: &str) -> NodeId {
    NodeId::from(s)
}

fn t(s: f64) -> SimTime {
    SimTime::from_secs(s)
}

fn random_bits(len: usize, seed: u64) -> Bits {
    let mut g = rng::rng(seed);
    (0..len).map(|_| g.random_range(0..2u8)).collect()
}

/// Give every adjacency `key_bits` of pad plus prepositioned auth key.
fn keyed(topo: &Topology, key_bits: usize, seed: u64) -> KeyNetwork {
    let mut k = KeyNetwork::new();
    for (i, a) in topo.adjacencies().iter().enumerate() {
        k.deposit_pair(
            &a.a,
            &a.b,
            Pool::Auth,
            "pre",
            random_bits(4096, rng::derive(seed, 2 * i as u64)),
            Origin::Prepositioned,
            SimTime::ZERO,
        )
        .unwrap();
        k.deposit_pair(
            &a.a,
            &a.b,
            Pool::Key,
            "qkd/0",
            random_bits(key_bits, rng::derive(seed, 2 * i as u64 + 1)),
            Origin::DirectQkd,
            SimTime::ZERO,
        )
        .unwrap();
    }
    k
}

fn line(len: usize) -> Topology {
    let mut s = String::from("schema_version = 1\n");
    for i in 0..=len {
        let role = if i == 0 {
            "tx"
        } else if i == len {
            "rx"
        } else {
            "relay"
        };
        s += &format!("[[node]]\nid = \"N{i}\"\nrole = \"{role}\"\n");
    }
    for i in 0..len {
        s += &format!("[[link]]\ntx = \"N{i}\"\nrx = \"N{}\"\nlength_km = 10.0\n", i + 1);
    }
    load_topology(&s).unwrap()
}

fn run(session: &mut RelaySession, keys: &mut KeyNetwork) -> HopOutcome {
    let mut pass = |_: &mut _| {};
    loop {
        match session.step(keys, t(1.0), &mut pass).unwrap() {
            HopOutcome::Forwarded { .. } => continue,
            other => return other,
        }
    }
}

fn delivered_bits(keys: &KeyNetwork, a: &NodeId, b: &NodeId, segment: &str) -> Bits {
    let seg = keys
        .pair(a, b)
        .unwrap()
        .key
        .segments()
        .iter()
        .find(|s| s.id == segment)
        .unwrap();
    assert_eq!(seg.origin, Origin::Relay);
    seg.bits().to_vec()
}

fn check_audit(keys: &KeyNetwork) {
    audit::check_one_time_use(&keys.audit).unwrap();
    audit::check_conservation(&keys.audit).unwrap();
    audit::check_write_offs(&keys.audit).unwrap();
    keys.mirrors_hold().unwrap();
}

#[test]
fn hop_with_empty_auth_pool_refills_after_taking_its_pad() {
    let topo = line(1);
    let mut keys = KeyNetwork::new();
    // less key than one refill: the refill must not swallow the pad
    keys.deposit_pair(
        &n("N0"),
        &n("N1"),
        Pool::Key,
        "qkd/0",
        random_bits(1000, 1),
        Origin::DirectQkd,
        t(0.0),
    )
    .unwrap();
    let mut s = RelaySession::new(1, n("N0"), n("N1"), 600, 2);
    s.plan(&topo, &mut keys, &LinkHealthView::default(), &BTreeSet::new(), t(0.0))
        .unwrap();
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    assert_eq!(keys.available(&n("N0"), &n("N1"), Pool::Auth), 400 - RELAY_AUTH_BITS);
    check_audit(&keys);
}

#[test]
fn two_hop_xor_example() {
    let topo = line(2);
    let mut keys = KeyNetwork::new();
    for (a, b, k) in [("N0", "N1", "1100"), ("N1", "N2", "0011")] {
        keys.deposit_pair(
            &n(a),
            &n(b),
            Pool::Auth,
            "pre",
            random_bits(256, 1),
            Origin::Prepositioned,
            SimTime::ZERO,
        )
        .unwrap();
        keys.deposit_pair(
            &n(a),
            &n(b),
            Pool::Key,
            "k",
            bits::from_str(k),
            Origin::DirectQkd,
            SimTime::ZERO,
        )
        .unwrap();
    }
    let health = LinkHealthView::default();
    let mut s = RelaySession::new(1, n("N0"), n("N2"), 4, 0);
    s.plan_with_secret(&topo, &mut keys, &health, bits::from_str("1010"), t(0.0))
        .unwrap();
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    let c: Vec<String> = s.hop_transcripts.iter().map(|h| bits::to_string(&h.ciphertext)).collect();
    assert_eq!(c, ["0110", "1001"]);
    assert_eq!(bits::to_string(&delivered_bits(&keys, &n("N2"), &n("N0"), "relay/1")), "1010");
    assert_eq!(bits::to_string(&delivered_bits(&keys, &n("N0"), &n("N2"), "relay/1")), "1010");
    check_audit(&keys);
}

#[test]
fn one_hop_is_a_single_pad() {
    let topo = line(1);
    let mut keys = keyed(&topo, 512, 3);
    let mut s = RelaySession::new(9, n("N0"), n("N1"), 256, 11);
    s.plan(&topo, &mut keys, &LinkHealthView::default(), &BTreeSet::new(), t(0.0))
        .unwrap();
    assert_eq!(s.path, [n("N0"), n("N1")]);
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    assert_eq!(s.hop_transcripts.len(), 1);
    assert_eq!(delivered_bits(&keys, &n("N1"), &n("N0"), "relay/9"), s.secret());
}

#[test]
fn five_hops_ten_thousand_bits_accounting() {
    let topo = line(5);
    let mut keys = keyed(&topo, 20_000, 5);
    let before = keys.audit.len();
    let mut s = RelaySession::new(2, n("N0"), n("N5"), 10_000, 77);
    s.plan(&topo, &mut keys, &LinkHealthView::default(), &BTreeSet::new(), t(0.0))
        .unwrap();
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    assert_eq!(delivered_bits(&keys, &n("N5"), &n("N0"), "relay/2"), s.secret());

    // oracle: replay every hop from the audit trail with the pads in the clear
    let mut otp = 0;
    let mut auth = 0;
    for r in &keys.audit[before..] {
        if let AuditRecord::Consume {
            node,
            peer,
            purpose,
            start,
            end,
            ..
        } = r
        {
            if node > peer {
                continue; // count each mirrored draw once
            }
            match purpose {
                Purpose::OneTimePad => otp += end - start,
                Purpose::Authentication => auth += end - start,
                Purpose::Delivery => unreachable!(),
            }
        }
    }
    assert_eq!(otp, 5 * 10_000);
    assert_eq!(auth, 5 * RELAY_AUTH_BITS);
    for h in &s.hop_transcripts {
        let pad = keys
            .pair(&h.from, &h.to)
            .unwrap()
            .key
            .stream_bits(h.key_offsets.clone())
            .unwrap();
        assert_eq!(bits::xor(&h.ciphertext, &pad), s.secret());
    }
    check_audit(&keys);
}

#[test]
fn cambridge_transmitters_relay_through_a_receiver() {
    let topo = preset("cambridge").unwrap();
    let health = LinkHealthView::default();
    let mut keys = keyed(&topo, 4096, 8);
    let p = find_path(&topo, &keys, &health, &n("Alice"), &n("Anna"), 1024, &BTreeSet::new()).unwrap();
    // equal key everywhere: lexicographic tie-break
    assert_eq!(p, [n("Alice"), n("Bob"), n("Anna")]);
    // more key through Boris moves the path there
    for (a, b) in [("Alice", "Boris"), ("Anna", "Boris")] {
        keys.deposit_pair(
            &n(a),
            &n(b),
            Pool::Key,
            "extra",
            random_bits(100, 1),
            Origin::DirectQkd,
            SimTime::ZERO,
        )
        .unwrap();
    }
    let p = find_path(&topo, &keys, &health, &n("Alice"), &n("Anna"), 1024, &BTreeSet::new()).unwrap();
    assert_eq!(p, [n("Alice"), n("Boris"), n("Anna")]);
    // Ali reaches Bob over the bridge to Alice
    let p = find_path(&topo, &keys, &health, &n("Ali"), &n("Bob"), 1024, &BTreeSet::new()).unwrap();
    assert_eq!(p, [n("Ali"), n("Alice"), n("Bob")]);
}

#[test]
fn bottleneck_beats_lexicographic_order() {
    let topo = load_topology(include_str!("../src/netgraph/presets/diamond.toml")).unwrap();
    let mut keys = keyed(&topo, 1000, 4);
    keys.deposit_pair(
        &n("R2"),
        &n("D"),
        Pool::Key,
        "x",
        random_bits(10, 2),
        Origin::DirectQkd,
        SimTime::ZERO,
    )
    .unwrap();
    keys.deposit_pair(
        &n("S"),
        &n("R2"),
        Pool::Key,
        "x",
        random_bits(10, 3),
        Origin::DirectQkd,
        SimTime::ZERO,
    )
    .unwrap();
    let p = find_path(
        &topo,
        &keys,
        &LinkHealthView::default(),
        &n("S"),
        &n("D"),
        500,
        &BTreeSet::new(),
    )
    .unwrap();
    assert_eq!(p, [n("S"), n("R2"), n("D")]);
}

#[test]
fn path_errors() {
    let topo = line(4);
    let keys = keyed(&topo, 1000, 1);
    let mut health = LinkHealthView::new(HealthConfig::default());
    let none = BTreeSet::new();
    assert!(matches!(
        find_path(&topo, &keys, &health, &n("N1"), &n("N1"), 1, &none),
        Err(RelayError::SameEndpoints(_))
    ));
    assert!(matches!(
        find_path(&topo, &keys, &health, &n("N0"), &n("Q"), 1, &none),
        Err(RelayError::UnknownNode(_))
    ));
    assert!(find_path(&topo, &keys, &health, &n("N0"), &n("N4"), 1, &none).is_ok());
    health.force(&LinkId::from("N2-N3"), LinkHealth::Cut, t(1.0), "test");
    assert!(matches!(
        find_path(&topo, &keys, &health, &n("N0"), &n("N4"), 1, &none),
        Err(RelayError::NoPath { .. })
    ));
    // not enough key is as good as no link
    let fresh = LinkHealthView::default();
    assert!(matches!(
        find_path(&topo, &keys, &fresh, &n("N0"), &n("N4"), 1001, &none),
        Err(RelayError::NoPath { .. })
    ));
}

#[test]
fn untrusted_nodes_never_relay() {
    let src = r#"
schema_version = 1
[[node]]
id = "A"
role = "tx"
[[node]]
id = "E"
role = "rx"
trusted = false
[[node]]
id = "Z"
role = "tx"
[[node]]
id = "B"
role = "rx"
[[link]]
tx = "A"
rx = "E"
length_km = 1.0
[[link]]
tx = "Z"
rx = "E"
length_km = 1.0
[[link]]
tx = "A"
rx = "B"
length_km = 1.0
[[link]]
tx = "Z"
rx = "B"
length_km = 1.0
"#;
    let topo = load_topology(src).unwrap();
    let mut keys = keyed(&topo, 100, 1);
    keys.deposit_pair(
        &n("A"),
        &n("E"),
        Pool::Key,
        "more",
        random_bits(5000, 9),
        Origin::DirectQkd,
        SimTime::ZERO,
    )
    .unwrap();
    let health = LinkHealthView::default();
    let p = find_path(&topo, &keys, &health, &n("A"), &n("Z"), 50, &BTreeSet::new()).unwrap();
    assert_eq!(p, [n("A"), n("B"), n("Z")]);
    // an untrusted endpoint is fine
    assert!(find_path(&topo, &keys, &health, &n("A"), &n("E"), 50, &BTreeSet::new()).is_ok());
}

#[test]
fn diamond_cut_mid_session_reroutes_with_fresh_secret() {
    let topo = preset("diamond").unwrap();
    let mut keys = keyed(&topo, 4096, 21);
    let mut health = LinkHealthView::new(HealthConfig::default());
    let mut s = RelaySession::new(5, n("S"), n("D"), 1024, 99);
    s.plan(&topo, &mut keys, &health, &BTreeSet::new(), t(0.0)).unwrap();
    assert_eq!(s.path, [n("S"), n("R1"), n("D")]);
    let first = s.secret().to_vec();
    assert!(matches!(
        s.step(&mut keys, t(1.0), &mut |_| {}).unwrap(),
        HopOutcome::Forwarded { .. }
    ));
    assert_eq!(keys.holders(&first), [n("R1"), n("S")]);

    let cut = LinkId::from("S-R1");
    health.force(&cut, LinkHealth::Cut, t(2.0), "fiber cut");
    s.reroute(&topo, &mut keys, &health, &BTreeSet::from([cut]), t(2.0)).unwrap();
    assert_eq!(s.path, [n("S"), n("R2"), n("D")]);
    assert_ne!(s.secret(), first.as_slice());
    assert!(keys.holders(&first).is_empty(), "abandoned R must be erased");
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    assert_eq!(s.attempts, 2);
    assert_eq!(s.written_off().count(), 1);
    let offs: Vec<_> = keys
        .audit
        .iter()
        .filter(|r| matches!(r, AuditRecord::WriteOff { .. }))
        .collect();
    assert_eq!(offs.len(), 2, "one write-off per side of the spent hop");
    assert_eq!(delivered_bits(&keys, &n("D"), &n("S"), "relay/5"), s.secret());
    check_audit(&keys);
}

#[test]
fn all_paths_cut_fails() {
    let topo = preset("diamond").unwrap();
    let mut keys = keyed(&topo, 4096, 2);
    let mut health = LinkHealthView::default();
    let mut s = RelaySession::new(6, n("S"), n("D"), 64, 1);
    s.plan(&topo, &mut keys, &health, &BTreeSet::new(), t(0.0)).unwrap();
    for l in ["S-R1", "S-R2"] {
        health.force(&LinkId::from(l), LinkHealth::Cut, t(1.0), "cut");
    }
    assert!(matches!(
        s.reroute(&topo, &mut keys, &health, &BTreeSet::new(), t(1.0)),
        Err(RelayError::NoPath { .. })
    ));
    assert_eq!(s.status, SessionStatus::Failed);
    assert!(s.cause.as_deref().unwrap().contains("no alternate path"));
}

#[test]
fn key_short_alternate_waits_instead_of_failing() {
    let topo = preset("diamond").unwrap();
    let mut keys = keyed(&topo, 100, 2);
    keys.deposit_pair(
        &n("S"),
        &n("R1"),
        Pool::Key,
        "x",
        random_bits(1000, 1),
        Origin::DirectQkd,
        SimTime::ZERO,
    )
    .unwrap();
    keys.deposit_pair(
        &n("R1"),
        &n("D"),
        Pool::Key,
        "x",
        random_bits(1000, 2),
        Origin::DirectQkd,
        SimTime::ZERO,
    )
    .unwrap();
    let mut health = LinkHealthView::default();
    let mut s = RelaySession::new(8, n("S"), n("D"), 500, 1);
    s.plan(&topo, &mut keys, &health, &BTreeSet::new(), t(0.0)).unwrap();
    assert_eq!(s.path[1], n("R1"));
    let cut = LinkId::from("R1-D");
    health.force(&cut, LinkHealth::Cut, t(1.0), "cut");
    assert!(s
        .reroute(&topo, &mut keys, &health, &BTreeSet::from([cut.clone()]), t(1.0))
        .is_err());
    assert_eq!(s.status, SessionStatus::PathPending);
    for (a, b) in [("S", "R2"), ("R2", "D")] {
        keys.deposit_pair(&n(a), &n(b), Pool::Key, "y", random_bits(1000, 3), Origin::DirectQkd, t(2.0))
            .unwrap();
    }
    s.plan(&topo, &mut keys, &health, &BTreeSet::from([cut]), t(2.0)).unwrap();
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
    check_audit(&keys);
}

#[test]
fn tampered_ciphertext_fails_authentication() {
    let topo = line(2);
    let mut keys = keyed(&topo, 1000, 13);
    let mut health = LinkHealthView::new(HealthConfig::default());
    let mut s = RelaySession::new(3, n("N0"), n("N2"), 128, 1);
    s.plan(&topo, &mut keys, &health, &BTreeSet::new(), t(0.0)).unwrap();
    let mut flip = |r: &mut qkdnet::qkdproto::wire::Record| {
        if let Message::RelayCiphertext { ciphertext, .. } = &mut r.message {
            ciphertext[7] ^= 1;
        }
    };
    let out = s.step(&mut keys, t(1.0), &mut flip).unwrap();
    let HopOutcome::AuthFailed { link } = out else {
        panic!("{out:?}")
    };
    assert_eq!(s.status, SessionStatus::Failed);
    health.observe(&link, Telemetry::AuthFailure { at: t(1.0) });
    assert_eq!(health.health(&link), LinkHealth::Degraded);
    assert!(keys.holders(s.secret()).is_empty() || s.secret().is_empty());
    check_audit(&keys);
}

#[test]
fn starved_hop_consumes_nothing() {
    let topo = line(2);
    let mut keys = keyed(&topo, 300, 3);
    keys.consume_pair(&n("N1"), &n("N2"), Pool::Key, 250, Purpose::Delivery, SimTime::ZERO, "drain")
        .unwrap();
    let mut s = RelaySession::new(4, n("N0"), n("N2"), 40, 1);
    // plan with generous key then drain the second hop
    s.plan(&topo, &mut keys, &LinkHealthView::default(), &BTreeSet::new(), t(0.0))
        .unwrap();
    assert!(matches!(
        s.step(&mut keys, t(1.0), &mut |_| {}).unwrap(),
        HopOutcome::Forwarded { .. }
    ));
    keys.consume_pair(&n("N1"), &n("N2"), Pool::Key, 20, Purpose::Delivery, SimTime::ZERO, "drain")
        .unwrap();
    let audit_len = keys.audit.len();
    assert!(matches!(
        s.step(&mut keys, t(2.0), &mut |_| {}).unwrap(),
        HopOutcome::Starved { .. }
    ));
    assert_eq!(keys.audit.len(), audit_len);
    assert_eq!(s.status, SessionStatus::InFlight);
    keys.deposit_pair(
        &n("N1"),
        &n("N2"),
        Pool::Key,
        "late",
        random_bits(100, 4),
        Origin::DirectQkd,
        t(3.0),
    )
    .unwrap();
    assert_eq!(run(&mut s, &mut keys), HopOutcome::Delivered);
}

/// Independent reachability oracle: plain BFS over surviving adjacencies.
fn reachable(topo: &Topology, cut: &LinkId, src: &NodeId, dst: &NodeId) -> bool {
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for a in topo.adjacencies().into_iter().filter(|a| &a.id != cut) {
        adj.entry(a.a.clone()).or_default().push(a.b.clone());
        adj.entry(a.b).or_default().push(a.a);
    }
    let mut seen = BTreeSet::from([src.clone()]);
    let mut q = VecDeque::from([src.clone()]);
    while let Some(u) = q.pop_front() {
        if &u == dst {
            return true;
        }
        for v in adj.get(&u).into_iter().flatten() {
            if seen.insert(v.clone()) {
                q.push_back(v.clone());
            }
        }
    }
    false
}

#[test]
fn hundred_random_cuts() {
    // diamond plus a tail so that some cuts disconnect
    let src = format!(
        "{}\n[[node]]\nid = \"T\"\nrole = \"relay\"\n[[link]]\ntx = \"T\"\nrx = \"D\"\nlength_km = 5.0\n",
        include_str!("../src/netgraph/presets/diamond.toml")
    );
    let topo = load_topology(&src).unwrap();
    let nodes: Vec<NodeId> = topo.nodes.keys().cloned().collect();
    let links: Vec<LinkId> = topo.links.keys().cloned().collect();
    let mut keys = keyed(&topo, 200_000, 42);
    let mut g = rng::rng(1234);
    let (mut expected, mut delivered) = (0, 0);
    for id in 0..100u64 {
        let a = nodes[g.random_range(0..nodes.len())].clone();
        let mut b = a.clone();
        while b == a {
            b = nodes[g.random_range(0..nodes.len())].clone();
        }
        let cut = links[g.random_range(0..links.len())].clone();
        let mut health = LinkHealthView::default();
        let mut s = RelaySession::new(id, a.clone(), b.clone(), 256, id);
        s.plan(&topo, &mut keys, &health, &BTreeSet::new(), t(id as f64)).unwrap();
        // advance a random number of hops before the cut lands
        let hops = g.random_range(0..s.path.len() - 1);
        for _ in 0..hops {
            s.step(&mut keys, t(id as f64), &mut |_| {}).unwrap();
        }
        health.force(&cut, LinkHealth::Cut, t(id as f64), "cut");
        let survives = reachable(&topo, &cut, &a, &b);
        expected += survives as u32;
        if s.links.contains(&cut) {
            let _ = s.reroute(&topo, &mut keys, &health, &BTreeSet::from([cut.clone()]), t(id as f64));
        }
        if s.status == SessionStatus::InFlight && run(&mut s, &mut keys) == HopOutcome::Delivered {
            delivered += 1;
            assert!(survives);
            assert_eq!(delivered_bits(&keys, &b, &a, &s.segment_id()), s.secret());
            assert!(!s.links.contains(&cut));
        }
    }
    assert_eq!(delivered, expected);
    assert!(expected > 80);
    check_audit(&keys);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delivered_secret_matches_and_stays_on_path(hops in 1usize..6, r_len in 1u64..700, seed in any::<u64>()) {
        let topo = line(hops);
        let mut keys = keyed(&topo, 800, seed);
        let dst = n(&format!("N{hops}"));
        let mut s = RelaySession::new(seed, n("N0"), dst.clone(), r_len, seed);
        s.plan(&topo, &mut keys, &LinkHealthView::default(), &BTreeSet::new(), t(0.0)).unwrap();
        let r = s.secret().to_vec();
        let on_path: BTreeSet<NodeId> = s.path.iter().cloned().collect();
        loop {
            // exposure: only path nodes ever hold R
            let holders: BTreeSet<NodeId> = keys.holders(&r).into_iter().collect();
            prop_assert!(holders.is_subset(&on_path));
            match s.step(&mut keys, t(1.0), &mut |_| {}).unwrap() {
                HopOutcome::Forwarded { .. } => {}
                HopOutcome::Delivered => break,
                other => prop_assert!(false, "{:?}", other),
            }
        }
        prop_assert_eq!(delivered_bits(&keys, &dst, &n("N0"), &s.segment_id()), r.clone());
        prop_assert_eq!(keys.holders(&r), vec![n("N0"), dst]);
        for h in &s.hop_transcripts {
            let pad = keys.pair(&h.from, &h.to).unwrap().key.stream_bits(h.key_offsets.clone()).unwrap();
            prop_assert_eq!(bits::xor(&h.ciphertext, &pad), r.clone());
        }
    }
}
