use proptest::prelude::*;
use qkdnet::ids::{LinkId, NodeId, SwitchId};
use qkdnet::netgraph::{link_budget, load_topology, preset, to_toml, BudgetPath, ConfigError, Role, Route};
use qkdnet::qkdproto::EstimatorKind;
use qkdnet::switchfab::{SwitchPosition, SwitchSchedule};

const METRO: &str = r#"
schema_version = 1

[[node]]
id = "Harvard"
role = "tx"

[[node]]
id = "BBN"
role = "relay"

[[node]]
id = "BU"
role = "rx"

[[node]]
id = "BBN2"
role = "tx"

[[node]]
id = "BBN3"
role = "rx"

[[switch]]
id = "sw"

[[switch.port]]
node = "Harvard"
side = "tx"
length_km = 10.0

[[switch.port]]
node = "BBN2"
side = "tx"
length_km = 0.0

[[switch.port]]
node = "BU"
side = "rx"
length_km = 19.0

[[switch.port]]
node = "BBN3"
side = "rx"
length_km = 0.0

[[link]]
tx = "Harvard"
rx = "BBN"
length_km = 10.0

[[link]]
tx = "BBN"
rx = "BU"
length_km = 19.0
loss_db = 11.5

[[link]]
tx = "Harvard"
rx = "BU"
via = "sw"
"#;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

#[test]
fn budget_examples() {
    let t = load_topology(METRO).unwrap();
    let b = |id: &str| link_budget(&t, &BudgetPath::Link(LinkId::from(id))).unwrap();
    assert!(close(b("Harvard-BBN"), 10.0 * 0.2));
    assert!(close(b("Harvard-BU"), (10.0 + 19.0) * 0.2 + 0.8));
    assert!(close(b("BBN-BU"), 11.5));
    // the resolved link parameters agree with the calculator
    let l = t.link(&LinkId::from("Harvard-BU")).unwrap();
    assert!(close(l.params.total_loss_db(), 6.6));
    assert!(matches!(
        link_budget(&t, &BudgetPath::Link(LinkId::from("nope"))),
        Err(ConfigError::NoPath(_))
    ));
    let pair = BudgetPath::Switched {
        switch: SwitchId::from("sw"),
        tx: NodeId::from("BBN2"),
        rx: NodeId::from("BU"),
    };
    assert!(close(link_budget(&t, &pair).unwrap(), 19.0 * 0.2 + 0.8));
}

#[test]
fn cambridge_shape() {
    let t = preset("cambridge").unwrap();
    let names: Vec<&str> = t.nodes.keys().map(|n| n.as_str()).collect();
    assert_eq!(names, ["Ali", "Alice", "Anna", "Baba", "Bob", "Boris"]);
    assert_eq!(t.switches.len(), 1);
    let sw = t.switches.values().next().unwrap();
    assert_eq!(sw.initial, SwitchPosition::Cross);
    assert_eq!(sw.schedule, SwitchSchedule::Periodic { period_s: 900.0 });
    let port = |n: &str| sw.port(&NodeId::from(n)).unwrap().clone();
    assert_eq!(port("Anna").length_km, 10.0);
    assert_eq!(port("Boris").length_km, 19.0);
    assert_eq!(port("Boris").loss_db, Some(11.5));
    // Ali reaches Alice only through prepositioned key
    assert!(t.link_between(&NodeId::from("Ali"), &NodeId::from("Alice")).is_none());
    assert_eq!(t.bridges.len(), 1);
    let boris = t.link(&LinkId::from("Anna-Boris")).unwrap();
    assert_eq!(boris.params.mean_photon_number, 1.0);
    assert_eq!(boris.estimator.kind, EstimatorKind::MultiphotonAware);
    assert!(matches!(boris.route, Route::Switched { .. }));
    let bob = t.link(&LinkId::from("Anna-Bob")).unwrap();
    assert_eq!(bob.params.mean_photon_number, 0.5);
    assert!(close(bob.params.total_loss_db(), 2.0 + 0.001 + 0.8));
}

#[test]
fn validation_errors() {
    let relay_untrusted = "schema_version = 1\n[[node]]\nid = \"R\"\nrole = \"relay\"\ntrusted = false\n";
    assert!(matches!(load_topology(relay_untrusted), Err(ConfigError::Invalid(m)) if m.contains("trusted")));
    let rx_to_rx = "schema_version = 1\n[[node]]\nid = \"A\"\nrole = \"rx\"\n[[node]]\nid = \"B\"\nrole = \"rx\"\n\
                    [[link]]\ntx = \"A\"\nrx = \"B\"\nlength_km = 1.0\n";
    assert!(matches!(load_topology(rx_to_rx), Err(ConfigError::Invalid(m)) if m.contains("cannot transmit")));
    let bad_mu = "schema_version = 1\n[[node]]\nid = \"A\"\nrole = \"tx\"\n[[node]]\nid = \"B\"\nrole = \"rx\"\n\
                  [[link]]\ntx = \"A\"\nrx = \"B\"\nlength_km = 1.0\nparams = { mean_photon_number = -1.0 }\n";
    assert!(matches!(load_topology(bad_mu), Err(ConfigError::Invalid(m)) if m.contains("mean_photon_number")));
    let not_toml = "schema_version = \n";
    assert!(matches!(load_topology(not_toml), Err(ConfigError::Parse(_))));
}

fn config_strategy() -> impl Strategy<Value = String> {
    (
        2usize..7,
        prop::collection::vec(
            (
                0.0f64..200.0,
                prop::option::of(0.0f64..40.0),
                0.01f64..2.0,
                any::<bool>(),
                any::<bool>(),
            ),
            1..8,
        ),
        prop::option::of(0.1f64..0.4),
    )
        .prop_map(|(n, links, coeff)| {
            let mut s = String::from("schema_version = 1\nname = \"gen\"\n");
            if let Some(c) = coeff {
                s += &format!("[defaults]\nfiber_loss_db_per_km = {c:?}\n");
            }
            for i in 0..n {
                let role = ["tx", "rx", "relay"][i % 3];
                s += &format!("[[node]]\nid = \"n{i}\"\nrole = \"{role}\"\n");
            }
            let mut used = std::collections::BTreeSet::new();
            for (k, (len, loss, mu, sarg, aware)) in links.into_iter().enumerate() {
                // pick a tx-capable and rx-capable endpoint pair deterministically
                let tx = (0..n).filter(|i| i % 3 != 1).nth(k % n.div_ceil(3).max(1)).unwrap_or(0);
                let rx = (0..n).filter(|i| i % 3 != 0 && *i != tx).nth(k % 2);
                let Some(rx) = rx else { continue };
                if !used.insert((tx.min(rx), tx.max(rx))) {
                    continue;
                }
                s += &format!("[[link]]\ntx = \"n{tx}\"\nrx = \"n{rx}\"\nlength_km = {len:?}\n");
                if let Some(l) = loss {
                    s += &format!("loss_db = {l:?}\n");
                }
                if sarg {
                    s += "sifting = \"sarg\"\n";
                }
                if aware {
                    s += "estimator = \"multiphoton_aware\"\n";
                }
                s += &format!("params = {{ mean_photon_number = {mu:?} }}\n");
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn canonical_form_is_a_fixed_point(src in config_strategy()) {
        let t = load_topology(&src).unwrap();
        let canon = to_toml(&t);
        let again = load_topology(&canon).unwrap();
        prop_assert_eq!(&t, &again);
        prop_assert_eq!(canon, to_toml(&again));
    }

    #[test]
    fn chained_budget_is_additive(picks in prop::collection::vec(0usize..3, 1..6)) {
        let t = load_topology(METRO).unwrap();
        let ids = ["Harvard-BBN", "BBN-BU", "Harvard-BU"];
        let parts: Vec<BudgetPath> = picks.iter().map(|&i| BudgetPath::Link(LinkId::from(ids[i]))).collect();
        let sum: f64 = parts.iter().map(|p| link_budget(&t, p).unwrap()).sum();
        prop_assert!(close(link_budget(&t, &BudgetPath::Chain(parts)).unwrap(), sum));
    }

    #[test]
    fn roles_are_respected(src in config_strategy()) {
        let t = load_topology(&src).unwrap();
        for l in t.links.values() {
            prop_assert!(t.nodes[&l.tx].role.can_transmit());
            prop_assert!(t.nodes[&l.rx].role.can_receive());
            prop_assert!(t.nodes.values().all(|n| n.role != Role::Relay || n.trusted));
        }
    }
}
