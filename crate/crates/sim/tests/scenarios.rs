use std::collections::BTreeMap;

use rapid_core::model::ProtocolParams;
use rapid_core::ConfigurationId;
use rapid_sim::check::all_pass;
use rapid_sim::*;

fn small() -> ProtocolParams {
    ProtocolParams {
        fast_round_timeout: 10,
        ..ProtocolParams::with_watermarks(6, 5, 2)
    }
}

fn assert_checks(sc: &Scenario) -> RunReport {
    let r = run(sc).unwrap();
    let c = checks(sc, &r);
    assert!(all_pass(&c), "{}: {}\n{c:#?}", sc.name, r.headline());
    r
}

#[test]
fn crash_removes_exactly_the_failed_members() {
    let sc = Scenario::crash(40, 4, small(), 3);
    let r = assert_checks(&sc);
    assert_eq!(r.unique_sizes, vec![36, 40]);
    assert_eq!(r.decisions(), 1);
    for n in r.correct_nodes() {
        assert_eq!(n.sizes, vec![40, 36]);
    }
}

#[test]
fn flip_flop_and_egress_loss_are_removed_once() {
    // With L = 2, two lossy observers sharing a subject are enough to push it
    // into the unstable region, and reinforcement then removes it. L = 3 keeps
    // two lossy nodes from ever doing that.
    let p = ProtocolParams {
        fast_round_timeout: 10,
        ..ProtocolParams::with_watermarks(10, 9, 3)
    };
    for sc in [
        Scenario::flip_flop(60, 0.03, p, 5),
        Scenario::egress_loss(60, 0.03, 0.8, p, 5),
    ] {
        let r = assert_checks(&sc);
        assert_eq!(r.converged_size(), Some(58));
    }
}

#[test]
fn minority_partition_is_removed_and_majority_stays() {
    let sc = Scenario::partition(30, 4, 150, small(), 7);
    let r = assert_checks(&sc);
    assert_eq!(r.converged_size(), Some(26));
}

#[test]
fn bootstrap_admits_everyone_in_few_steps() {
    let sc = Scenario::bootstrap(60, small(), 9);
    let r = assert_checks(&sc);
    assert_eq!(r.converged_size(), Some(60));
    assert!(r.unique_sizes.len() <= 10, "{:?}", r.unique_sizes);
}

#[test]
fn leave_then_crash() {
    let mut sc = Scenario::bootstrap(5, ProtocolParams::with_watermarks(4, 3, 1), 1);
    sc.params.fast_round_timeout = 10;
    sc.events.push(Event::Leave { tick: 150, node: 4 });
    sc.events.push(Event::Crash {
        tick: 250,
        nodes: vec![3],
    });
    sc.duration = 450;
    let r = assert_checks(&sc);
    assert_eq!(r.converged_size(), Some(3));
    assert!(r.nodes[4].departed_at.is_some_and(|t| t >= 150));
    // The departure is its own view change, before the crash.
    let sizes: Vec<usize> = r.transitions.iter().map(|t| t.size).collect();
    assert!(sizes.ends_with(&[4, 3]), "{sizes:?}");
}

#[test]
fn centralized_members_follow_the_ensemble() {
    let sc = Scenario::centralized(30, 3, 2, small(), 11);
    let r = assert_checks(&sc);
    assert_eq!(r.converged_size(), Some(28));
    // Members learn a decision by polling the ensemble every sync interval.
    let bound = rapid_core::engine::EngineOptions::default().sync_interval + 2 * sc.link.delay_max;
    let decided = r.transitions.last().unwrap().tick;
    let last_install = r
        .timeseries
        .iter()
        .filter(|(_, node, size)| *node < 30 && *size == 28)
        .map(|(t, _, _)| *t)
        .max()
        .unwrap();
    assert!(
        last_install - decided <= bound,
        "decided at {decided}, last member at {last_install}"
    );
}

#[test]
fn isolated_aux_never_decides() {
    // Three aux nodes split 2/1: the pair keeps deciding, the single one
    // cannot reach a majority of the ensemble.
    let mut sc = Scenario::centralized(20, 3, 2, small(), 13);
    let lone = sc.n + 2;
    sc.events.push(Event::Partition {
        tick: 1,
        until: None,
        groups: vec![vec![lone]],
    });
    let r = run(&sc).unwrap();
    assert_eq!(r.nodes[lone].role, Role::Aux);
    assert_eq!(
        r.nodes[lone].configs.len(),
        1,
        "lone aux moved: {:?}",
        r.nodes[lone].sizes
    );
    // The isolated aux still holds the first view; members all moved on.
    for n in r.correct_nodes().filter(|n| n.role == Role::Member) {
        assert_eq!(n.sizes.last(), Some(&18), "member {}: {:?}", n.node, n.sizes);
    }
}

#[test]
fn joiners_retry_when_the_cluster_is_busy() {
    let sc = Scenario::bootstrap(60, small(), 9);
    let mut sim = Simulation::new(sc.clone()).unwrap();
    while sim.now() < sc.duration {
        sim.tick().unwrap();
    }
    let retries: u64 = (0..60)
        .filter_map(|i| sim.runtime(i))
        .map(|rt| rt.counters().join_retries)
        .sum();
    assert!(retries > 0);
}

#[test]
fn runs_are_byte_identical_for_a_seed() {
    let sc = Scenario::adversarial(42);
    let a = run(&sc).unwrap();
    let b = run(&Scenario::from_json(&sc.to_json()).unwrap()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let other = run(&Scenario::adversarial(43)).unwrap();
    assert_ne!(a.to_bytes(), other.to_bytes());
}

#[test]
fn scenarios_survive_the_wire_encoding() {
    for sc in [
        Scenario::crash(20, 2, small(), 1),
        Scenario::bootstrap(15, small(), 2),
        Scenario::centralized(15, 3, 1, small(), 3),
        Scenario::adversarial(4),
    ] {
        let plain = run(&sc).unwrap();
        let wired = Simulation::new(sc.clone()).unwrap().with_wire_check().run().unwrap();
        assert_eq!(plain.to_bytes(), wired.to_bytes(), "{}", sc.name);
    }
}

#[test]
fn adversarial_runs_keep_configuration_sequences_consistent() {
    // Offline check: each configuration has one successor across all nodes.
    for seed in 0..60 {
        let r = run(&Scenario::adversarial(seed)).unwrap();
        let mut next: BTreeMap<ConfigurationId, ConfigurationId> = BTreeMap::new();
        for n in &r.nodes {
            for w in n.configs.windows(2) {
                let prev = next.insert(w[0], w[1]);
                assert!(prev.is_none_or(|p| p == w[1]), "seed {seed}: fork after {:?}", w[0]);
            }
        }
    }
}
