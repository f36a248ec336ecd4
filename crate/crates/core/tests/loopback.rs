use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rapid_core::engine::EngineOptions;
use rapid_core::transport::{NodeHandle, TransportOptions};
use rapid_core::{Configuration, Endpoint, Member, NodeId, ProtocolParams, ViewChangeEvent};

const WAIT: Duration = Duration::from_secs(30);

fn free_endpoint() -> Endpoint {
    // Grab a port the OS considers free for TCP; UDP on the same number is
    // almost always free too on loopback.
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = l.local_addr().unwrap().port();
    drop(l);
    Endpoint::new("127.0.0.1", port).unwrap()
}

fn topts() -> TransportOptions {
    TransportOptions {
        tick: Duration::from_millis(20),
        ..Default::default()
    }
}

fn params() -> ProtocolParams {
    ProtocolParams {
        fast_round_timeout: 10,
        ..ProtocolParams::with_watermarks(4, 3, 1)
    }
}

type Log = Arc<Mutex<Vec<ViewChangeEvent>>>;

fn recorder() -> (Log, rapid_core::transport::ViewCallback) {
    let log: Log = Arc::default();
    let l = log.clone();
    (
        log,
        Box::new(move |ev: &ViewChangeEvent| l.lock().unwrap().push(ev.clone())),
    )
}

#[test]
fn loopback_cluster_joins_leaves_and_detects_a_crash() {
    let seed = Member::new(NodeId(1), free_endpoint()).with_metadata("role", "seed");
    let cfg = Arc::new(Configuration::bootstrap(vec![seed.clone()], params()).unwrap());
    let (seed_log, cb) = recorder();
    let a = NodeHandle::bootstrap(seed.clone(), cfg, EngineOptions::default(), topts(), Some(cb)).unwrap();

    let mut nodes = vec![a];
    let mut logs = vec![seed_log];
    for i in 2..=5u128 {
        let me = Member::new(NodeId(i), free_endpoint()).with_metadata("zone", format!("z{i}"));
        let opts = EngineOptions {
            seed: i as u64,
            ..Default::default()
        };
        let (log, cb) = recorder();
        nodes.push(NodeHandle::join(me, seed.endpoint.clone(), opts, topts(), Some(cb)).unwrap());
        logs.push(log);
    }

    for n in &nodes {
        let v = n.wait_for(WAIT, |c| c.len() == 5);
        assert!(
            v.is_some(),
            "node {:?} never saw all five: {:?}",
            n.id(),
            n.view().map(|c| c.len())
        );
    }
    let five = nodes[0].view().unwrap();
    for n in &nodes {
        assert_eq!(n.view().unwrap().id, five.id);
    }
    assert_eq!(nodes[3].metadata(NodeId(2)).unwrap()["zone"], "z2");
    assert_eq!(nodes[1].metadata(NodeId(1)).unwrap()["role"], "seed");

    // Voluntary departure.
    let leaver = nodes.pop().unwrap();
    logs.pop();
    leaver.leave();
    for n in &nodes {
        let ok = n.wait_for(WAIT, |c| c.len() == 4).is_some();
        let sizes: Vec<_> = nodes
            .iter()
            .map(|x| (x.id(), x.view().map(|c| c.len()), x.has_departed()))
            .collect();
        assert!(
            ok,
            "leave never took effect: {sizes:?} leaver departed={}",
            leaver.has_departed()
        );
    }
    assert!(nodes[0].view().unwrap().member(leaver.id()).is_none());
    leaver.shutdown();

    // Crash: stop a node without telling anyone.
    let crashed = nodes.pop().unwrap();
    logs.pop();
    let crashed_id = crashed.id();
    crashed.shutdown();
    for n in &nodes {
        assert!(n.wait_for(WAIT, |c| c.len() == 3).is_some(), "crash never detected");
    }
    let last = nodes[0].view().unwrap();
    assert!(!last.contains(crashed_id));

    // Every survivor saw the same configuration sequence from the point it
    // joined, each configuration exactly once.
    std::thread::sleep(Duration::from_millis(200));
    let seqs: Vec<Vec<_>> = logs
        .iter()
        .map(|l| l.lock().unwrap().iter().map(|e| e.configuration.id).collect())
        .collect();
    for s in &seqs {
        let mut d = s.clone();
        d.dedup();
        assert_eq!(&d, s, "a configuration was delivered twice");
        assert_eq!(s.last(), Some(&last.id));
    }
    let longest = seqs.iter().max_by_key(|s| s.len()).unwrap();
    for s in &seqs {
        assert!(longest.ends_with(s), "{s:?} is not a suffix of {longest:?}");
    }
}
