//! End-to-end runs of the bundled fixtures.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use edgeclock::checker::{build_causal_order, check_liveness, check_safety, classify_stalls};
use edgeclock::sim::{run, run_baseline, EventBody, Scenario, Trace};

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    Scenario::parse(&text).unwrap_or_else(|e| panic!("parse {name}: {e}"))
}

fn count_blocked(trace: &Trace) -> usize {
    trace
        .events
        .iter()
        .filter(|e| matches!(e.body, EventBody::QueryBlocked { .. }))
        .count()
}

fn assert_clean(trace: &Trace, sc: &Scenario) {
    assert!(trace.quiescent, "run must reach quiescence");
    let order = build_causal_order(trace).expect("well-formed trace");
    let safety = check_safety(trace, &order, &sc.topology.assign);
    assert!(safety.is_empty(), "safety violations: {safety:?}");
    let liveness = check_liveness(trace, &sc.topology.assign);
    assert!(liveness.is_empty(), "liveness violations: {liveness:?}");
}

#[test]
fn fig3_edge_run_never_stalls() {
    let sc = fixture("fig3.toml");
    let (trace, metrics) = run(&sc, 0);
    assert_eq!(count_blocked(&trace), 0);
    assert_eq!(metrics.stall_count, 0);
    assert_clean(&trace, &sc);
}

#[test]
fn fig3_baseline_stalls_once_falsely() {
    let sc = fixture("fig3.toml");
    let (trace, metrics) = run_baseline(&sc, 0);
    assert_eq!(count_blocked(&trace), 1);
    assert!(metrics.total_stall_duration > 0);
    assert_clean(&trace, &sc);
    let order = build_causal_order(&trace).unwrap();
    let (true_stalls, false_stalls) = classify_stalls(&trace, &order, &sc.topology.assign);
    assert_eq!((true_stalls, false_stalls), (0, 1));
}

#[test]
fn fig6_edge_run_blocks_exactly_once_truthfully() {
    let sc = fixture("fig6.toml");
    let (trace, _) = run(&sc, 0);
    assert_eq!(count_blocked(&trace), 1);
    let unblocked = trace
        .events
        .iter()
        .filter(|e| matches!(e.body, EventBody::QueryUnblocked { .. }))
        .count();
    assert_eq!(unblocked, 1);
    assert_clean(&trace, &sc);
    let order = build_causal_order(&trace).unwrap();
    let (true_stalls, false_stalls) = classify_stalls(&trace, &order, &sc.topology.assign);
    assert_eq!((true_stalls, false_stalls), (1, 0));
    // the blocked query ends up reading the chained value of x1
    let final_read = trace.events.iter().rev().find_map(|e| match &e.body {
        EventBody::QueryReply {
            op_index: 5, value, ..
        } => Some(value.clone()),
        _ => None,
    });
    assert_eq!(final_read, Some(Some("1".to_owned())));
}

#[test]
fn fig4_and_fig2_runs_are_clean() {
    for name in ["fig4.toml", "fig2_all.toml", "reduce_xy.toml"] {
        let sc = fixture(name);
        let (trace, _) = run(&sc, 7);
        assert_clean(&trace, &sc);
        assert_eq!(count_blocked(&trace), 0, "{name}");
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let sc = fixture("fig4.toml");
    let (a, _) = run(&sc, 42);
    let (b, _) = run(&sc, 42);
    assert_eq!(a.render(), b.render());
    let (c, _) = run(&sc, 43);
    assert_ne!(a.render(), c.render(), "different seed, different schedule");
}

#[test]
fn nonfifo_fixture_has_a_reordering_seed() {
    let sc = fixture("nonfifo.toml");
    let mut witness = None;
    for seed in 0..1000 {
        let (trace, _) = run(&sc, seed);
        // compare gossip send order to receive order on the r1->r2 channel
        let sent: Vec<u64> = trace
            .events
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::GossipSend { from, to, msg_id, .. }
                    if from.as_str() == "r1" && to.as_str() == "r2" =>
                {
                    Some(*msg_id)
                }
                _ => None,
            })
            .collect();
        let received: Vec<u64> = trace
            .events
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::GossipRecv { from, to, msg_id, .. }
                    if from.as_str() == "r1" && to.as_str() == "r2" =>
                {
                    Some(*msg_id)
                }
                _ => None,
            })
            .collect();
        let sent_set: BTreeSet<u64> = sent.iter().copied().collect();
        let recv_set: BTreeSet<u64> = received.iter().copied().collect();
        assert_eq!(sent_set, recv_set, "reliable delivery, seed {seed}");
        if sent.len() >= 2 && sent != received {
            witness = Some(seed);
            break;
        }
    }
    let seed = witness.expect("some seed in 0..1000 inverts delivery order");
    // pin the found seed so the reordering case stays covered
    let (trace, _) = run(&sc, seed);
    let sc2 = fixture("nonfifo.toml");
    assert_clean(&trace, &sc2);
}

#[test]
fn trace_files_roundtrip_through_the_parser() {
    let sc = fixture("fig6.toml");
    let (trace, _) = run(&sc, 0);
    let text = trace.render();
    let back = Trace::parse(&text).unwrap();
    assert_eq!(back, trace);
}
