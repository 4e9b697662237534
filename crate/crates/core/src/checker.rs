//! Post-hoc causal-consistency oracle.
//!
//! Rebuilds the happened-before relation of a trace from program order and
//! read-from edges (replies are tagged with the record they read, so values
//! never need to be unique), materializes its transitive closure, and checks:
//!
//! * **safety** — a write is applied at a replica only after every write in
//!   its causal past on locally stored variables; a query reply returns the
//!   latest locally applied value and none of its causal past is missing;
//! * **liveness** — at quiescence every record reached every replica storing
//!   its variable, and every blocked query was answered;
//! * **stall classification** — a blocked query is a *true* stall when some
//!   write in its causal past on a target-local variable was genuinely
//!   unapplied at block time, and a *false* stall otherwise.
//!
//! The checker is independent of the protocol implementation: it sees only
//! the trace and the variable assignment.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::graph::{ClientId, ReplicaId, VarName, VariableAssignment};
use crate::protocol::{RecordKey, Value};
use crate::sim::{EventBody, OpKind, Trace};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckerError {
    #[error("reply at step {step} reads unknown record {origin}#{seq}")]
    UnknownRecord {
        step: u64,
        origin: ReplicaId,
        seq: u64,
    },
    #[error("trace references op {0} with no ClientSend")]
    UnknownOp(usize),
}

/// One client operation reconstructed from the trace.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OpNode {
    pub op_index: usize,
    pub client: ClientId,
    pub kind: OpKind,
    pub replica: ReplicaId,
    pub var: VarName,
    pub value: Option<Value>,
    pub send_step: u64,
    /// For updates: the record this op created.
    pub record: Option<RecordKey>,
    /// For queries: the record the reply read, if any.
    pub read: Option<RecordKey>,
    /// Step of the QueryReply / implicit update acknowledgement.
    pub reply_step: Option<u64>,
}

/// Happened-before over client operations: program order plus read-from,
/// transitively closed.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CausalOrder {
    /// Nodes indexed by op index.
    pub ops: BTreeMap<usize, OpNode>,
    /// `reach[&a]` holds every b with a -> b.
    reach: BTreeMap<usize, Vec<usize>>,
}

impl CausalOrder {
    /// Does `a -> b` hold (strictly)?
    pub fn happened_before(&self, a: usize, b: usize) -> bool {
        self.reach.get(&a).is_some_and(|r| r.binary_search(&b).is_ok())
    }

    /// Ops in the strict causal past of `b`.
    pub fn past_of(&self, b: usize) -> Vec<usize> {
        self.reach
            .iter()
            .filter(|(_, r)| r.binary_search(&b).is_ok())
            .map(|(a, _)| *a)
            .collect()
    }
}

/// Reconstructs the causal order of a trace.
pub fn build_causal_order(trace: &Trace) -> Result<CausalOrder, CheckerError> {
    let mut ops: BTreeMap<usize, OpNode> = BTreeMap::new();
    for ev in &trace.events {
        if let EventBody::ClientSend {
            client,
            op_index,
            kind,
            replica,
            var,
            value,
            ..
        } = &ev.body
        {
            ops.insert(
                *op_index,
                OpNode {
                    op_index: *op_index,
                    client: client.clone(),
                    kind: *kind,
                    replica: replica.clone(),
                    var: var.clone(),
                    value: value.clone(),
                    send_step: ev.step,
                    record: None,
                    read: None,
                    reply_step: None,
                },
            );
        }
    }
    let mut record_to_op: BTreeMap<RecordKey, usize> = BTreeMap::new();
    for ev in &trace.events {
        match &ev.body {
            EventBody::ReplicaRecvUpdate {
                op_index,
                origin,
                seq,
                ..
            } => {
                let op = ops
                    .get_mut(op_index)
                    .ok_or(CheckerError::UnknownOp(*op_index))?;
                op.record = Some((origin.clone(), *seq));
                record_to_op.insert((origin.clone(), *seq), *op_index);
            }
            EventBody::QueryReply {
                op_index, read, ..
            } => {
                let op = ops
                    .get_mut(op_index)
                    .ok_or(CheckerError::UnknownOp(*op_index))?;
                op.read = read.clone();
                op.reply_step = Some(ev.step);
            }
            _ => {}
        }
    }
    // read-from must point at a known record
    for op in ops.values() {
        if let Some(key) = &op.read {
            if !record_to_op.contains_key(key) {
                return Err(CheckerError::UnknownRecord {
                    step: op.reply_step.unwrap_or(0),
                    origin: key.0.clone(),
                    seq: key.1,
                });
            }
        }
    }

    // direct edges: per-client program order (by send step) and read-from
    let mut direct: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_client: BTreeMap<&ClientId, Vec<(u64, usize)>> = BTreeMap::new();
    for op in ops.values() {
        by_client
            .entry(&op.client)
            .or_default()
            .push((op.send_step, op.op_index));
    }
    for seq in by_client.values_mut() {
        seq.sort_unstable();
        for pair in seq.windows(2) {
            direct.entry(pair[0].1).or_default().push(pair[1].1);
        }
    }
    for op in ops.values() {
        if let Some(key) = &op.read {
            let writer = record_to_op[key];
            if writer != op.op_index {
                direct.entry(writer).or_default().push(op.op_index);
            }
        }
    }

    // closure by forward DFS from every node (desk-scale instances)
    let mut reach: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &start in ops.keys() {
        let mut seen: Vec<usize> = Vec::new();
        let mut stack: Vec<usize> = direct.get(&start).cloned().unwrap_or_default();
        while let Some(n) = stack.pop() {
            if seen.contains(&n) {
                continue;
            }
            seen.push(n);
            if let Some(next) = direct.get(&n) {
                stack.extend(next.iter().copied());
            }
        }
        seen.sort_unstable();
        reach.insert(start, seen);
    }
    Ok(CausalOrder { ops, reach })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ViolationKind {
    SafetyEarlyApply,
    SafetyStaleRead,
    LivenessUnapplied,
    LivenessBlockedForever,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::SafetyEarlyApply => "SafetyEarlyApply",
            ViolationKind::SafetyStaleRead => "SafetyStaleRead",
            ViolationKind::LivenessUnapplied => "LivenessUnapplied",
            ViolationKind::LivenessBlockedForever => "LivenessBlockedForever",
        };
        f.write_str(s)
    }
}

/// A concrete consistency violation, citing the offending trace step and the
/// missing dependency as a witness.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Violation {
    pub kind: ViolationKind,
    pub step: u64,
    pub replica: ReplicaId,
    pub witness: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "violation kind={} step={} replica={} witness={}",
            self.kind, self.step, self.replica, self.witness
        )
    }
}

/// Application history of a trace: when each record landed at each replica,
/// and the per-variable apply timeline per replica.
struct ApplyIndex {
    applied_at: BTreeMap<(ReplicaId, RecordKey), u64>,
    timeline: BTreeMap<(ReplicaId, VarName), Vec<(u64, RecordKey, Value)>>,
}

impl ApplyIndex {
    fn build(trace: &Trace) -> Self {
        let mut applied_at = BTreeMap::new();
        let mut timeline: BTreeMap<(ReplicaId, VarName), Vec<(u64, RecordKey, Value)>> =
            BTreeMap::new();
        for ev in &trace.events {
            if let EventBody::ApplyWrite {
                replica,
                origin,
                seq,
                var,
                value,
            } = &ev.body
            {
                let key = (origin.clone(), *seq);
                applied_at
                    .entry((replica.clone(), key.clone()))
                    .or_insert(ev.step);
                timeline
                    .entry((replica.clone(), var.clone()))
                    .or_default()
                    .push((ev.step, key, value.clone()));
            }
        }
        Self {
            applied_at,
            timeline,
        }
    }

    fn applied_before(&self, replica: &ReplicaId, key: &RecordKey, step: u64) -> bool {
        self.applied_at
            .get(&(replica.clone(), key.clone()))
            .is_some_and(|&s| s < step)
    }

    fn last_write_before(
        &self,
        replica: &ReplicaId,
        var: &VarName,
        step: u64,
    ) -> Option<&(u64, RecordKey, Value)> {
        self.timeline
            .get(&(replica.clone(), var.clone()))?
            .iter()
            .rev()
            .find(|(s, _, _)| *s < step)
    }
}

/// Causal safety: early applies and stale reads.
pub fn check_safety(
    trace: &Trace,
    order: &CausalOrder,
    assign: &VariableAssignment,
) -> Vec<Violation> {
    let index = ApplyIndex::build(trace);
    let mut violations = Vec::new();

    // writes in an op's causal past that the given replica stores
    let past_writes = |op_index: usize, replica: &ReplicaId| -> Vec<&OpNode> {
        order
            .past_of(op_index)
            .into_iter()
            .filter_map(|p| order.ops.get(&p))
            .filter(|w| w.kind == OpKind::Update && assign.stores_var(replica, &w.var))
            .collect()
    };

    for ev in &trace.events {
        match &ev.body {
            EventBody::ApplyWrite {
                replica,
                origin,
                seq,
                ..
            } => {
                let key = (origin.clone(), *seq);
                let Some(w_op) = order.ops.values().find(|o| o.record.as_ref() == Some(&key))
                else {
                    continue;
                };
                for w_prev in past_writes(w_op.op_index, replica) {
                    let prev_key = w_prev.record.clone().expect("updates carry records");
                    if !index.applied_before(replica, &prev_key, ev.step) {
                        violations.push(Violation {
                            kind: ViolationKind::SafetyEarlyApply,
                            step: ev.step,
                            replica: replica.clone(),
                            witness: format!(
                                "applying {}#{} before causal write {}#{} (op {})",
                                key.0, key.1, prev_key.0, prev_key.1, w_prev.op_index
                            ),
                        });
                    }
                }
            }
            EventBody::QueryReply {
                replica,
                op_index,
                var,
                value,
                read,
                ..
            } => {
                // the returned value must be the latest applied write of var
                let expect = index.last_write_before(replica, var, ev.step);
                let (expect_value, expect_read) = match expect {
                    Some((_, key, val)) => (Some(val.clone()), Some(key.clone())),
                    None => (None, None),
                };
                if *value != expect_value || *read != expect_read {
                    violations.push(Violation {
                        kind: ViolationKind::SafetyStaleRead,
                        step: ev.step,
                        replica: replica.clone(),
                        witness: format!(
                            "reply of op {op_index} returned {:?}, latest applied is {:?}",
                            read, expect_read
                        ),
                    });
                }
                // nothing in the query's causal past may be missing
                for w_prev in past_writes(*op_index, replica) {
                    let prev_key = w_prev.record.clone().expect("updates carry records");
                    if !index.applied_before(replica, &prev_key, ev.step) {
                        violations.push(Violation {
                            kind: ViolationKind::SafetyStaleRead,
                            step: ev.step,
                            replica: replica.clone(),
                            witness: format!(
                                "op {op_index} read before causal write {}#{} (op {}) applied",
                                prev_key.0, prev_key.1, w_prev.op_index
                            ),
                        });
                    }
                }
            }
            _ => {}
        }
    }
    violations
}

/// Liveness at quiescence: every record applied wherever its variable lives,
/// every block matched by an unblock.
pub fn check_liveness(trace: &Trace, assign: &VariableAssignment) -> Vec<Violation> {
    let index = ApplyIndex::build(trace);
    let mut violations = Vec::new();
    let mut op_var: BTreeMap<usize, VarName> = BTreeMap::new();
    for ev in &trace.events {
        if let EventBody::ClientSend { op_index, var, .. } = &ev.body {
            op_var.insert(*op_index, var.clone());
        }
    }
    for ev in &trace.events {
        if let EventBody::ReplicaRecvUpdate {
            op_index,
            origin,
            seq,
            ..
        } = &ev.body
        {
            let var = &op_var[op_index];
            let key = (origin.clone(), *seq);
            for holder in assign.holders_of(var) {
                if !index
                    .applied_at
                    .contains_key(&(holder.clone(), key.clone()))
                {
                    violations.push(Violation {
                        kind: ViolationKind::LivenessUnapplied,
                        step: ev.step,
                        replica: holder.clone(),
                        witness: format!("record {}#{} (var {var}) never applied", key.0, key.1),
                    });
                }
            }
        }
    }
    let mut blocked: BTreeMap<usize, (u64, ReplicaId)> = BTreeMap::new();
    for ev in &trace.events {
        match &ev.body {
            EventBody::QueryBlocked {
                op_index, replica, ..
            } => {
                blocked.insert(*op_index, (ev.step, replica.clone()));
            }
            EventBody::QueryUnblocked { op_index, .. } => {
                blocked.remove(op_index);
            }
            _ => {}
        }
    }
    for (op_index, (step, replica)) in blocked {
        violations.push(Violation {
            kind: ViolationKind::LivenessBlockedForever,
            step,
            replica,
            witness: format!("query op {op_index} never unblocked"),
        });
    }
    violations
}

/// Splits blocked queries into true stalls (a causal-past write on a
/// target-local variable was unapplied at block time) and false stalls
/// (nothing real was missing; the clocks were just too coarse).
pub fn classify_stalls(
    trace: &Trace,
    order: &CausalOrder,
    assign: &VariableAssignment,
) -> (u64, u64) {
    let index = ApplyIndex::build(trace);
    let mut true_stalls = 0;
    let mut false_stalls = 0;
    for ev in &trace.events {
        let EventBody::QueryBlocked {
            replica, op_index, ..
        } = &ev.body
        else {
            continue;
        };
        let genuine = order
            .past_of(*op_index)
            .into_iter()
            .filter_map(|p| order.ops.get(&p))
            .filter(|w| w.kind == OpKind::Update && assign.stores_var(replica, &w.var))
            .any(|w| {
                let key = w.record.clone().expect("updates carry records");
                !index.applied_before(replica, &key, ev.step)
            });
        if genuine {
            true_stalls += 1;
        } else {
            false_stalls += 1;
        }
    }
    (true_stalls, false_stalls)
}

/// Renders violations one per line; empty output means a clean run.
pub fn render_violations(violations: &[Violation]) -> String {
    let mut out = String::new();
    for v in violations {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Trace, TraceEvent};

    fn r(s: &str) -> ReplicaId {
        ReplicaId::new(s)
    }

    fn c(s: &str) -> ClientId {
        ClientId::new(s)
    }

    fn v(s: &str) -> VarName {
        VarName::new(s)
    }

    fn send(step: u64, client: &str, op: usize, kind: OpKind, replica: &str, var: &str) -> TraceEvent {
        TraceEvent {
            step,
            time: step,
            body: EventBody::ClientSend {
                client: c(client),
                op_index: op,
                kind,
                replica: r(replica),
                var: v(var),
                value: match kind {
                    OpKind::Update => Some(format!("v{op}")),
                    OpKind::Query => None,
                },
                dep: "{}".into(),
            },
        }
    }

    fn recv_update(step: u64, replica: &str, client: &str, op: usize, seq: u64) -> TraceEvent {
        TraceEvent {
            step,
            time: step,
            body: EventBody::ReplicaRecvUpdate {
                replica: r(replica),
                client: c(client),
                op_index: op,
                origin: r(replica),
                seq,
                ts: "{}".into(),
                applied: true,
            },
        }
    }

    fn apply(step: u64, replica: &str, origin: &str, seq: u64, var: &str, value: &str) -> TraceEvent {
        TraceEvent {
            step,
            time: step,
            body: EventBody::ApplyWrite {
                replica: r(replica),
                origin: r(origin),
                seq,
                var: v(var),
                value: value.into(),
            },
        }
    }

    fn reply(
        step: u64,
        replica: &str,
        client: &str,
        op: usize,
        var: &str,
        value: Option<&str>,
        read: Option<(&str, u64)>,
    ) -> TraceEvent {
        TraceEvent {
            step,
            time: step,
            body: EventBody::QueryReply {
                replica: r(replica),
                client: c(client),
                op_index: op,
                var: v(var),
                value: value.map(|s| s.to_owned()),
                read: read.map(|(o, s)| (r(o), s)),
                val: "{}".into(),
            },
        }
    }

    fn assign_two() -> VariableAssignment {
        VariableAssignment::new(vec![
            (r("r1"), vec![v("x")]),
            (r("r2"), vec![v("x"), v("y")]),
        ])
        .unwrap()
    }

    #[test]
    fn program_order_chains_single_client() {
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Update, "r1", "x"),
                recv_update(1, "r1", "c1", 0, 0),
                send(2, "c1", 1, OpKind::Query, "r1", "x"),
            ],
            quiescent: true,
        };
        let order = build_causal_order(&trace).unwrap();
        assert!(order.happened_before(0, 1));
        assert!(!order.happened_before(1, 0));
    }

    #[test]
    fn read_from_bridges_clients_transitively() {
        // c1 writes x; c2 reads that x then writes y: write-x -> write-y
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Update, "r2", "x"),
                recv_update(1, "r2", "c1", 0, 0),
                apply(2, "r2", "r2", 0, "x", "v0"),
                send(3, "c2", 1, OpKind::Query, "r2", "x"),
                reply(4, "r2", "c2", 1, "x", Some("v0"), Some(("r2", 0))),
                send(5, "c2", 2, OpKind::Update, "r2", "y"),
                recv_update(6, "r2", "c2", 2, 1),
                apply(7, "r2", "r2", 1, "y", "v2"),
            ],
            quiescent: true,
        };
        let order = build_causal_order(&trace).unwrap();
        assert!(order.happened_before(0, 2));
        assert!(order.happened_before(0, 1));
        assert!(!order.happened_before(2, 0));
    }

    #[test]
    fn unrelated_clients_stay_unordered() {
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Update, "r1", "x"),
                recv_update(1, "r1", "c1", 0, 0),
                send(2, "c2", 1, OpKind::Update, "r2", "y"),
                recv_update(3, "r2", "c2", 1, 0),
            ],
            quiescent: true,
        };
        let order = build_causal_order(&trace).unwrap();
        assert!(!order.happened_before(0, 1));
        assert!(!order.happened_before(1, 0));
    }

    #[test]
    fn unknown_read_tag_is_an_error() {
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Query, "r1", "x"),
                reply(1, "r1", "c1", 0, "x", Some("ghost"), Some(("r9", 4))),
            ],
            quiescent: true,
        };
        let err = build_causal_order(&trace).unwrap_err();
        assert!(matches!(err, CheckerError::UnknownRecord { .. }));
    }

    #[test]
    fn empty_trace_is_clean() {
        let trace = Trace {
            events: vec![],
            quiescent: true,
        };
        let order = build_causal_order(&trace).unwrap();
        let assign = assign_two();
        assert!(check_safety(&trace, &order, &assign).is_empty());
        assert!(check_liveness(&trace, &assign).is_empty());
        assert_eq!(classify_stalls(&trace, &order, &assign), (0, 0));
    }

    #[test]
    fn stale_read_is_flagged() {
        // c1 writes x at r2 (applied); c2 reads that x, then reads again at
        // r2 — but the second reply claims the initial value.
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Update, "r2", "x"),
                recv_update(1, "r2", "c1", 0, 0),
                apply(2, "r2", "r2", 0, "x", "v0"),
                send(3, "c2", 1, OpKind::Query, "r2", "x"),
                reply(4, "r2", "c2", 1, "x", None, None),
            ],
            quiescent: true,
        };
        let order = build_causal_order(&trace).unwrap();
        let violations = check_safety(&trace, &order, &assign_two());
        assert!(violations
            .iter()
            .any(|v| v.kind == ViolationKind::SafetyStaleRead));
    }

    #[test]
    fn unapplied_record_fails_liveness() {
        let trace = Trace {
            events: vec![
                send(0, "c1", 0, OpKind::Update, "r2", "x"),
                recv_update(1, "r2", "c1", 0, 0),
                apply(2, "r2", "r2", 0, "x", "v0"),
                // never applied at r1, which also stores x
            ],
            quiescent: true,
        };
        let violations = check_liveness(&trace, &assign_two());
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::LivenessUnapplied);
        assert_eq!(violations[0].replica, r("r1"));
    }
}
