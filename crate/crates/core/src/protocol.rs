//! Client and replica state machines.
//!
//! Pure transition functions: each handler mutates one owned state and
//! returns what it emitted. No I/O, no time; the simulator (or any host)
//! supplies scheduling.
//!
//! Replicas keep two clocks over `E_i`: `rep` counts every update the replica
//! has heard of (its own increments, gossip timestamps, and the timestamps of
//! logged records), `val` covers what is safely reflected locally. A logged
//! record from origin `o` is applied once
//!
//! * it is next in sequence on its own edge: `ts[e_oi] == val[e_oi] + 1`, and
//! * its dependencies are covered: `dep[e_ki] <= val[e_ki]` for every
//!   incoming edge `e_ki` of this replica inside `E_o`.
//!
//! Gating on `val` rather than `rep` is what keeps a record from being
//! applied while a causally earlier write is still in flight on a slower
//! channel: `rep` may learn a counter secondhand through a gossip chain long
//! before the corresponding record arrives, and the in-sequence rule pins the
//! per-edge application order so `val` counters never cover a write that has
//! not landed. Queries and the replica's own updates wait on the same `val`
//! condition over all incoming edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::clock::EdgeClock;
use crate::graph::{
    AugmentedShareGraph, ClientAccessMap, ClientEdgeSets, ClientId, DirectedEdge, GraphError,
    ReplicaEdgeSets, ReplicaId, ShareGraph, VarName, VariableAssignment,
};

/// Written values are opaque strings.
pub type Value = String;

/// Global identity of an update: (origin replica, per-origin sequence
/// number). The sequence number is plumbing and never enters a clock
/// comparison.
pub type RecordKey = (ReplicaId, u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("client {client} may not contact replica {replica}")]
    TargetNotAccessible { client: ClientId, replica: ReplicaId },
    #[error("replica {replica} does not store {var}")]
    VariableNotStored { replica: ReplicaId, var: VarName },
    #[error("client {0} already has an outstanding request")]
    OutstandingRequest(ClientId),
    #[error("client {0} received a reply with no outstanding request")]
    UnsolicitedReply(ClientId),
    #[error("dependency clock domain does not match E_i of replica {0}")]
    DepDomainMismatch(ReplicaId),
    #[error("replica {replica} and {other} are not share-graph neighbors")]
    NotANeighbor { replica: ReplicaId, other: ReplicaId },
}

/// Compiled topology: the graphs and edge sets every state machine is built
/// from. Constructed once per configuration.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Topology {
    pub assign: VariableAssignment,
    pub access: ClientAccessMap,
    pub share: ShareGraph,
    pub augmented: AugmentedShareGraph,
    pub replica_edges: ReplicaEdgeSets,
    pub client_edges: ClientEdgeSets,
}

impl Topology {
    pub fn build(assign: VariableAssignment, access: ClientAccessMap) -> Result<Self, GraphError> {
        let share = ShareGraph::build(&assign);
        let augmented = AugmentedShareGraph::augment(&share, &access)?;
        let replica_edges = ReplicaEdgeSets::compute(&share, &augmented);
        let client_edges = ClientEdgeSets::compute(&access, &replica_edges);
        Ok(Self {
            assign,
            access,
            share,
            augmented,
            replica_edges,
            client_edges,
        })
    }

    pub fn replica_domain(&self, i: &ReplicaId) -> &BTreeSet<DirectedEdge> {
        self.replica_edges.directed(i).expect("known replica")
    }
}

/// The update record `r(id, x, v, ts, dep)` plus the dedup sequence number.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UpdateRecord {
    pub origin: ReplicaId,
    pub var: VarName,
    pub value: Value,
    /// Timestamp over `E_origin`: `dep` overwritten with the incremented
    /// counters on the origin's outgoing edges carrying `var`.
    pub ts: EdgeClock,
    /// Issuing client's clock restricted to `E_origin`.
    pub dep: EdgeClock,
    pub seq: u64,
}

impl UpdateRecord {
    pub fn key(&self) -> RecordKey {
        (self.origin.clone(), self.seq)
    }
}

impl fmt::Display for UpdateRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.origin, self.seq)
    }
}

/// Wire messages of the edge protocol.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Message {
    Update {
        var: VarName,
        value: Value,
        dep: EdgeClock,
    },
    Query {
        var: VarName,
        dep: EdgeClock,
    },
    UpdateReply {
        ts: EdgeClock,
    },
    QueryReply {
        value: Option<Value>,
        val: EdgeClock,
        /// Which record the returned value came from; `None` for the initial
        /// (unset) value. Checker plumbing.
        read: Option<RecordKey>,
    },
    Gossip {
        ts: EdgeClock,
        records: Vec<UpdateRecord>,
    },
}

/// Deliberate protocol mutations for checker fault-injection tests. All off
/// in a healthy build.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Faults {
    /// Answer queries immediately, never waiting on `val`.
    pub skip_query_wait: bool,
    /// Apply an incoming update at its origin without the dependency check.
    pub skip_update_dep_check: bool,
    /// Admit logged records into the apply loop ignoring their `dep`.
    pub apply_ignore_deps: bool,
}

/// A query parked until its dependency condition holds.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PendingQuery {
    pub token: u64,
    pub client: ClientId,
    pub var: VarName,
    pub dep: EdgeClock,
}

/// Reply produced for a query, either immediately or on unblock.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct QueryAnswer {
    pub token: u64,
    pub client: ClientId,
    pub var: VarName,
    pub value: Option<Value>,
    pub read: Option<RecordKey>,
    pub val_snapshot: EdgeClock,
}

/// What a state transition applied and unblocked.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct StepEffects {
    /// Records applied, in application order.
    pub applied: Vec<RecordKey>,
    /// Pending queries answered, in FIFO order among the newly satisfied.
    pub answered: Vec<QueryAnswer>,
}

/// Outcome of processing one update message.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UpdateOutcome {
    /// Timestamp returned to the client (always, applied or not).
    pub reply_ts: EdgeClock,
    pub key: RecordKey,
    /// Whether this update's own record was applied during this step.
    pub applied_now: bool,
    pub effects: StepEffects,
}

/// Result of a garbage-collection pass.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct GcOutcome {
    pub dropped_log: usize,
    pub dropped_done: usize,
}

/// Client state: access set, clock over `C_i`, and the strictly sequential
/// outstanding-request flag.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientState {
    pub id: ClientId,
    access: BTreeSet<ReplicaId>,
    pub clock: EdgeClock,
    outstanding: bool,
}

impl ClientState {
    pub fn new(topo: &Topology, id: &ClientId) -> Self {
        let access = topo.access.replicas_of(id).expect("known client").clone();
        let domain = topo.client_edges.get(id).expect("known client");
        Self {
            id: id.clone(),
            access,
            clock: EdgeClock::zero(domain),
            outstanding: false,
        }
    }

    fn check_target(
        &self,
        topo: &Topology,
        target: &ReplicaId,
        var: &VarName,
    ) -> Result<(), ProtocolError> {
        if self.outstanding {
            return Err(ProtocolError::OutstandingRequest(self.id.clone()));
        }
        if !self.access.contains(target) {
            return Err(ProtocolError::TargetNotAccessible {
                client: self.id.clone(),
                replica: target.clone(),
            });
        }
        if !topo.assign.stores_var(target, var) {
            return Err(ProtocolError::VariableNotStored {
                replica: target.clone(),
                var: var.clone(),
            });
        }
        Ok(())
    }

    /// Sends `u = (x, v, c|_{r_i})`.
    pub fn update(
        &mut self,
        topo: &Topology,
        target: &ReplicaId,
        var: &VarName,
        value: Value,
    ) -> Result<Message, ProtocolError> {
        self.check_target(topo, target, var)?;
        let dep = self
            .clock
            .restrict(topo.replica_domain(target))
            .expect("E_target is a subset of C");
        self.outstanding = true;
        Ok(Message::Update {
            var: var.clone(),
            value,
            dep,
        })
    }

    /// Sends `q = (x, c|_{r_i})`.
    pub fn query(
        &mut self,
        topo: &Topology,
        target: &ReplicaId,
        var: &VarName,
    ) -> Result<Message, ProtocolError> {
        self.check_target(topo, target, var)?;
        let dep = self
            .clock
            .restrict(topo.replica_domain(target))
            .expect("E_target is a subset of C");
        self.outstanding = true;
        Ok(Message::Query {
            var: var.clone(),
            dep,
        })
    }

    /// Merges a reply timestamp: `c = merge(c, t)`.
    pub fn on_reply(&mut self, ts: &EdgeClock) -> Result<(), ProtocolError> {
        if !self.outstanding {
            return Err(ProtocolError::UnsolicitedReply(self.id.clone()));
        }
        self.clock.merge_from(ts);
        self.outstanding = false;
        Ok(())
    }

    pub fn has_outstanding(&self) -> bool {
        self.outstanding
    }
}

/// Replica state machine.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReplicaState {
    pub id: ReplicaId,
    vars: BTreeSet<VarName>,
    domain: BTreeSet<DirectedEdge>,
    /// Incoming edges of `E_i` (their counters gate applies and queries).
    incoming: BTreeSet<DirectedEdge>,
    /// Share-graph neighbors and the variables shared with each.
    neighbor_vars: BTreeMap<ReplicaId, BTreeSet<VarName>>,
    pub rep: EdgeClock,
    pub val: EdgeClock,
    store: BTreeMap<VarName, (Option<Value>, Option<RecordKey>)>,
    log: BTreeMap<RecordKey, UpdateRecord>,
    done: BTreeMap<RecordKey, VarName>,
    next_seq: u64,
    /// Applied prefix per own outgoing edge; keeps the replica's own records
    /// in issue order per edge even when some are deferred.
    applied_own: BTreeMap<DirectedEdge, u64>,
    pending: Vec<PendingQuery>,
    /// Records already included in a gossip to each neighbor.
    sent_to: BTreeMap<ReplicaId, BTreeSet<RecordKey>>,
    /// Neighbors a record has been received from (gossip only).
    received_from: BTreeMap<RecordKey, BTreeSet<ReplicaId>>,
    /// `rep` at the time of the last gossip to each neighbor (periodic
    /// suppression).
    last_gossip_rep: BTreeMap<ReplicaId, EdgeClock>,
    faults: Faults,
}

impl ReplicaState {
    pub fn new(topo: &Topology, id: &ReplicaId, faults: Faults) -> Self {
        let vars = topo.assign.variables_of(id).expect("known replica").clone();
        let domain = topo.replica_domain(id).clone();
        let incoming: BTreeSet<DirectedEdge> =
            domain.iter().filter(|e| &e.to == id).cloned().collect();
        let neighbor_vars: BTreeMap<ReplicaId, BTreeSet<VarName>> = topo
            .share
            .neighbors(id)
            .into_iter()
            .map(|n| {
                let shared = topo
                    .share
                    .shared_vars(&crate::graph::UndirectedEdge::new(id.clone(), n.clone()))
                    .expect("neighbor edge")
                    .clone();
                (n, shared)
            })
            .collect();
        let applied_own = domain
            .iter()
            .filter(|e| &e.from == id)
            .map(|e| (e.clone(), 0))
            .collect();
        Self {
            id: id.clone(),
            store: vars.iter().map(|v| (v.clone(), (None, None))).collect(),
            vars,
            rep: EdgeClock::zero(&domain),
            val: EdgeClock::zero(&domain),
            incoming,
            neighbor_vars,
            domain,
            log: BTreeMap::new(),
            done: BTreeMap::new(),
            next_seq: 0,
            applied_own,
            pending: Vec::new(),
            sent_to: BTreeMap::new(),
            received_from: BTreeMap::new(),
            last_gossip_rep: BTreeMap::new(),
            faults,
        }
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &ReplicaId> {
        self.neighbor_vars.keys()
    }

    pub fn stores(&self, var: &VarName) -> bool {
        self.vars.contains(var)
    }

    pub fn value_of(&self, var: &VarName) -> Option<&(Option<Value>, Option<RecordKey>)> {
        self.store.get(var)
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn done_len(&self) -> usize {
        self.done.len()
    }

    pub fn pending_queries(&self) -> &[PendingQuery] {
        &self.pending
    }

    pub fn record(&self, key: &RecordKey) -> Option<&UpdateRecord> {
        self.log.get(key)
    }

    pub fn log_records(&self) -> impl Iterator<Item = &UpdateRecord> {
        self.log.values()
    }

    pub fn done_keys(&self) -> impl Iterator<Item = &RecordKey> {
        self.done.keys()
    }

    /// Incoming edges of `E_i`.
    pub fn incoming_edges(&self) -> &BTreeSet<DirectedEdge> {
        &self.incoming
    }

    fn check_var(&self, var: &VarName) -> Result<(), ProtocolError> {
        if !self.vars.contains(var) {
            return Err(ProtocolError::VariableNotStored {
                replica: self.id.clone(),
                var: var.clone(),
            });
        }
        Ok(())
    }

    fn check_dep_domain(&self, dep: &EdgeClock) -> Result<(), ProtocolError> {
        if dep.domain_set() != self.domain {
            return Err(ProtocolError::DepDomainMismatch(self.id.clone()));
        }
        Ok(())
    }

    /// Outgoing edges whose shared set contains `var` (the counters an
    /// update on `var` advances). Empty when `var` lives only here.
    fn counted_edges(&self, var: &VarName) -> Vec<DirectedEdge> {
        self.domain
            .iter()
            .filter(|e| {
                e.from == self.id
                    && self
                        .neighbor_vars
                        .get(&e.to)
                        .is_some_and(|shared| shared.contains(var))
            })
            .cloned()
            .collect()
    }

    /// Processes `u = (x, v, dep)`: advance `rep` on the counted edges, stamp
    /// and log the record, then run the apply loop. The reply timestamp is
    /// returned whether or not the write applied.
    pub fn on_update(
        &mut self,
        var: &VarName,
        value: Value,
        dep: &EdgeClock,
    ) -> Result<UpdateOutcome, ProtocolError> {
        self.check_var(var)?;
        self.check_dep_domain(dep)?;
        let counted = self.counted_edges(var);
        for e in &counted {
            self.rep.increment(e);
        }
        let mut ts = dep.clone();
        for e in &counted {
            ts.set(e, self.rep.get(e));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let record = UpdateRecord {
            origin: self.id.clone(),
            var: var.clone(),
            value,
            ts: ts.clone(),
            dep: dep.clone(),
            seq,
        };
        let key = record.key();
        // Anything in the log counts as heard.
        self.rep.merge_from(&record.ts);
        self.log.insert(key.clone(), record);
        let mut effects = StepEffects::default();
        if self.faults.skip_update_dep_check {
            self.force_apply(&key, &mut effects);
        }
        self.run_apply_and_wake(&mut effects);
        let applied_now = effects.applied.contains(&key);
        Ok(UpdateOutcome {
            reply_ts: ts,
            key,
            applied_now,
            effects,
        })
    }

    /// Processes `q = (x, dep)`: replies now if `dep <= val` on the incoming
    /// edges, otherwise parks the query.
    pub fn on_query(
        &mut self,
        token: u64,
        client: &ClientId,
        var: &VarName,
        dep: &EdgeClock,
    ) -> Result<Option<QueryAnswer>, ProtocolError> {
        self.check_var(var)?;
        self.check_dep_domain(dep)?;
        if self.faults.skip_query_wait || dep.leq_on(&self.val, &self.incoming) {
            return Ok(Some(self.answer(token, client.clone(), var.clone())));
        }
        self.pending.push(PendingQuery {
            token,
            client: client.clone(),
            var: var.clone(),
            dep: dep.clone(),
        });
        Ok(None)
    }

    fn answer(&self, token: u64, client: ClientId, var: VarName) -> QueryAnswer {
        let (value, read) = self.store.get(&var).cloned().unwrap_or((None, None));
        QueryAnswer {
            token,
            client,
            var,
            value,
            read,
            val_snapshot: self.val.clone(),
        }
    }

    /// Builds a gossip message for a share neighbor: the current `rep` and
    /// the log records on variables shared with that neighbor. With
    /// `delta_only` records already sent to the neighbor are skipped (used
    /// when garbage collection is on, so collected records are never
    /// re-delivered to a replica that may have dropped its dedup state).
    pub fn gossip_to(
        &mut self,
        neighbor: &ReplicaId,
        delta_only: bool,
    ) -> Result<Message, ProtocolError> {
        let Some(shared) = self.neighbor_vars.get(neighbor) else {
            return Err(ProtocolError::NotANeighbor {
                replica: self.id.clone(),
                other: neighbor.clone(),
            });
        };
        let sent = self.sent_to.entry(neighbor.clone()).or_default();
        let records: Vec<UpdateRecord> = self
            .log
            .values()
            .filter(|r| shared.contains(&r.var))
            .filter(|r| !delta_only || !sent.contains(&r.key()))
            .cloned()
            .collect();
        for r in &records {
            sent.insert(r.key());
        }
        self.last_gossip_rep
            .insert(neighbor.clone(), self.rep.clone());
        Ok(Message::Gossip {
            ts: self.rep.clone(),
            records,
        })
    }

    /// Whether a gossip to `neighbor` would carry anything it has not seen:
    /// an unsent matching record or a changed `rep`. Used to suppress idle
    /// periodic gossip; a message failing this test is a no-op at the
    /// receiver.
    pub fn has_news_for(&self, neighbor: &ReplicaId) -> bool {
        let Some(shared) = self.neighbor_vars.get(neighbor) else {
            return false;
        };
        let sent = self.sent_to.get(neighbor);
        let unsent = self
            .log
            .values()
            .any(|r| shared.contains(&r.var) && !sent.is_some_and(|s| s.contains(&r.key())));
        let rep_changed = self.last_gossip_rep.get(neighbor) != Some(&self.rep);
        unsent || rep_changed
    }

    /// Processes a gossip message: union the records into the log, merge the
    /// timestamp, then apply whatever became ready and wake queries.
    pub fn on_gossip(
        &mut self,
        sender: &ReplicaId,
        ts: &EdgeClock,
        records: &[UpdateRecord],
    ) -> Result<StepEffects, ProtocolError> {
        if !self.neighbor_vars.contains_key(sender) {
            return Err(ProtocolError::NotANeighbor {
                replica: self.id.clone(),
                other: sender.clone(),
            });
        }
        for rec in records {
            let key = rec.key();
            self.received_from
                .entry(key.clone())
                .or_default()
                .insert(sender.clone());
            if self.done.contains_key(&key) || self.log.contains_key(&key) {
                continue;
            }
            self.rep.merge_from(&rec.ts);
            self.log.insert(key, rec.clone());
        }
        self.rep.merge_from(ts);
        let mut effects = StepEffects::default();
        self.run_apply_and_wake(&mut effects);
        Ok(effects)
    }

    /// Whether a logged record may be applied right now.
    fn admissible(&self, rec: &UpdateRecord) -> bool {
        if self.done.contains_key(&rec.key()) {
            return false;
        }
        let dep_ok = |edges: &BTreeSet<DirectedEdge>| {
            self.faults.apply_ignore_deps
                || edges
                    .iter()
                    .filter(|e| rec.dep.contains(e))
                    .all(|e| rec.dep.get(e) <= self.val.get(e))
        };
        if rec.origin == self.id {
            // Own record: full incoming dependency check plus per-edge issue
            // order on the edges it counts on.
            let seq_ok = self
                .counted_edges(&rec.var)
                .iter()
                .all(|e| rec.ts.get(e) == self.applied_own[e] + 1);
            seq_ok && dep_ok(&self.incoming)
        } else {
            // Foreign record: it counts exactly on e_{origin,i}; apply in
            // sequence there, with dependencies checked on the incoming
            // edges E_i ∩ E_origin.
            let own_edge = DirectedEdge::new(rec.origin.clone(), self.id.clone());
            let seq_ok = rec.ts.get(&own_edge) == self.val.get(&own_edge) + 1;
            seq_ok && dep_ok(&self.incoming)
        }
    }

    fn apply_record(&mut self, key: &RecordKey) {
        let rec = self.log.get(key).expect("record in log").clone();
        self.store
            .insert(rec.var.clone(), (Some(rec.value.clone()), Some(key.clone())));
        self.done.insert(key.clone(), rec.var.clone());
        if rec.origin == self.id {
            for e in self.counted_edges(&rec.var) {
                self.applied_own.insert(e.clone(), rec.ts.get(&e));
            }
        }
        self.val.merge_from(&rec.ts);
    }

    fn force_apply(&mut self, key: &RecordKey, effects: &mut StepEffects) {
        if !self.done.contains_key(key) {
            self.apply_record(key);
            effects.applied.push(key.clone());
        }
    }

    /// The apply loop: repeatedly apply the least admissible `(origin, seq)`
    /// until a fixpoint, then wake satisfied pending queries in FIFO order.
    /// Runs after every state-mutating event, not only on gossip.
    fn run_apply_and_wake(&mut self, effects: &mut StepEffects) {
        loop {
            let next = self
                .log
                .iter()
                .find(|(_, rec)| self.admissible(rec))
                .map(|(k, _)| k.clone());
            match next {
                Some(key) => {
                    self.apply_record(&key);
                    effects.applied.push(key);
                }
                None => break,
            }
        }
        let mut still_pending = Vec::new();
        for q in std::mem::take(&mut self.pending) {
            if q.dep.leq_on(&self.val, &self.incoming) {
                let ans = self.answer(q.token, q.client, q.var);
                effects.answered.push(ans);
            } else {
                still_pending.push(q);
            }
        }
        self.pending = still_pending;
    }

    /// Failure-free garbage collection: drop applied log records already
    /// gossiped to every neighbor sharing their variable, and Done keys for
    /// records received from every such neighbor.
    pub fn run_gc(&mut self) -> GcOutcome {
        let sharing = |var: &VarName| -> Vec<&ReplicaId> {
            self.neighbor_vars
                .iter()
                .filter(|(_, shared)| shared.contains(var))
                .map(|(n, _)| n)
                .collect()
        };
        let drop_log: Vec<RecordKey> = self
            .log
            .values()
            .filter(|rec| {
                self.done.contains_key(&rec.key())
                    && sharing(&rec.var).iter().all(|n| {
                        self.sent_to
                            .get(*n)
                            .is_some_and(|sent| sent.contains(&rec.key()))
                    })
            })
            .map(|rec| rec.key())
            .collect();
        let drop_done: Vec<RecordKey> = self
            .done
            .iter()
            .filter(|(key, var)| {
                sharing(var).iter().all(|n| {
                    self.received_from
                        .get(*key)
                        .is_some_and(|from| from.contains(*n))
                })
            })
            .map(|(key, _)| key.clone())
            .collect();
        for key in &drop_log {
            self.log.remove(key);
        }
        for key in &drop_done {
            self.done.remove(key);
            self.received_from.remove(key);
        }
        GcOutcome {
            dropped_log: drop_log.len(),
            dropped_done: drop_done.len(),
        }
    }
}
