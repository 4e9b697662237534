//! Full-replication-style baseline: one counter per replica.
//!
//! Clients and replicas keep a vector clock of length `n`, an update at
//! replica `i` advances component `i`, and a query waits until its whole
//! dependency vector is covered. Data movement stays restricted to share
//! edges, so a replica can never receive records for variables it does not
//! store; component `o` of `val_i` therefore counts the prefix of `o`'s
//! updates whose locally relevant writes have been applied, skipping foreign
//! sequence numbers once a gossip straight from `o` proves nothing relevant
//! is missing below its watermark. For origins sharing nothing with `i` the
//! component is vacuous and follows the heard-of counter. The coarse
//! one-counter-per-replica dependency vector is exactly what produces the
//! false stalls the edge protocol avoids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::graph::{ClientId, ReplicaId, VarName};
use crate::protocol::{ProtocolError, RecordKey, Topology, Value};

/// A clock with one counter per replica.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReplicaVector {
    counters: BTreeMap<ReplicaId, u64>,
}

impl ReplicaVector {
    pub fn zero(replicas: impl Iterator<Item = ReplicaId>) -> Self {
        Self {
            counters: replicas.map(|r| (r, 0)).collect(),
        }
    }

    pub fn get(&self, r: &ReplicaId) -> u64 {
        *self.counters.get(r).expect("replica in vector domain")
    }

    pub fn set(&mut self, r: &ReplicaId, v: u64) {
        *self.counters.get_mut(r).expect("replica in vector domain") = v;
    }

    pub fn increment(&mut self, r: &ReplicaId) -> u64 {
        let slot = self.counters.get_mut(r).expect("replica in vector domain");
        *slot += 1;
        *slot
    }

    pub fn merge_from(&mut self, other: &ReplicaVector) {
        for (r, v) in self.counters.iter_mut() {
            if let Some(&w) = other.counters.get(r) {
                *v = (*v).max(w);
            }
        }
    }

    pub fn leq(&self, other: &ReplicaVector) -> bool {
        self.counters.iter().all(|(r, &v)| v <= other.get(r))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ReplicaId, u64)> {
        self.counters.iter().map(|(r, &v)| (r, v))
    }

    /// Canonical rendering `{r1:0,r2:3}`.
    pub fn render(&self) -> String {
        let mut s = String::from("{");
        for (idx, (r, v)) in self.counters.iter().enumerate() {
            if idx > 0 {
                s.push(',');
            }
            s.push_str(&format!("{r}:{v}"));
        }
        s.push('}');
        s
    }
}

impl fmt::Display for ReplicaVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselineRecord {
    pub origin: ReplicaId,
    pub var: VarName,
    pub value: Value,
    pub ts: ReplicaVector,
    pub dep: ReplicaVector,
    /// Equals `ts[origin]`.
    pub seq: u64,
}

impl BaselineRecord {
    pub fn key(&self) -> RecordKey {
        (self.origin.clone(), self.seq)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselinePending {
    pub token: u64,
    pub client: ClientId,
    pub var: VarName,
    pub dep: ReplicaVector,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselineAnswer {
    pub token: u64,
    pub client: ClientId,
    pub var: VarName,
    pub value: Option<Value>,
    pub read: Option<RecordKey>,
    pub val_snapshot: ReplicaVector,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct BaselineEffects {
    pub applied: Vec<RecordKey>,
    pub answered: Vec<BaselineAnswer>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselineUpdateOutcome {
    pub reply_ts: ReplicaVector,
    pub key: RecordKey,
    pub applied_now: bool,
    pub effects: BaselineEffects,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselineReplica {
    pub id: ReplicaId,
    vars: BTreeSet<VarName>,
    /// Variables shared with each origin (`X_o ∩ X_i`), empty set when the
    /// origin shares nothing with this replica.
    relevant: BTreeMap<ReplicaId, BTreeSet<VarName>>,
    neighbor_vars: BTreeMap<ReplicaId, BTreeSet<VarName>>,
    pub rep: ReplicaVector,
    pub val: ReplicaVector,
    /// Per origin, the highest own-counter seen in a gossip received straight
    /// from that origin; below it, missing sequence numbers are provably
    /// foreign.
    watermark: ReplicaVector,
    store: BTreeMap<VarName, (Option<Value>, Option<RecordKey>)>,
    log: BTreeMap<RecordKey, BaselineRecord>,
    done: BTreeMap<RecordKey, VarName>,
    pending: Vec<BaselinePending>,
    sent_to: BTreeMap<ReplicaId, BTreeSet<RecordKey>>,
    last_gossip_rep: BTreeMap<ReplicaId, ReplicaVector>,
}

impl BaselineReplica {
    pub fn new(topo: &Topology, id: &ReplicaId) -> Self {
        let vars = topo.assign.variables_of(id).expect("known replica").clone();
        let all: Vec<ReplicaId> = topo.assign.replicas().cloned().collect();
        let relevant = all
            .iter()
            .map(|o| {
                let shared: BTreeSet<VarName> = topo
                    .assign
                    .variables_of(o)
                    .unwrap()
                    .intersection(&vars)
                    .cloned()
                    .collect();
                (o.clone(), shared)
            })
            .collect();
        let neighbor_vars = topo
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
        Self {
            id: id.clone(),
            store: vars.iter().map(|v| (v.clone(), (None, None))).collect(),
            vars,
            relevant,
            neighbor_vars,
            rep: ReplicaVector::zero(all.iter().cloned()),
            val: ReplicaVector::zero(all.iter().cloned()),
            watermark: ReplicaVector::zero(all.into_iter()),
            log: BTreeMap::new(),
            done: BTreeMap::new(),
            pending: Vec::new(),
            sent_to: BTreeMap::new(),
            last_gossip_rep: BTreeMap::new(),
        }
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &ReplicaId> {
        self.neighbor_vars.keys()
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn done_len(&self) -> usize {
        self.done.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn value_of(&self, var: &VarName) -> Option<&(Option<Value>, Option<RecordKey>)> {
        self.store.get(var)
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

    /// Largest prefix of `o`'s updates whose locally relevant writes are all
    /// applied here, bounded by the direct-gossip watermark.
    fn cover_of(&self, o: &ReplicaId) -> u64 {
        if self.relevant[o].is_empty() && o != &self.id {
            return self.rep.get(o); // vacuous: no write at o can matter here
        }
        let bound = if o == &self.id {
            self.rep.get(o)
        } else {
            self.watermark.get(o)
        };
        let min_unapplied = self
            .log
            .iter()
            .filter(|((origin, _), _)| origin == o)
            .filter(|(key, _)| !self.done.contains_key(*key))
            .map(|((_, seq), _)| *seq)
            .min();
        match min_unapplied {
            Some(s) => bound.min(s - 1),
            None => bound,
        }
    }

    fn refresh_val(&mut self) {
        let origins: Vec<ReplicaId> = self.val.iter().map(|(r, _)| r.clone()).collect();
        for o in origins {
            let cover = self.cover_of(&o);
            debug_assert!(cover >= self.val.get(&o), "baseline val regressed at {o}");
            self.val.set(&o, cover.max(self.val.get(&o)));
        }
    }

    fn admissible(&self, rec: &BaselineRecord) -> bool {
        if self.done.contains_key(&rec.key()) {
            return false;
        }
        // minimal unapplied record of its origin, confirmed by the watermark
        let minimal = self
            .log
            .iter()
            .filter(|((origin, _), _)| origin == &rec.origin)
            .filter(|(key, _)| !self.done.contains_key(*key))
            .all(|((_, seq), _)| *seq >= rec.seq);
        let bound = if rec.origin == self.id {
            self.rep.get(&self.id)
        } else {
            self.watermark.get(&rec.origin)
        };
        minimal && rec.seq <= bound && rec.dep.leq(&self.val)
    }

    fn apply_record(&mut self, key: &RecordKey) {
        let rec = self.log.get(key).expect("record in log").clone();
        self.store
            .insert(rec.var.clone(), (Some(rec.value.clone()), Some(key.clone())));
        self.done.insert(key.clone(), rec.var.clone());
    }

    fn run_apply_and_wake(&mut self, effects: &mut BaselineEffects) {
        loop {
            self.refresh_val();
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
            if q.dep.leq(&self.val) {
                let (value, read) = self.store.get(&q.var).cloned().unwrap_or((None, None));
                effects.answered.push(BaselineAnswer {
                    token: q.token,
                    client: q.client,
                    var: q.var,
                    value,
                    read,
                    val_snapshot: self.val.clone(),
                });
            } else {
                still_pending.push(q);
            }
        }
        self.pending = still_pending;
    }

    pub fn on_update(
        &mut self,
        var: &VarName,
        value: Value,
        dep: &ReplicaVector,
    ) -> Result<BaselineUpdateOutcome, ProtocolError> {
        self.check_var(var)?;
        let seq = self.rep.increment(&self.id);
        self.rep.merge_from(dep);
        let mut ts = dep.clone();
        ts.set(&self.id, seq);
        let rec = BaselineRecord {
            origin: self.id.clone(),
            var: var.clone(),
            value,
            ts: ts.clone(),
            dep: dep.clone(),
            seq,
        };
        let key = rec.key();
        self.log.insert(key.clone(), rec);
        let mut effects = BaselineEffects::default();
        self.run_apply_and_wake(&mut effects);
        let applied_now = effects.applied.contains(&key);
        Ok(BaselineUpdateOutcome {
            reply_ts: ts,
            key,
            applied_now,
            effects,
        })
    }

    pub fn on_query(
        &mut self,
        token: u64,
        client: &ClientId,
        var: &VarName,
        dep: &ReplicaVector,
    ) -> Result<Option<BaselineAnswer>, ProtocolError> {
        self.check_var(var)?;
        // hearing the client's vector may settle vacuous components
        self.rep.merge_from(dep);
        self.refresh_val();
        if dep.leq(&self.val) {
            let (value, read) = self.store.get(var).cloned().unwrap_or((None, None));
            return Ok(Some(BaselineAnswer {
                token,
                client: client.clone(),
                var: var.clone(),
                value,
                read,
                val_snapshot: self.val.clone(),
            }));
        }
        self.pending.push(BaselinePending {
            token,
            client: client.clone(),
            var: var.clone(),
            dep: dep.clone(),
        });
        Ok(None)
    }

    /// Gossip to a share neighbor: full vector plus the log records on
    /// variables shared with it.
    pub fn gossip_to(
        &mut self,
        neighbor: &ReplicaId,
    ) -> Result<(ReplicaVector, Vec<BaselineRecord>), ProtocolError> {
        let Some(shared) = self.neighbor_vars.get(neighbor) else {
            return Err(ProtocolError::NotANeighbor {
                replica: self.id.clone(),
                other: neighbor.clone(),
            });
        };
        let records: Vec<BaselineRecord> = self
            .log
            .values()
            .filter(|r| shared.contains(&r.var))
            .cloned()
            .collect();
        let sent = self.sent_to.entry(neighbor.clone()).or_default();
        for r in &records {
            sent.insert(r.key());
        }
        self.last_gossip_rep
            .insert(neighbor.clone(), self.rep.clone());
        Ok((self.rep.clone(), records))
    }

    /// Suppression probe for periodic gossip; a message that fails it is a
    /// no-op at the receiver (same vector, no unseen records).
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

    pub fn record(&self, key: &RecordKey) -> Option<&BaselineRecord> {
        self.log.get(key)
    }

    pub fn on_gossip(
        &mut self,
        sender: &ReplicaId,
        ts: &ReplicaVector,
        records: &[BaselineRecord],
    ) -> Result<BaselineEffects, ProtocolError> {
        if !self.neighbor_vars.contains_key(sender) {
            return Err(ProtocolError::NotANeighbor {
                replica: self.id.clone(),
                other: sender.clone(),
            });
        }
        for rec in records {
            let key = rec.key();
            if self.done.contains_key(&key) || self.log.contains_key(&key) {
                continue;
            }
            self.rep.merge_from(&rec.ts);
            self.log.insert(key, rec.clone());
        }
        self.rep.merge_from(ts);
        // a gossip straight from the sender carries every record of the
        // sender's own variables shared with us up to its own counter
        let direct = ts.get(sender);
        if direct > self.watermark.get(sender) {
            self.watermark.set(sender, direct);
        }
        let mut effects = BaselineEffects::default();
        self.run_apply_and_wake(&mut effects);
        Ok(effects)
    }
}

/// Baseline client: a full-length vector merged from every reply.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BaselineClient {
    pub id: ClientId,
    access: BTreeSet<ReplicaId>,
    pub clock: ReplicaVector,
    outstanding: bool,
}

impl BaselineClient {
    pub fn new(topo: &Topology, id: &ClientId) -> Self {
        Self {
            id: id.clone(),
            access: topo.access.replicas_of(id).expect("known client").clone(),
            clock: ReplicaVector::zero(topo.assign.replicas().cloned()),
            outstanding: false,
        }
    }

    fn check(&self, topo: &Topology, target: &ReplicaId, var: &VarName) -> Result<(), ProtocolError> {
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

    /// The request dependency is the whole clock.
    pub fn request(
        &mut self,
        topo: &Topology,
        target: &ReplicaId,
        var: &VarName,
    ) -> Result<ReplicaVector, ProtocolError> {
        self.check(topo, target, var)?;
        self.outstanding = true;
        Ok(self.clock.clone())
    }

    pub fn on_reply(&mut self, ts: &ReplicaVector) -> Result<(), ProtocolError> {
        if !self.outstanding {
            return Err(ProtocolError::UnsolicitedReply(self.id.clone()));
        }
        self.clock.merge_from(ts);
        self.outstanding = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ClientAccessMap, VariableAssignment};

    fn r(s: &str) -> ReplicaId {
        ReplicaId::new(s)
    }

    fn c(s: &str) -> ClientId {
        ClientId::new(s)
    }

    fn v(s: &str) -> VarName {
        VarName::new(s)
    }

    /// The four-replica chain with a client on r2 and r3.
    fn chain() -> Topology {
        let assign = VariableAssignment::new(vec![
            (r("r1"), vec![v("x")]),
            (r("r2"), vec![v("x"), v("y")]),
            (r("r3"), vec![v("y"), v("z")]),
            (r("r4"), vec![v("z")]),
        ])
        .unwrap();
        let access =
            ClientAccessMap::new(vec![(c("c1"), vec![r("r2"), r("r3")])], &assign).unwrap();
        Topology::build(assign, access).unwrap()
    }

    #[test]
    fn update_bumps_own_component_and_applies() {
        let topo = chain();
        let mut r2 = BaselineReplica::new(&topo, &r("r2"));
        let zeros = ReplicaVector::zero(topo.assign.replicas().cloned());
        let out = r2.on_update(&v("x"), "1".into(), &zeros).unwrap();
        assert!(out.applied_now);
        assert_eq!(out.reply_ts.get(&r("r2")), 1);
        assert_eq!(r2.val.get(&r("r2")), 1);
    }

    /// The false-dependency scenario: a write to x at r2 blocks a later read
    /// of y at r3 until r3 hears from r2, even though r3 never stores x.
    #[test]
    fn foreign_component_blocks_until_direct_gossip() {
        let topo = chain();
        let mut r2 = BaselineReplica::new(&topo, &r("r2"));
        let mut r3 = BaselineReplica::new(&topo, &r("r3"));
        let mut c1 = BaselineClient::new(&topo, &c("c1"));

        let dep = c1.request(&topo, &r("r2"), &v("x")).unwrap();
        let out = r2.on_update(&v("x"), "1".into(), &dep).unwrap();
        c1.on_reply(&out.reply_ts).unwrap();
        assert_eq!(c1.clock.get(&r("r2")), 1);

        let qdep = c1.request(&topo, &r("r3"), &v("y")).unwrap();
        let blocked = r3.on_query(1, &c("c1"), &v("y"), &qdep).unwrap();
        assert!(blocked.is_none());

        // gossip r2 -> r3 carries no record (x is not shared with r3) but
        // its watermark lets r3 cover the foreign sequence number
        let (ts, records) = r2.gossip_to(&r("r3")).unwrap();
        assert!(records.is_empty());
        let eff = r3.on_gossip(&r("r2"), &ts, &records).unwrap();
        assert_eq!(eff.answered.len(), 1);
        assert_eq!(eff.answered[0].value, None);
        assert_eq!(r3.val.get(&r("r2")), 1);
    }

    #[test]
    fn relevant_records_apply_in_sequence() {
        let topo = chain();
        let mut r2 = BaselineReplica::new(&topo, &r("r2"));
        let zeros = ReplicaVector::zero(topo.assign.replicas().cloned());
        r2.on_update(&v("y"), "a".into(), &zeros).unwrap();
        let (ts_a, recs_a) = r2.gossip_to(&r("r3")).unwrap();
        r2.on_update(&v("y"), "b".into(), &zeros).unwrap();
        let (ts_b, recs_b) = r2.gossip_to(&r("r3")).unwrap();
        assert_eq!((recs_a.len(), recs_b.len()), (1, 2));

        // non-FIFO: the later (complete) gossip lands first
        let mut r3 = BaselineReplica::new(&topo, &r("r3"));
        let eff = r3.on_gossip(&r("r2"), &ts_b, &recs_b).unwrap();
        assert_eq!(
            eff.applied,
            vec![(r("r2"), 1), (r("r2"), 2)],
            "sequence order within one batch"
        );
        let eff2 = r3.on_gossip(&r("r2"), &ts_a, &recs_a).unwrap();
        assert!(eff2.applied.is_empty()); // stale duplicate
        assert_eq!(
            r3.value_of(&v("y")),
            Some(&(Some("b".to_owned()), Some((r("r2"), 2))))
        );
    }

    /// A record relayed ahead of the origin's own gossip waits for the
    /// direct watermark before it may apply.
    #[test]
    fn record_beyond_watermark_waits() {
        let topo = chain();
        let mut r2 = BaselineReplica::new(&topo, &r("r2"));
        let mut r3 = BaselineReplica::new(&topo, &r("r3"));
        let zeros = ReplicaVector::zero(topo.assign.replicas().cloned());
        r2.on_update(&v("y"), "a".into(), &zeros).unwrap();
        r2.on_update(&v("y"), "b".into(), &zeros).unwrap();
        let (_, records) = r2.gossip_to(&r("r3")).unwrap();
        // ts claims only one r2 update, as a relay that logged seq 1 would
        let mut stale_ts = zeros.clone();
        stale_ts.set(&r("r2"), 1);
        let eff = r3.on_gossip(&r("r2"), &stale_ts, &records).unwrap();
        assert_eq!(eff.applied, vec![(r("r2"), 1)]);
        assert_eq!(r3.val.get(&r("r2")), 1);
    }

    #[test]
    fn mixed_variable_gap_is_skipped_after_watermark() {
        let topo = chain();
        let mut r2 = BaselineReplica::new(&topo, &r("r2"));
        let mut r3 = BaselineReplica::new(&topo, &r("r3"));
        let zeros = ReplicaVector::zero(topo.assign.replicas().cloned());
        r2.on_update(&v("x"), "1".into(), &zeros).unwrap(); // seq 1, foreign to r3
        r2.on_update(&v("y"), "2".into(), &zeros).unwrap(); // seq 2, shared
        let (ts, records) = r2.gossip_to(&r("r3")).unwrap();
        assert_eq!(records.len(), 1);
        let eff = r3.on_gossip(&r("r2"), &ts, &records).unwrap();
        assert_eq!(eff.applied.len(), 1);
        assert_eq!(r3.val.get(&r("r2")), 2); // gap at seq 1 skipped as foreign
    }
}
