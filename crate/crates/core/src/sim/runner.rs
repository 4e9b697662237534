//! Deterministic discrete-event execution.
//!
//! Logical integer time. Every directed channel `a->b` owns a ChaCha8 stream
//! derived from the run seed and the channel name; the n-th message on a
//! channel draws the n-th delay from that stream, so two runs over the same
//! scenario and seed (even in different protocol modes) see identical draws
//! channel by channel. Deliveries are ordered by `(delivery time, send step,
//! message id)`: reliable, not FIFO.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::baseline::{BaselineClient, BaselineRecord, BaselineReplica, ReplicaVector};
use super::scenario::{GossipPolicy, Mode, Scenario};
use super::trace::{EventBody, Metrics, OpKind, Trace, TraceEvent};
use crate::clock::EdgeClock;
use crate::graph::{ClientId, ReplicaId};
use crate::protocol::{ClientState, Faults, Message, RecordKey, ReplicaState, UpdateRecord};
use crate::reduction::{IncidenceSystem, ReductionBasis};

/// Default event cap; a run that exceeds it is flagged non-quiescent.
pub const DEFAULT_STEP_CAP: u64 = 100_000;

#[derive(Clone, PartialEq, Eq, Debug)]
enum Wire {
    EdgeRequest {
        op_index: usize,
        msg: Message,
    },
    EdgeReply {
        op_index: usize,
        ts: EdgeClock,
    },
    EdgeQueryReply {
        op_index: usize,
        value: Option<String>,
        read: Option<RecordKey>,
        val: EdgeClock,
    },
    EdgeGossip {
        ts: EdgeClock,
        records: Vec<UpdateRecord>,
    },
    BaseRequest {
        op_index: usize,
        kind: OpKind,
        var: crate::graph::VarName,
        value: Option<String>,
        dep: ReplicaVector,
    },
    BaseReply {
        op_index: usize,
        ts: ReplicaVector,
    },
    BaseQueryReply {
        op_index: usize,
        value: Option<String>,
        read: Option<RecordKey>,
        val: ReplicaVector,
    },
    BaseGossip {
        ts: ReplicaVector,
        records: Vec<BaselineRecord>,
    },
}

#[derive(Clone, PartialEq, Eq, Debug)]
struct Envelope {
    deliver_at: u64,
    send_step: u64,
    msg_id: u64,
    from: String,
    to: String,
    wire: Wire,
}

impl Envelope {
    fn order(&self) -> (u64, u64, u64) {
        (self.deliver_at, self.send_step, self.msg_id)
    }
}

impl PartialOrd for Envelope {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Envelope {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order().cmp(&other.order())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum OpStatus {
    NotSent,
    Sent,
    Complete,
}

enum Nodes {
    Edge {
        replicas: BTreeMap<ReplicaId, ReplicaState>,
        clients: BTreeMap<ClientId, ClientState>,
    },
    Base {
        replicas: BTreeMap<ReplicaId, BaselineReplica>,
        clients: BTreeMap<ClientId, BaselineClient>,
    },
}

/// The running world; exposed read-only to observers.
pub struct World {
    scenario: Scenario,
    mode: Mode,
    seed: u64,
    nodes: Nodes,
    heap: BinaryHeap<Reverse<Envelope>>,
    channel_rngs: BTreeMap<(String, String), ChaCha8Rng>,
    now: u64,
    step: u64,
    next_msg_id: u64,
    events: Vec<TraceEvent>,
    op_status: Vec<OpStatus>,
    block_times: BTreeMap<usize, u64>,
    stall_count: u64,
    total_stall_duration: u64,
    max_log: BTreeMap<ReplicaId, usize>,
    max_done: BTreeMap<ReplicaId, usize>,
    next_tick: Option<u64>,
    /// Last gossip delivered to an edge replica, for re-delivery probes.
    last_edge_gossip: Option<(ReplicaId, ReplicaId, EdgeClock, Vec<UpdateRecord>)>,
    step_cap: u64,
}

impl World {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn edge_replicas(&self) -> Option<&BTreeMap<ReplicaId, ReplicaState>> {
        match &self.nodes {
            Nodes::Edge { replicas, .. } => Some(replicas),
            Nodes::Base { .. } => None,
        }
    }

    pub fn edge_clients(&self) -> Option<&BTreeMap<ClientId, ClientState>> {
        match &self.nodes {
            Nodes::Edge { clients, .. } => Some(clients),
            Nodes::Base { .. } => None,
        }
    }

    pub fn baseline_replicas(&self) -> Option<&BTreeMap<ReplicaId, BaselineReplica>> {
        match &self.nodes {
            Nodes::Base { replicas, .. } => Some(replicas),
            Nodes::Edge { .. } => None,
        }
    }

    pub fn baseline_clients(&self) -> Option<&BTreeMap<ClientId, BaselineClient>> {
        match &self.nodes {
            Nodes::Base { clients, .. } => Some(clients),
            Nodes::Edge { .. } => None,
        }
    }

    /// The most recently delivered edge gossip `(from, to, ts, records)`.
    pub fn last_edge_gossip(&self) -> Option<&(ReplicaId, ReplicaId, EdgeClock, Vec<UpdateRecord>)> {
        self.last_edge_gossip.as_ref()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    fn new(scenario: &Scenario, seed: u64, mode: Mode, faults: Faults, step_cap: u64) -> Self {
        let topo = &scenario.topology;
        let nodes = match mode {
            Mode::Edge => Nodes::Edge {
                replicas: topo
                    .assign
                    .replicas()
                    .map(|r| (r.clone(), ReplicaState::new(topo, r, faults)))
                    .collect(),
                clients: topo
                    .access
                    .clients()
                    .map(|c| (c.clone(), ClientState::new(topo, c)))
                    .collect(),
            },
            Mode::Baseline => Nodes::Base {
                replicas: topo
                    .assign
                    .replicas()
                    .map(|r| (r.clone(), BaselineReplica::new(topo, r)))
                    .collect(),
                clients: topo
                    .access
                    .clients()
                    .map(|c| (c.clone(), BaselineClient::new(topo, c)))
                    .collect(),
            },
        };
        let next_tick = match scenario.gossip.policy {
            GossipPolicy::Periodic(p) => Some(p),
            GossipPolicy::AfterEveryUpdate => None,
        };
        Self {
            mode,
            seed,
            nodes,
            heap: BinaryHeap::new(),
            channel_rngs: BTreeMap::new(),
            now: 0,
            step: 0,
            next_msg_id: 0,
            events: Vec::new(),
            op_status: vec![OpStatus::NotSent; scenario.script.len()],
            block_times: BTreeMap::new(),
            stall_count: 0,
            total_stall_duration: 0,
            max_log: BTreeMap::new(),
            max_done: BTreeMap::new(),
            next_tick,
            last_edge_gossip: None,
            step_cap,
            scenario: scenario.clone(),
        }
    }

    fn trace(&mut self, body: EventBody) {
        self.events.push(TraceEvent {
            step: self.step,
            time: self.now,
            body,
        });
        self.step += 1;
    }

    /// FNV-1a of the channel name folded into the run seed: a named, stable
    /// stream per directed channel.
    fn draw_delay(&mut self, from: &str, to: &str) -> u64 {
        let (lo, hi) = self.scenario.network.delay_bounds(from, to);
        let seed = self.seed;
        let rng = self
            .channel_rngs
            .entry((from.to_owned(), to.to_owned()))
            .or_insert_with(|| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in from.bytes().chain("->".bytes()).chain(to.bytes()) {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                ChaCha8Rng::seed_from_u64(seed ^ h)
            });
        rng.gen_range(lo..=hi)
    }

    fn send(&mut self, from: String, to: String, wire: Wire) -> u64 {
        let delay = self.draw_delay(&from, &to);
        let msg_id = self.next_msg_id;
        self.next_msg_id += 1;
        self.heap.push(Reverse(Envelope {
            deliver_at: self.now + delay,
            send_step: self.step,
            msg_id,
            from,
            to,
            wire,
        }));
        msg_id
    }

    fn note_sizes(&mut self) {
        match &self.nodes {
            Nodes::Edge { replicas, .. } => {
                for (id, r) in replicas {
                    let log = self.max_log.entry(id.clone()).or_insert(0);
                    *log = (*log).max(r.log_len());
                    let done = self.max_done.entry(id.clone()).or_insert(0);
                    *done = (*done).max(r.done_len());
                }
            }
            Nodes::Base { replicas, .. } => {
                for (id, r) in replicas {
                    let log = self.max_log.entry(id.clone()).or_insert(0);
                    *log = (*log).max(r.log_len());
                    let done = self.max_done.entry(id.clone()).or_insert(0);
                    *done = (*done).max(r.done_len());
                }
            }
        }
    }

    /// Entry is ready when its guards and its client's previous entry are
    /// complete.
    fn dispatch_script(&mut self) {
        loop {
            let mut sent_any = false;
            for index in 0..self.scenario.script.len() {
                if self.op_status[index] != OpStatus::NotSent {
                    continue;
                }
                let op = self.scenario.script[index].clone();
                let guards_ok = op
                    .after
                    .iter()
                    .all(|&g| self.op_status[g] == OpStatus::Complete);
                let prev_ok = self.scenario.script[..index]
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.client == op.client)
                    .next_back()
                    .is_none_or(|(p, _)| self.op_status[p] == OpStatus::Complete);
                if !(guards_ok && prev_ok) {
                    continue;
                }
                self.op_status[index] = OpStatus::Sent;
                sent_any = true;
                self.send_op(index, &op);
            }
            if !sent_any {
                break;
            }
        }
    }

    fn send_op(&mut self, index: usize, op: &super::scenario::ScriptOp) {
        let topo = self.scenario.topology.clone();
        let (dep_render, wire) = match &mut self.nodes {
            Nodes::Edge { clients, .. } => {
                let client = clients.get_mut(&op.client).expect("known client");
                let msg = match op.kind {
                    OpKind::Update => client
                        .update(&topo, &op.replica, &op.var, op.value.clone().unwrap())
                        .expect("script validated"),
                    OpKind::Query => client
                        .query(&topo, &op.replica, &op.var)
                        .expect("script validated"),
                };
                let dep_render = match &msg {
                    Message::Update { dep, .. } | Message::Query { dep, .. } => dep.render(),
                    _ => unreachable!("client emits requests"),
                };
                (
                    dep_render,
                    Wire::EdgeRequest {
                        op_index: index,
                        msg,
                    },
                )
            }
            Nodes::Base { clients, .. } => {
                let client = clients.get_mut(&op.client).expect("known client");
                let dep = client
                    .request(&topo, &op.replica, &op.var)
                    .expect("script validated");
                (
                    dep.render(),
                    Wire::BaseRequest {
                        op_index: index,
                        kind: op.kind,
                        var: op.var.clone(),
                        value: op.value.clone(),
                        dep,
                    },
                )
            }
        };
        self.trace(EventBody::ClientSend {
            client: op.client.clone(),
            op_index: index,
            kind: op.kind,
            replica: op.replica.clone(),
            var: op.var.clone(),
            value: op.value.clone(),
            dep: dep_render,
        });
        self.send(op.client.to_string(), op.replica.to_string(), wire);
    }

    /// Emits gossip from `from` to every share neighbor. Under the periodic
    /// policy a message is suppressed when the neighbor would learn nothing
    /// new (same rep, no unsent records), so idle systems go quiescent.
    fn emit_gossip(&mut self, from: &ReplicaId, suppress_unchanged: bool) {
        let delta_only = self.scenario.gossip.gc;
        match &mut self.nodes {
            Nodes::Edge { replicas, .. } => {
                let sender = replicas.get_mut(from).expect("known replica");
                let neighbor_ids: Vec<ReplicaId> = sender.neighbors().cloned().collect();
                let mut outgoing = Vec::new();
                for to in neighbor_ids {
                    if suppress_unchanged && !sender.has_news_for(&to) {
                        continue;
                    }
                    let Message::Gossip { ts, records } =
                        sender.gossip_to(&to, delta_only).expect("neighbor")
                    else {
                        unreachable!()
                    };
                    outgoing.push((to, ts, records));
                }
                for (to, ts, records) in outgoing {
                    let keys: Vec<RecordKey> = records.iter().map(|r| r.key()).collect();
                    let ts_render = ts.render();
                    let msg_id = self.send(
                        from.to_string(),
                        to.to_string(),
                        Wire::EdgeGossip { ts, records },
                    );
                    self.trace(EventBody::GossipSend {
                        from: from.clone(),
                        to,
                        msg_id,
                        ts: ts_render,
                        records: keys,
                    });
                }
                if self.scenario.gossip.gc {
                    self.run_gc_traced(from);
                }
            }
            Nodes::Base { replicas, .. } => {
                let sender = replicas.get_mut(from).expect("known replica");
                let neighbor_ids: Vec<ReplicaId> = sender.neighbors().cloned().collect();
                let mut outgoing = Vec::new();
                for to in neighbor_ids {
                    if suppress_unchanged && !sender.has_news_for(&to) {
                        continue;
                    }
                    let (ts, records) = sender.gossip_to(&to).expect("neighbor");
                    outgoing.push((to, ts, records));
                }
                for (to, ts, records) in outgoing {
                    let keys: Vec<RecordKey> = records.iter().map(|r| r.key()).collect();
                    let ts_render = ts.render();
                    let msg_id = self.send(
                        from.to_string(),
                        to.to_string(),
                        Wire::BaseGossip { ts, records },
                    );
                    self.trace(EventBody::GossipSend {
                        from: from.clone(),
                        to,
                        msg_id,
                        ts: ts_render,
                        records: keys,
                    });
                }
            }
        }
    }

    fn run_gc_traced(&mut self, replica: &ReplicaId) {
        let gc = {
            let Nodes::Edge { replicas, .. } = &mut self.nodes else {
                return;
            };
            replicas.get_mut(replica).expect("known replica").run_gc()
        };
        if gc.dropped_log + gc.dropped_done > 0 {
            self.trace(EventBody::GcRun {
                replica: replica.clone(),
                dropped_log: gc.dropped_log,
                dropped_done: gc.dropped_done,
            });
        }
    }

    fn deliver(&mut self, env: Envelope) {
        match env.wire {
            Wire::EdgeRequest { op_index, msg } => {
                let op = self.scenario.script[op_index].clone();
                let replica_id = ReplicaId::new(&env.to);
                match msg {
                    Message::Update { var, value, dep } => {
                        let out = {
                            let Nodes::Edge { replicas, .. } = &mut self.nodes else {
                                unreachable!()
                            };
                            replicas
                                .get_mut(&replica_id)
                                .expect("known replica")
                                .on_update(&var, value, &dep)
                                .expect("script validated")
                        };
                        self.trace(EventBody::ReplicaRecvUpdate {
                            replica: replica_id.clone(),
                            client: op.client.clone(),
                            op_index,
                            origin: out.key.0.clone(),
                            seq: out.key.1,
                            ts: out.reply_ts.render(),
                            applied: out.applied_now,
                        });
                        self.emit_apply_events(&replica_id, &out.effects.applied);
                        self.emit_answers(&replica_id, &out.effects.answered);
                        self.send(
                            env.to.clone(),
                            op.client.to_string(),
                            Wire::EdgeReply {
                                op_index,
                                ts: out.reply_ts,
                            },
                        );
                        if self.scenario.gossip.policy == GossipPolicy::AfterEveryUpdate {
                            self.emit_gossip(&replica_id, false);
                        }
                    }
                    Message::Query { var, dep } => {
                        let answer = {
                            let Nodes::Edge { replicas, .. } = &mut self.nodes else {
                                unreachable!()
                            };
                            replicas
                                .get_mut(&replica_id)
                                .expect("known replica")
                                .on_query(op_index as u64, &op.client, &var, &dep)
                                .expect("script validated")
                        };
                        match answer {
                            Some(ans) => {
                                self.trace(EventBody::QueryReply {
                                    replica: replica_id.clone(),
                                    client: op.client.clone(),
                                    op_index,
                                    var: ans.var.clone(),
                                    value: ans.value.clone(),
                                    read: ans.read.clone(),
                                    val: ans.val_snapshot.render(),
                                });
                                self.send(
                                    env.to.clone(),
                                    op.client.to_string(),
                                    Wire::EdgeQueryReply {
                                        op_index,
                                        value: ans.value,
                                        read: ans.read,
                                        val: ans.val_snapshot,
                                    },
                                );
                            }
                            None => {
                                self.stall_count += 1;
                                self.block_times.insert(op_index, self.now);
                                self.trace(EventBody::QueryBlocked {
                                    replica: replica_id,
                                    client: op.client.clone(),
                                    op_index,
                                    var,
                                    dep: dep.render(),
                                });
                            }
                        }
                    }
                    _ => unreachable!("requests are updates or queries"),
                }
            }
            Wire::EdgeReply { op_index, ts } => {
                let client_id = ClientId::new(&env.to);
                let clock_render = {
                    let Nodes::Edge { clients, .. } = &mut self.nodes else {
                        unreachable!()
                    };
                    let client = clients.get_mut(&client_id).expect("known client");
                    client.on_reply(&ts).expect("solicited");
                    client.clock.render()
                };
                self.op_status[op_index] = OpStatus::Complete;
                self.trace(EventBody::ClientRecvReply {
                    client: client_id,
                    op_index,
                    clock: clock_render,
                });
            }
            Wire::EdgeQueryReply {
                op_index,
                value: _,
                read: _,
                val,
            } => {
                let client_id = ClientId::new(&env.to);
                let clock_render = {
                    let Nodes::Edge { clients, .. } = &mut self.nodes else {
                        unreachable!()
                    };
                    let client = clients.get_mut(&client_id).expect("known client");
                    client.on_reply(&val).expect("solicited");
                    client.clock.render()
                };
                self.op_status[op_index] = OpStatus::Complete;
                self.trace(EventBody::ClientRecvReply {
                    client: client_id,
                    op_index,
                    clock: clock_render,
                });
            }
            Wire::EdgeGossip { ts, records } => {
                let to = ReplicaId::new(&env.to);
                let from = ReplicaId::new(&env.from);
                let effects = {
                    let Nodes::Edge { replicas, .. } = &mut self.nodes else {
                        unreachable!()
                    };
                    replicas
                        .get_mut(&to)
                        .expect("known replica")
                        .on_gossip(&from, &ts, &records)
                        .expect("share neighbors")
                };
                self.last_edge_gossip = Some((from.clone(), to.clone(), ts, records));
                self.trace(EventBody::GossipRecv {
                    from,
                    to: to.clone(),
                    msg_id: env.msg_id,
                });
                self.emit_apply_events(&to, &effects.applied);
                self.emit_answers(&to, &effects.answered);
                if self.scenario.gossip.gc {
                    self.run_gc_traced(&to);
                }
            }
            Wire::BaseRequest {
                op_index,
                kind,
                var,
                value,
                dep,
            } => {
                let op = self.scenario.script[op_index].clone();
                let replica_id = ReplicaId::new(&env.to);
                match kind {
                    OpKind::Update => {
                        let out = {
                            let Nodes::Base { replicas, .. } = &mut self.nodes else {
                                unreachable!()
                            };
                            replicas
                                .get_mut(&replica_id)
                                .expect("known replica")
                                .on_update(&var, value.unwrap(), &dep)
                                .expect("script validated")
                        };
                        self.trace(EventBody::ReplicaRecvUpdate {
                            replica: replica_id.clone(),
                            client: op.client.clone(),
                            op_index,
                            origin: out.key.0.clone(),
                            seq: out.key.1,
                            ts: out.reply_ts.render(),
                            applied: out.applied_now,
                        });
                        self.emit_base_apply_events(&replica_id, &out.effects.applied);
                        self.emit_base_answers(&replica_id, &out.effects.answered);
                        self.send(
                            env.to.clone(),
                            op.client.to_string(),
                            Wire::BaseReply {
                                op_index,
                                ts: out.reply_ts,
                            },
                        );
                        if self.scenario.gossip.policy == GossipPolicy::AfterEveryUpdate {
                            self.emit_gossip(&replica_id, false);
                        }
                    }
                    OpKind::Query => {
                        let answer = {
                            let Nodes::Base { replicas, .. } = &mut self.nodes else {
                                unreachable!()
                            };
                            replicas
                                .get_mut(&replica_id)
                                .expect("known replica")
                                .on_query(op_index as u64, &op.client, &var, &dep)
                                .expect("script validated")
                        };
                        match answer {
                            Some(ans) => {
                                self.trace(EventBody::QueryReply {
                                    replica: replica_id.clone(),
                                    client: op.client.clone(),
                                    op_index,
                                    var: ans.var.clone(),
                                    value: ans.value.clone(),
                                    read: ans.read.clone(),
                                    val: ans.val_snapshot.render(),
                                });
                                self.send(
                                    env.to.clone(),
                                    op.client.to_string(),
                                    Wire::BaseQueryReply {
                                        op_index,
                                        value: ans.value,
                                        read: ans.read,
                                        val: ans.val_snapshot,
                                    },
                                );
                            }
                            None => {
                                self.stall_count += 1;
                                self.block_times.insert(op_index, self.now);
                                self.trace(EventBody::QueryBlocked {
                                    replica: replica_id,
                                    client: op.client.clone(),
                                    op_index,
                                    var,
                                    dep: dep.render(),
                                });
                            }
                        }
                    }
                }
            }
            Wire::BaseReply { op_index, ts } | Wire::BaseQueryReply { op_index, val: ts, .. } => {
                let client_id = ClientId::new(&env.to);
                let clock_render = {
                    let Nodes::Base { clients, .. } = &mut self.nodes else {
                        unreachable!()
                    };
                    let client = clients.get_mut(&client_id).expect("known client");
                    client.on_reply(&ts).expect("solicited");
                    client.clock.render()
                };
                self.op_status[op_index] = OpStatus::Complete;
                self.trace(EventBody::ClientRecvReply {
                    client: client_id,
                    op_index,
                    clock: clock_render,
                });
            }
            Wire::BaseGossip { ts, records } => {
                let to = ReplicaId::new(&env.to);
                let from = ReplicaId::new(&env.from);
                let effects = {
                    let Nodes::Base { replicas, .. } = &mut self.nodes else {
                        unreachable!()
                    };
                    replicas
                        .get_mut(&to)
                        .expect("known replica")
                        .on_gossip(&from, &ts, &records)
                        .expect("share neighbors")
                };
                self.trace(EventBody::GossipRecv {
                    from,
                    to: to.clone(),
                    msg_id: env.msg_id,
                });
                self.emit_base_apply_events(&to, &effects.applied);
                self.emit_base_answers(&to, &effects.answered);
            }
        }
    }

    fn emit_apply_events(&mut self, replica: &ReplicaId, applied: &[RecordKey]) {
        for key in applied {
            let (var, value) = {
                let Nodes::Edge { replicas, .. } = &self.nodes else {
                    unreachable!()
                };
                let rec = replicas[replica]
                    .record(key)
                    .expect("applied record still logged");
                (rec.var.clone(), rec.value.clone())
            };
            self.trace(EventBody::ApplyWrite {
                replica: replica.clone(),
                origin: key.0.clone(),
                seq: key.1,
                var,
                value,
            });
        }
    }

    fn emit_base_apply_events(&mut self, replica: &ReplicaId, applied: &[RecordKey]) {
        for key in applied {
            let (var, value) = {
                let Nodes::Base { replicas, .. } = &self.nodes else {
                    unreachable!()
                };
                let rec = replicas[replica].record(key).expect("applied record logged");
                (rec.var.clone(), rec.value.clone())
            };
            self.trace(EventBody::ApplyWrite {
                replica: replica.clone(),
                origin: key.0.clone(),
                seq: key.1,
                var,
                value,
            });
        }
    }

    fn emit_answers(&mut self, replica: &ReplicaId, answers: &[crate::protocol::QueryAnswer]) {
        for ans in answers {
            let op_index = ans.token as usize;
            if let Some(t0) = self.block_times.remove(&op_index) {
                self.total_stall_duration += self.now - t0;
            }
            self.trace(EventBody::QueryUnblocked {
                replica: replica.clone(),
                client: ans.client.clone(),
                op_index,
            });
            self.trace(EventBody::QueryReply {
                replica: replica.clone(),
                client: ans.client.clone(),
                op_index,
                var: ans.var.clone(),
                value: ans.value.clone(),
                read: ans.read.clone(),
                val: ans.val_snapshot.render(),
            });
            self.send(
                replica.to_string(),
                ans.client.to_string(),
                Wire::EdgeQueryReply {
                    op_index,
                    value: ans.value.clone(),
                    read: ans.read.clone(),
                    val: ans.val_snapshot.clone(),
                },
            );
        }
    }

    fn emit_base_answers(&mut self, replica: &ReplicaId, answers: &[super::baseline::BaselineAnswer]) {
        for ans in answers {
            let op_index = ans.token as usize;
            if let Some(t0) = self.block_times.remove(&op_index) {
                self.total_stall_duration += self.now - t0;
            }
            self.trace(EventBody::QueryUnblocked {
                replica: replica.clone(),
                client: ans.client.clone(),
                op_index,
            });
            self.trace(EventBody::QueryReply {
                replica: replica.clone(),
                client: ans.client.clone(),
                op_index,
                var: ans.var.clone(),
                value: ans.value.clone(),
                read: ans.read.clone(),
                val: ans.val_snapshot.render(),
            });
            self.send(
                replica.to_string(),
                ans.client.to_string(),
                Wire::BaseQueryReply {
                    op_index,
                    value: ans.value.clone(),
                    read: ans.read.clone(),
                    val: ans.val_snapshot.clone(),
                },
            );
        }
    }

    fn periodic_tick(&mut self) {
        let replicas: Vec<ReplicaId> = self.scenario.topology.assign.replicas().cloned().collect();
        for r in replicas {
            self.emit_gossip(&r, true);
        }
    }

    fn pending_queries_exist(&self) -> bool {
        match &self.nodes {
            Nodes::Edge { replicas, .. } => {
                replicas.values().any(|r| !r.pending_queries().is_empty())
            }
            Nodes::Base { replicas, .. } => replicas.values().any(|r| r.pending_len() > 0),
        }
    }

    fn script_complete(&self) -> bool {
        self.op_status.iter().all(|s| *s == OpStatus::Complete)
    }

    fn run_loop(&mut self, mut observer: Option<&mut dyn FnMut(&World)>) -> bool {
        self.dispatch_script();
        self.note_sizes();
        let mut processed: u64 = 0;
        loop {
            if processed >= self.step_cap {
                return false; // capped: non-quiescent
            }
            let next_delivery = self.heap.peek().map(|Reverse(e)| e.deliver_at);
            let take_tick = match (self.next_tick, next_delivery) {
                (Some(t), Some(d)) => t < d,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if take_tick {
                let t = self.next_tick.unwrap();
                self.now = t;
                self.periodic_tick();
                processed += 1;
                // keep ticking only while something can still happen
                let idle = self.heap.is_empty()
                    && self.script_complete()
                    && !self.pending_queries_exist();
                let GossipPolicy::Periodic(p) = self.scenario.gossip.policy else {
                    unreachable!()
                };
                self.next_tick = if idle { None } else { Some(t + p) };
            } else if let Some(Reverse(env)) = self.heap.pop() {
                self.now = env.deliver_at;
                self.deliver(env);
                processed += 1;
                self.dispatch_script();
            } else {
                break;
            }
            self.note_sizes();
            if let Some(obs) = observer.as_deref_mut() {
                obs(self);
            }
        }
        self.script_complete() && !self.pending_queries_exist()
    }

    fn metrics(&self, quiescent: bool) -> Metrics {
        let topo = &self.scenario.topology;
        let mut message_counts: BTreeMap<String, u64> = BTreeMap::new();
        for e in &self.events {
            *message_counts.entry(e.body.kind_name().to_owned()).or_insert(0) += 1;
        }
        let replica_edge_counts = topo
            .replica_edges
            .iter()
            .map(|(r, edges)| (r.clone(), edges.directed.len()))
            .collect();
        let replica_reduced_counts = topo
            .assign
            .replicas()
            .map(|r| {
                let sys = IncidenceSystem::build(&topo.share, &topo.replica_edges, r);
                (r.clone(), ReductionBasis::compute(&sys).reduced_len())
            })
            .collect();
        let client_edge_counts = topo
            .client_edges
            .iter()
            .map(|(c, edges)| (c.clone(), edges.len()))
            .collect();
        Metrics {
            replica_edge_counts,
            replica_reduced_counts,
            client_edge_counts,
            stall_count: self.stall_count,
            total_stall_duration: self.total_stall_duration,
            message_counts,
            max_log: self.max_log.clone(),
            max_done: self.max_done.clone(),
            quiescent,
        }
    }
}

/// Runs a scenario in its configured (or overridden) mode.
pub fn run_mode(sc: &Scenario, seed: u64, mode: Mode, step_cap: u64) -> (Trace, Metrics) {
    let mut world = World::new(sc, seed, mode, Faults::default(), step_cap);
    let quiescent = world.run_loop(None);
    let trace = Trace {
        events: world.events.clone(),
        quiescent,
    };
    let metrics = world.metrics(quiescent);
    (trace, metrics)
}

/// Event-driven execution in the scenario's own mode.
pub fn run(sc: &Scenario, seed: u64) -> (Trace, Metrics) {
    run_mode(sc, seed, sc.mode, DEFAULT_STEP_CAP)
}

/// Same harness forced to the replica-indexed baseline.
pub fn run_baseline(sc: &Scenario, seed: u64) -> (Trace, Metrics) {
    run_mode(sc, seed, Mode::Baseline, DEFAULT_STEP_CAP)
}

/// Edge-protocol run with injected faults and an observer called after every
/// processed event; used by the checker's fault-injection and invariant
/// tests.
pub fn run_observed(
    sc: &Scenario,
    seed: u64,
    faults: Faults,
    observer: &mut dyn FnMut(&World),
) -> (Trace, Metrics) {
    let mut world = World::new(sc, seed, Mode::Edge, faults, DEFAULT_STEP_CAP);
    let quiescent = world.run_loop(Some(observer));
    let trace = Trace {
        events: world.events.clone(),
        quiescent,
    };
    let metrics = world.metrics(quiescent);
    (trace, metrics)
}
